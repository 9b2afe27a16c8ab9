"""SQL parsing and AST analysis: literals, table/column references, linking errors."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import sqlglot
from sqlglot import exp
from sqlglot.errors import ErrorLevel, OptimizeError, ParseError, TokenError
from sqlglot.optimizer.scope import Scope, traverse_scope

from .catalog import SchemaCatalog

DIALECTS = {"generic": None, "sqlite": "sqlite", "snowflake": "snowflake"}

# compression patterns such as GA_SESSIONS_{NUM} are not valid identifiers
_NUM_TOKEN = "__AVSQL_NUM__"
_ANSI = re.compile(r"\x1b\[[0-9;]*m")
_MISSING_BY = re.compile(r"\b(ORDER|GROUP|PARTITION)\b(?!\s+BY\b)", re.IGNORECASE)
_QUOTED = re.compile(r"'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"|`[^`]*`|\[[^\]]*\]")
_DATE_LIKE = re.compile(
    r"^\d{4}-\d{1,2}(-\d{1,2})?([ T]\d{1,2}:\d{2}(:\d{2}(\.\d+)?)?)?$|^\d{1,2}:\d{2}(:\d{2})?$")


class SqlSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col


@dataclass
class SqlProgram:
    raw_text: str
    dialect: str
    statements: list[exp.Expression]
    cte_names: list[str]


@dataclass
class ReferenceSet:
    tables: set[str] = field(default_factory=set)
    columns: set[str] = field(default_factory=set)
    unresolved: list[str] = field(default_factory=list)

    def __or__(self, other: "ReferenceSet") -> "ReferenceSet":
        return ReferenceSet(self.tables | other.tables, self.columns | other.columns,
                            self.unresolved + [u for u in other.unresolved
                                               if u not in self.unresolved])

    def to_json(self) -> dict:
        return {"tables": sorted(self.tables), "columns": sorted(self.columns),
                "unresolved": list(self.unresolved)}


def _restore(name: str) -> str:
    return name.replace(_NUM_TOKEN, "{NUM}")


def _syntax_message(sql: str, err: Exception) -> SqlSyntaxError:
    details = getattr(err, "errors", None) or []
    line = col = None
    if details:
        d = details[0]
        line, col = d.get("line"), d.get("col")
        near = _restore(d.get("highlight") or "")
        msg = f"syntax error at line {line}, col {col} near '{near}': {d.get('description')}"
    else:
        msg = "syntax error: " + _ANSI.sub("", str(err)).splitlines()[0]
    bare = _QUOTED.sub("''", sql)
    for m in _MISSING_BY.finditer(bare):
        msg += f"; {m.group(1).upper()} must be followed by BY"
        break
    return SqlSyntaxError(msg, line, col)


def parse(sql_text: str, dialect: str = "sqlite") -> SqlProgram:
    """Parse SQL into statements, raising SqlSyntaxError with a stable message."""
    if dialect not in DIALECTS:
        raise ValueError(f"unknown dialect {dialect!r}")
    text = sql_text.replace("{NUM}", _NUM_TOKEN)
    try:
        stmts = [s for s in sqlglot.parse(text, read=DIALECTS[dialect],
                                          error_level=ErrorLevel.RAISE) if s is not None]
    except (ParseError, TokenError) as err:
        raise _syntax_message(text, err) from None
    if not stmts:
        raise SqlSyntaxError("syntax error: empty SQL text")
    for s in stmts:
        if isinstance(s, exp.Command):
            raise SqlSyntaxError(f"syntax error: unsupported statement near '{s.sql()[:40]}'")
    ctes = [_restore(c.alias_or_name) for s in stmts for c in s.find_all(exp.CTE, bfs=False)]
    return SqlProgram(sql_text, dialect, stmts, ctes)


def render(program: SqlProgram) -> str:
    d = DIALECTS[program.dialect]
    return ";\n".join(_restore(s.sql(dialect=d)) for s in program.statements)


def is_parseable(sql_text: str, dialect: str = "sqlite") -> bool:
    try:
        parse(sql_text, dialect)
    except SqlSyntaxError:
        return False
    return True


# -- literals -----------------------------------------------------------------

def _in_predicate(node: exp.Expression) -> bool:
    parent = node.parent
    while parent is not None:
        if isinstance(parent, (exp.Predicate, exp.Where, exp.Having, exp.Qualify)):
            return True
        if isinstance(parent, (exp.Select, exp.Subquery)):
            return False
        parent = parent.parent
    return False


def _numeric_or_date(value: str) -> bool:
    v = value.strip()
    if _DATE_LIKE.match(v):
        return True
    try:
        float(v)
    except ValueError:
        return False
    return True


def extract_literals(program: SqlProgram) -> list[str]:
    """String literals in predicate positions, document order, duplicates kept."""
    out = []
    for stmt in program.statements:
        for lit in stmt.find_all(exp.Literal, bfs=False):
            if not lit.is_string or not _in_predicate(lit):
                continue
            if _numeric_or_date(lit.this):
                continue
            out.append(lit.this)
    return out


# -- references ---------------------------------------------------------------

def _table_name(table: exp.Table, catalog: SchemaCatalog | None) -> str:
    parts = [p for p in (table.catalog, table.db, table.name) if p]
    parts = [_restore(p) for p in parts]
    if catalog is not None:
        for i in range(len(parts)):
            t = catalog.table(".".join(parts[i:]))
            if t is not None:
                return t.name
    return parts[-1] if len(parts) == 1 else ".".join(parts)


def _select_of(expr: exp.Expression):
    while isinstance(expr, exp.SetOperation):
        expr = expr.this
    if isinstance(expr, exp.Subquery):
        return _select_of(expr.this)
    return expr if isinstance(expr, exp.Select) else None


class _Resolver:
    def __init__(self, catalog: SchemaCatalog | None):
        self.catalog = catalog
        self.refs = ReferenceSet()

    def _base_columns(self, base: str) -> list[str] | None:
        if self.catalog is None or self.catalog.table(base) is None:
            return None
        return self.catalog.table(base).column_names

    def outputs(self, scope: Scope, depth: int = 0) -> list[str]:
        select = _select_of(scope.expression)
        if select is None or depth > 32:
            return []
        names = []
        for proj in select.expressions:
            if isinstance(proj, exp.Star):
                for src in scope.sources.values():
                    names.extend(self._source_outputs(src, depth))
            elif isinstance(proj, exp.Column) and isinstance(proj.this, exp.Star):
                src = self._lookup(scope, proj.table)
                if src is not None:
                    names.extend(self._source_outputs(src, depth))
            else:
                names.append(_restore(proj.alias_or_name))
        return names

    def _source_outputs(self, src, depth) -> list[str]:
        if isinstance(src, exp.Table):
            return self._base_columns(_table_name(src, self.catalog)) or []
        if isinstance(src, Scope):
            return self.outputs(src, depth + 1)
        return []

    @staticmethod
    def _lookup(scope: Scope, alias: str):
        key = alias.casefold()
        s = scope
        while s is not None:
            for name, src in s.sources.items():
                if name.casefold() == key:
                    return src
            s = s.parent
        return None

    def _owners(self, scope: Scope, column: str) -> list:
        key = column.casefold()
        owners = []
        for src in scope.sources.values():
            if isinstance(src, exp.Table):
                cols = self._base_columns(_table_name(src, self.catalog))
            elif isinstance(src, Scope):
                cols = self.outputs(src)
            else:
                cols = None
            if cols and any(c.casefold() == key for c in cols):
                owners.append(src)
        return owners

    def _add_column(self, src, column: str) -> None:
        if not isinstance(src, exp.Table):
            return  # CTE / derived-table column: traced inside that scope
        base = _table_name(src, self.catalog)
        name = _restore(column)
        if self.catalog is not None and self.catalog.table(base) is not None:
            col = self.catalog.table(base).column(name)
            if col is not None:
                name = col.name
        self.refs.columns.add(f"{base}.{name}")

    def _unresolved(self, text: str) -> None:
        if text not in self.refs.unresolved:
            self.refs.unresolved.append(text)

    def collect(self, scope: Scope) -> None:
        for src in scope.sources.values():
            if isinstance(src, exp.Table):
                self.refs.tables.add(_table_name(src, self.catalog))

        select = _select_of(scope.expression) if isinstance(scope.expression, exp.Select) else None
        if select is not None:
            for proj in select.expressions:
                if isinstance(proj, exp.Star):
                    for src in scope.sources.values():
                        self._add_star(src)
                elif isinstance(proj, exp.Column) and isinstance(proj.this, exp.Star):
                    src = self._lookup(scope, proj.table)
                    if src is None:
                        self._unresolved(f"unknown table alias {proj.table}")
                    else:
                        self._add_star(src)

        aliases = {a.casefold() for a in (select.named_selects if select is not None else [])}
        for col in scope.columns:
            if isinstance(col.this, exp.Star):
                continue
            name = col.name
            if col.table:
                src = self._lookup(scope, col.table)
                if src is None:
                    self._unresolved(f"unknown table alias {_restore(col.table)}")
                else:
                    self._add_column(src, name)
                continue
            owners = self._owners(scope, name)
            s = scope.parent
            while not owners and s is not None:
                owners = self._owners(s, name)
                s = s.parent
            if len(owners) == 1:
                self._add_column(owners[0], name)
            elif len(owners) > 1:
                self._unresolved(f"ambiguous column {_restore(name)}")
            elif name.casefold() in aliases:
                continue
            elif len(scope.sources) == 1:
                self._add_column(next(iter(scope.sources.values())), name)
            else:
                self._unresolved(f"unresolved column {_restore(name)}")

    def _add_star(self, src) -> None:
        if isinstance(src, exp.Table):
            for c in self._base_columns(_table_name(src, self.catalog)) or []:
                self._add_column(src, c)


def extract_references(program: SqlProgram, catalog: SchemaCatalog | None = None) -> ReferenceSet:
    """Base tables and ``table.column`` names a program reads.

    CTE names never appear as tables; columns of CTEs and derived tables are
    traced to the base columns inside their definitions instead. Ambiguous or
    unowned unqualified columns land in ``unresolved`` rather than being guessed.
    """
    resolver = _Resolver(catalog)
    for stmt in program.statements:
        try:
            scopes = traverse_scope(stmt)
        except OptimizeError as err:
            resolver._unresolved(f"unanalyzable statement: {err}")
            continue
        for scope in scopes:
            resolver.collect(scope)
    ctes = {c.casefold() for c in program.cte_names}
    resolver.refs.tables = {t for t in resolver.refs.tables if t.casefold() not in ctes}
    return resolver.refs


def validate_references(refs: ReferenceSet, catalog: SchemaCatalog, compressed=None) -> list[str]:
    """One message per table/column absent from the catalog, plus unresolved names.

    Columns of unknown tables are not reported separately. With a compressed
    catalog, original member names of clustered tables count as present.
    """
    def known_table(name: str) -> str | None:
        t = catalog.table(name)
        if t is None and compressed is not None:
            t = catalog.table(compressed.canonical_table(name))
        return t.name if t is not None else None

    errors = []
    unknown_tables = set()
    for t in sorted(refs.tables, key=str.casefold):
        if known_table(t) is None:
            unknown_tables.add(t.casefold())
            errors.append(f"unknown table {t}")
    for qualified in sorted(refs.columns, key=str.casefold):
        table, _, column = qualified.rpartition(".")
        if table.casefold() in unknown_tables:
            continue
        tname = known_table(table)
        if tname is None:
            unknown_tables.add(table.casefold())
            errors.append(f"unknown table {table}")
            continue
        tdef = catalog.table(tname)
        if tdef.column(column) is None and not _in_column_cluster(compressed, tname, column):
            errors.append(f"unknown column {table}.{column}")
    errors.extend(refs.unresolved)
    return errors


def _in_column_cluster(compressed, table: str, column: str) -> bool:
    if compressed is None:
        return False
    for c in compressed.column_clusters:
        if c.table.casefold() == table.casefold() and any(
                m.casefold() == column.casefold() for m in c.members):
            return True
    return False


def has_top_level_order_by(program_or_sql, dialect: str = "sqlite") -> bool:
    program = program_or_sql if isinstance(program_or_sql, SqlProgram) \
        else parse(program_or_sql, dialect)
    stmt = program.statements[-1]
    return stmt.args.get("order") is not None
