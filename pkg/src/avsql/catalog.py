"""Schema catalog: ingestion, prompt serialization and token estimation."""

from __future__ import annotations

import json
import logging
import math
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

logger = logging.getLogger(__name__)

TYPE_TAGS = ("text", "integer", "real", "date", "timestamp", "boolean", "other")
DETAIL_LEVELS = ("names_only", "full")

TokenEstimator = Callable[[str], int]


class CatalogError(ValueError):
    """Raised for unreadable sources or catalogs that break their invariants."""


def estimate_tokens(text: str) -> int:
    """Approximate model tokens as ceil(utf-8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def normalize_type(vendor_type: str | None) -> str:
    """Map a vendor column type onto one of the seven type tags."""
    t = (vendor_type or "").upper()
    if not t:
        return "other"
    if "BOOL" in t:
        return "boolean"
    if "TIMESTAMP" in t or "DATETIME" in t:
        return "timestamp"
    if "DATE" in t:
        return "date"
    if "INT" in t:
        return "integer"
    if any(k in t for k in ("CHAR", "CLOB", "TEXT", "STRING", "VARIANT")):
        return "text"
    if any(k in t for k in ("REAL", "FLOA", "DOUB", "NUMERIC", "DECIMAL", "NUMBER")):
        return "real"
    return "other"


@dataclass(frozen=True)
class ColumnDef:
    name: str
    data_type: str = "other"
    description: str | None = None

    def __post_init__(self):
        if not self.name:
            raise CatalogError("column name must be non-empty")
        if self.data_type not in TYPE_TAGS:
            raise CatalogError(f"unknown type tag {self.data_type!r} for column {self.name}")


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]
    description: str | None = None
    sample_rows: tuple[tuple, ...] = ()
    primary_key: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "sample_rows", tuple(tuple(r) for r in self.sample_rows))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        if not self.columns:
            raise CatalogError(f"table {self.name} has no columns")
        if len(self.sample_rows) > 3:
            raise CatalogError(f"table {self.name}: at most 3 sample rows")
        seen = set()
        for col in self.columns:
            key = col.name.casefold()
            if key in seen:
                raise CatalogError(f"duplicate column {col.name} in table {self.name}")
            seen.add(key)

    def column(self, name: str) -> ColumnDef | None:
        key = name.casefold()
        for col in self.columns:
            if col.name.casefold() == key:
                return col
        return None

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass(frozen=True)
class ForeignKeyRef:
    child_table: str
    child_column: str
    parent_table: str
    parent_column: str

    def endpoints(self) -> tuple[str, str]:
        return self.child_table, self.parent_table

    def __str__(self) -> str:
        return f"{self.child_table}.{self.child_column} -> {self.parent_table}.{self.parent_column}"


class HasTables(Protocol):
    tables: Sequence[TableDef]
    relations: Sequence[ForeignKeyRef]


@dataclass(frozen=True)
class SchemaCatalog:
    """Tables, columns and foreign keys of one database, in storage order."""

    db_id: str
    tables: tuple[TableDef, ...]
    relations: tuple[ForeignKeyRef, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        object.__setattr__(self, "relations", tuple(self.relations))
        index = {}
        for table in self.tables:
            key = table.name.casefold()
            if key in index:
                raise CatalogError(f"duplicate table name {table.name}")
            index[key] = table
        object.__setattr__(self, "_index", index)
        for fk in self.relations:
            for t, c in ((fk.child_table, fk.child_column), (fk.parent_table, fk.parent_column)):
                table = index.get(t.casefold())
                if table is None or table.column(c) is None:
                    raise CatalogError(f"foreign key {fk} names missing endpoint {t}.{c}")

    def table(self, name: str) -> TableDef | None:
        return self._index.get(name.casefold())

    def has_column(self, table: str, column: str) -> bool:
        t = self.table(table)
        return t is not None and t.column(column) is not None

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def subset(self, names: Iterable[str]) -> "SchemaCatalog":
        """Catalog restricted to `names`, keeping only FKs inside the subset."""
        keep = {n.casefold() for n in names}
        tables = [t for t in self.tables if t.name.casefold() in keep]
        rels = [r for r in self.relations
                if r.child_table.casefold() in keep and r.parent_table.casefold() in keep]
        return SchemaCatalog(self.db_id, tuple(tables), tuple(rels))

    # -- manifest round trip -------------------------------------------------
    def to_manifest(self) -> dict:
        tables = []
        for t in self.tables:
            entry = {
                "name": t.name,
                "columns": [
                    {"name": c.name, "type": c.data_type, "description": c.description}
                    for c in t.columns
                ],
                "description": t.description,
            }
            if t.primary_key:
                entry["primary_key"] = list(t.primary_key)
            if t.sample_rows:
                entry["sample_rows"] = [list(r) for r in t.sample_rows]
            tables.append(entry)
        return {
            "db_id": self.db_id,
            "tables": tables,
            "foreign_keys": [
                [r.child_table, r.child_column, r.parent_table, r.parent_column]
                for r in self.relations
            ],
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "SchemaCatalog":
        try:
            tables = []
            for t in data["tables"]:
                cols = [
                    ColumnDef(c["name"], normalize_type(c.get("type")), c.get("description"))
                    for c in t["columns"]
                ]
                tables.append(TableDef(
                    t["name"], tuple(cols), t.get("description"),
                    tuple(tuple(r) for r in t.get("sample_rows", ())[:3]),
                    tuple(t.get("primary_key", ())),
                ))
            rels = [ForeignKeyRef(*fk) for fk in data.get("foreign_keys", [])]
            return cls(data["db_id"], tuple(tables), tuple(rels))
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"malformed schema manifest: {exc!r}") from exc


def load_manifest(path: str | Path) -> SchemaCatalog:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot read schema manifest {path}: {exc}") from exc
    return SchemaCatalog.from_manifest(data)


def save_manifest(catalog: SchemaCatalog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(catalog.to_manifest(), indent=2) + "\n", encoding="utf-8")


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def connect_readonly(db_path: str | Path) -> sqlite3.Connection:
    path = Path(db_path)
    if not path.is_file():
        raise CatalogError(f"database file not found: {path}")
    return sqlite3.connect(f"{path.resolve().as_uri()}?mode=ro", uri=True)


def ingest_from_database(db_path: str | Path, db_id: str | None = None,
                         sample_rows: int = 0) -> SchemaCatalog:
    """Introspect an SQLite file into a catalog.

    Foreign keys whose parent table is missing are dropped with a warning.
    """
    path = Path(db_path)
    db_id = db_id or path.stem
    try:
        conn = connect_readonly(path)
    except sqlite3.Error as exc:
        raise CatalogError(f"unreadable database {path}: {exc}") from exc
    try:
        names = [r[0] for r in conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY rowid")]
        if not names:
            raise CatalogError(f"zero user tables in {path}")
        tables = []
        raw_fks = []
        for name in names:
            info = conn.execute(f"PRAGMA table_info({_quote(name)})").fetchall()
            cols = tuple(ColumnDef(r[1], normalize_type(r[2])) for r in info)
            pk = tuple(r[1] for r in sorted((r for r in info if r[5]), key=lambda r: r[5]))
            rows = ()
            if sample_rows:
                rows = tuple(conn.execute(
                    f"SELECT * FROM {_quote(name)} LIMIT ?", (min(sample_rows, 3),)).fetchall())
            tables.append(TableDef(name, cols, None, rows, pk))
            for fk in conn.execute(f"PRAGMA foreign_key_list({_quote(name)})"):
                raw_fks.append((name, fk[3], fk[2], fk[4]))
    except sqlite3.DatabaseError as exc:
        raise CatalogError(f"unreadable database {path}: {exc}") from exc
    finally:
        conn.close()

    by_name = {t.name.casefold(): t for t in tables}
    relations = []
    for child, child_col, parent, parent_col in raw_fks:
        parent_def = by_name.get(parent.casefold())
        if parent_def is None:
            logger.warning("dropping foreign key %s.%s -> %s: no such table", child, child_col, parent)
            continue
        if parent_col is None:
            if len(parent_def.primary_key) != 1:
                logger.warning("dropping foreign key %s.%s -> %s: ambiguous parent key",
                               child, child_col, parent)
                continue
            parent_col = parent_def.primary_key[0]
        pcol = parent_def.column(parent_col)
        ccol = by_name[child.casefold()].column(child_col)
        if pcol is None or ccol is None:
            logger.warning("dropping foreign key %s.%s -> %s.%s: no such column",
                           child, child_col, parent, parent_col)
            continue
        fk = ForeignKeyRef(child, ccol.name, parent_def.name, pcol.name)
        if fk not in relations:
            relations.append(fk)
    return SchemaCatalog(db_id, tuple(tables), tuple(relations))


def _render_table(table: TableDef, detail_level: str) -> str:
    head = f"table({table.name})"
    if detail_level == "full" and table.description:
        head += f" -- {table.description}"
    lines = [head]
    for col in table.columns:
        if detail_level == "names_only":
            lines.append(col.name)
            continue
        line = f"{col.name}: {col.data_type}"
        if col.description:
            line += f" -- {col.description}"
        lines.append(line)
    if detail_level == "full" and table.primary_key:
        lines.append("primary_key: " + ", ".join(table.primary_key))
    if detail_level == "full" and table.sample_rows:
        for row in table.sample_rows:
            lines.append("sample: " + json.dumps(list(row), default=str, ensure_ascii=False))
    return "\n".join(lines)


def render_table(table: TableDef, detail_level: str = "full") -> str:
    return _render_table(table, detail_level)


def serialize(schema: HasTables, detail_level: str = "full") -> str:
    """Render tables (catalog or chunk) as deterministic prompt text.

    One block per table in order, then the foreign keys whose endpoints are
    both present.
    """
    if detail_level not in DETAIL_LEVELS:
        raise ValueError(f"detail_level must be one of {DETAIL_LEVELS}")
    blocks = [_render_table(t, detail_level) for t in schema.tables]
    present = {t.name.casefold() for t in schema.tables}
    fk_lines = [
        f"foreign_key: {fk}" for fk in schema.relations
        if fk.child_table.casefold() in present and fk.parent_table.casefold() in present
    ]
    if fk_lines:
        blocks.append("\n".join(fk_lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")
