"""Pattern-based clustering of near-duplicate tables and columns."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Literal

from .catalog import ColumnDef, ForeignKeyRef, SchemaCatalog, TableDef

PLACEHOLDER = "{NUM}"
_DIGIT_RUN = re.compile(r"\d{2,}")


def name_pattern(name: str) -> str:
    """Replace every maximal run of two or more digits with ``{NUM}``."""
    return _DIGIT_RUN.sub(PLACEHOLDER, name)


def matches_pattern(name: str, pattern: str) -> bool:
    return PLACEHOLDER in pattern and name_pattern(name) == pattern


@dataclass(frozen=True)
class ClusterPattern:
    pattern: str
    members: tuple[str, ...]
    kind: Literal["table", "column"]
    table: str | None = None  # owning (compressed) table for column clusters

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("a cluster needs at least two members")
        bad = [m for m in self.members if not matches_pattern(m, self.pattern)]
        if bad:
            raise ValueError(f"members {bad} do not match pattern {self.pattern}")


@dataclass(frozen=True)
class CompressedCatalog:
    catalog: SchemaCatalog
    table_clusters: tuple[ClusterPattern, ...] = ()
    column_clusters: tuple[ClusterPattern, ...] = ()
    original_tables: tuple[str, ...] = ()
    _member_to_pattern: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        m = {}
        for c in self.table_clusters:
            for name in c.members:
                m[name.casefold()] = c.pattern
        object.__setattr__(self, "_member_to_pattern", m)

    @property
    def expansion_map(self) -> dict:
        return {
            "tables": {c.pattern: list(c.members) for c in self.table_clusters},
            "columns": {
                tbl: {c.pattern: list(c.members) for c in self.column_clusters if c.table == tbl}
                for tbl in dict.fromkeys(c.table for c in self.column_clusters)
            },
        }

    def canonical_table(self, name: str) -> str:
        """Compressed-catalog name for an original table name (identity otherwise)."""
        return self._member_to_pattern.get(name.casefold(), name)

    def to_json(self) -> dict:
        return {
            "catalog": self.catalog.to_manifest(),
            "original_tables": list(self.original_tables),
            "expansion_map": self.expansion_map,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CompressedCatalog":
        catalog = SchemaCatalog.from_manifest(data["catalog"])
        emap = data.get("expansion_map", {})
        tclusters = tuple(ClusterPattern(p, tuple(m), "table")
                          for p, m in emap.get("tables", {}).items())
        cclusters = tuple(ClusterPattern(p, tuple(m), "column", tbl)
                          for tbl, pats in emap.get("columns", {}).items()
                          for p, m in pats.items())
        return cls(catalog, tclusters, cclusters, tuple(data.get("original_tables", ())))


def _fk_signature(table: str, relations) -> frozenset:
    key = table.casefold()
    sig = set()
    for fk in relations:
        child = "<self>" if fk.child_table.casefold() == key else fk.child_table.casefold()
        parent = "<self>" if fk.parent_table.casefold() == key else fk.parent_table.casefold()
        if "<self>" in (child, parent):
            sig.add((child, fk.child_column.casefold(), parent, fk.parent_column.casefold()))
    return frozenset(sig)


def _table_signature(table: TableDef, relations) -> tuple:
    cols = tuple((c.name, c.data_type) for c in table.columns)
    return cols, tuple(table.primary_key), _fk_signature(table.name, relations)


def _group(items, key):
    groups: dict = {}
    for item in items:
        groups.setdefault(key(item), []).append(item)
    return groups


def _cluster_tables(catalog: SchemaCatalog):
    taken = {t.name.casefold() for t in catalog.tables}
    # a table holding a column cluster has already been compressed; its original
    # columns are unknown here, so merging it could hide a structural difference
    candidates = [t for t in catalog.tables
                  if not any(PLACEHOLDER in c.name for c in t.columns)]
    clusters = []
    for pattern, members in _group(candidates, lambda t: name_pattern(t.name)).items():
        if PLACEHOLDER not in pattern or len(members) < 2 or pattern.casefold() in taken:
            continue
        by_sig = _group(members, lambda t: _table_signature(t, catalog.relations))
        # one cluster per pattern: the first structurally consistent subgroup wins
        for sub in by_sig.values():
            if len(sub) >= 2:
                clusters.append(ClusterPattern(pattern, tuple(t.name for t in sub), "table"))
                taken.add(pattern.casefold())
                break
    return clusters


def _key_columns(table: TableDef, relations) -> set[str]:
    keys = {c.casefold() for c in table.primary_key}
    tkey = table.name.casefold()
    for fk in relations:
        if fk.child_table.casefold() == tkey:
            keys.add(fk.child_column.casefold())
        if fk.parent_table.casefold() == tkey:
            keys.add(fk.parent_column.casefold())
    return keys


def _cluster_columns(table: TableDef, relations):
    """Return (new column tuple, clusters) for one table."""
    keys = _key_columns(table, relations)
    taken = {c.name.casefold() for c in table.columns}
    groups = _group(
        [c for c in table.columns if c.name.casefold() not in keys],
        lambda c: name_pattern(c.name),
    )
    merged: dict[str, ClusterPattern] = {}
    for pattern, members in groups.items():
        if PLACEHOLDER not in pattern or len(members) < 2 or pattern.casefold() in taken:
            continue
        by_meta = _group(members, lambda c: (c.data_type, name_pattern(c.description or "")))
        for sub in by_meta.values():
            if len(sub) >= 2:
                cluster = ClusterPattern(pattern, tuple(c.name for c in sub), "column", table.name)
                for c in sub:
                    merged[c.name] = cluster
                taken.add(pattern.casefold())
                break
    if not merged:
        return table.columns, []
    out, emitted = [], set()
    for col in table.columns:
        cluster = merged.get(col.name)
        if cluster is None:
            out.append(col)
        elif cluster.pattern not in emitted:
            emitted.add(cluster.pattern)
            out.append(ColumnDef(cluster.pattern, col.data_type, col.description))
    clusters = list({id(c): c for c in merged.values()}.values())
    return tuple(out), clusters


def compress_schema(catalog: SchemaCatalog) -> CompressedCatalog:
    """Merge digit-suffixed tables/columns that are structurally identical.

    Tables merge only with identical ordered (name, type) columns, primary key
    and foreign-key participation. Columns merge only with identical type and
    description skeleton; key columns never merge.
    """
    table_clusters = _cluster_tables(catalog)
    member_of = {m.casefold(): c for c in table_clusters for m in c.members}

    tables, emitted = [], set()
    for t in catalog.tables:
        cluster = member_of.get(t.name.casefold())
        if cluster is None:
            tables.append(t)
        elif cluster.pattern not in emitted:
            emitted.add(cluster.pattern)
            tables.append(TableDef(cluster.pattern, t.columns, t.description, (), t.primary_key))

    def rename(name):
        c = member_of.get(name.casefold())
        return c.pattern if c else name

    relations = []
    for fk in catalog.relations:
        new = ForeignKeyRef(rename(fk.child_table), fk.child_column,
                            rename(fk.parent_table), fk.parent_column)
        if new not in relations:
            relations.append(new)

    column_clusters = []
    final_tables = []
    for t in tables:
        cols, clusters = _cluster_columns(t, relations)
        column_clusters.extend(clusters)
        final_tables.append(t if not clusters else
                            TableDef(t.name, cols, t.description, t.sample_rows, t.primary_key))

    merged = SchemaCatalog(catalog.db_id, tuple(final_tables), tuple(relations))
    return CompressedCatalog(merged, tuple(table_clusters), tuple(column_clusters),
                             tuple(catalog.table_names))


def expand_name(name: str, compressed: CompressedCatalog, table: str | None = None) -> list[str]:
    """Original names behind a (possibly clustered) table or column name.

    With ``table`` given, ``name`` is a column of that compressed table.
    """
    if table is None:
        for c in compressed.table_clusters:
            if c.pattern.casefold() == name.casefold():
                return list(c.members)
        if compressed.catalog.table(name) is not None:
            return [compressed.catalog.table(name).name]
        for orig in compressed.original_tables:
            if orig.casefold() == name.casefold():
                return [orig]
        raise KeyError(f"unknown table name {name}")

    tname = compressed.canonical_table(table)
    tdef = compressed.catalog.table(tname)
    if tdef is None:
        raise KeyError(f"unknown table name {table}")
    for c in compressed.column_clusters:
        if c.table.casefold() == tdef.name.casefold() and c.pattern.casefold() == name.casefold():
            return list(c.members)
        if c.table.casefold() == tdef.name.casefold() and any(
                m.casefold() == name.casefold() for m in c.members):
            return [next(m for m in c.members if m.casefold() == name.casefold())]
    col = tdef.column(name)
    if col is None:
        raise KeyError(f"unknown column {table}.{name}")
    return [col.name]
