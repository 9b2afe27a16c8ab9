"""Token-budgeted partitioning of a schema into chunks of whole tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

from .catalog import (ForeignKeyRef, SchemaCatalog, TableDef, TokenEstimator,
                      estimate_tokens, serialize)

logger = logging.getLogger(__name__)


class SplitStrategy(str, Enum):
    LENGTH = "length"
    PER_TABLE = "per_table"


@dataclass(frozen=True)
class SchemaChunk:
    index: int  # 1-based
    tables: tuple[TableDef, ...]
    relations: tuple[ForeignKeyRef, ...]
    token_estimate: int
    oversize: bool = False

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "tables": self.table_names,
            "token_estimate": self.token_estimate,
            "oversize": self.oversize,
        }


@dataclass(frozen=True)
class SchemaPartition:
    chunks: tuple[SchemaChunk, ...]
    budget: int

    def to_json(self) -> dict:
        return {"budget": self.budget, "chunks": [c.to_json() for c in self.chunks]}

    @classmethod
    def from_json(cls, data: dict, catalog: SchemaCatalog,
                  estimator: TokenEstimator = estimate_tokens) -> "SchemaPartition":
        chunks = []
        for c in data["chunks"]:
            chunks.append(_make_chunk(c["index"], [catalog.table(n) for n in c["tables"]],
                                      catalog, estimator, c.get("oversize", False)))
        return cls(tuple(chunks), data["budget"])


def _relations_within(catalog: SchemaCatalog, tables) -> tuple[ForeignKeyRef, ...]:
    names = {t.name.casefold() for t in tables}
    return tuple(r for r in catalog.relations
                 if r.child_table.casefold() in names and r.parent_table.casefold() in names)


def _make_chunk(index, tables, catalog, estimator, oversize=False) -> SchemaChunk:
    tables = tuple(tables)
    rels = _relations_within(catalog, tables)
    probe = SchemaChunk(index, tables, rels, 0, oversize)
    return SchemaChunk(index, tables, rels, estimator(serialize(probe, "full")), oversize)


def split_schema(catalog: SchemaCatalog, budget: int,
                 estimator: TokenEstimator = estimate_tokens,
                 strategy: SplitStrategy | str = SplitStrategy.LENGTH) -> SchemaPartition:
    """Greedily pack tables, in catalog order, into chunks estimated below ``budget``.

    A table that alone reaches the budget gets its own chunk flagged ``oversize``.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    strategy = SplitStrategy(strategy)
    chunks: list[SchemaChunk] = []

    def emit(tables, oversize=False):
        chunks.append(_make_chunk(len(chunks) + 1, tables, catalog, estimator, oversize))

    if strategy is SplitStrategy.PER_TABLE:
        for t in catalog.tables:
            single = _make_chunk(0, [t], catalog, estimator)
            emit([t], oversize=single.token_estimate >= budget)
        return SchemaPartition(tuple(chunks), budget)

    current: list[TableDef] = []
    for table in catalog.tables:
        alone = _make_chunk(0, [table], catalog, estimator)
        if alone.token_estimate >= budget:
            if current:
                emit(current)
                current = []
            logger.warning("table %s (%d tokens) exceeds budget %d; kept whole",
                           table.name, alone.token_estimate, budget)
            emit([table], oversize=True)
            continue
        candidate = current + [table]
        if current and _make_chunk(0, candidate, catalog, estimator).token_estimate >= budget:
            emit(current)
            current = [table]
        else:
            current = candidate
    if current:
        emit(current)
    return SchemaPartition(tuple(chunks), budget)
