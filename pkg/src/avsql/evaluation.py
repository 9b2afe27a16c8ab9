"""Execution accuracy (strict and lenient), schema-filter quality, recall@k and reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .analyzer import SqlSyntaxError, extract_references, has_top_level_order_by, parse
from .catalog import SchemaCatalog
from .execution import EVAL_ROW_CAP, ExecutionLimits, ExecutionResult, is_valid
from .gateway import ledger_document

REL_TOL = 1e-6
DIFFICULTIES = ("easy", "medium", "hard", "extra", "simple", "moderate", "challenging")


# -- cell and row comparison --------------------------------------------------

def _norm(v):
    """Sort key for a cell: nulls, then numbers, then text, then anything else."""
    if v is None:
        return (0, 0)
    if isinstance(v, bool):
        return (1, float(v))
    if isinstance(v, (int, float)):
        f = float(v)
        return (1, f) if not math.isnan(f) else (1, math.inf)
    if isinstance(v, str):
        return (2, v.strip())
    if isinstance(v, bytes):
        return (3, v.hex())
    return (4, str(v))


def cells_equal(a, b) -> bool:
    ka, kb = _norm(a), _norm(b)
    if ka[0] != kb[0]:
        return False
    if ka[0] == 1:
        return math.isclose(ka[1], kb[1], rel_tol=REL_TOL, abs_tol=0.0) or ka[1] == kb[1]
    return ka[1] == kb[1]


def _rows_equal(a: Sequence, b: Sequence) -> bool:
    return len(a) == len(b) and all(cells_equal(x, y) for x, y in zip(a, b))


def _tables_equal(pred_rows, gold_rows, ordered: bool) -> bool:
    if len(pred_rows) != len(gold_rows):
        return False
    if not ordered:
        key = lambda r: tuple(_norm(v) for v in r)  # noqa: E731
        pred_rows, gold_rows = sorted(pred_rows, key=key), sorted(gold_rows, key=key)
    return all(_rows_equal(p, g) for p, g in zip(pred_rows, gold_rows))


def strict_match(predicted: ExecutionResult, gold: ExecutionResult, gold_has_order_by: bool) -> int:
    """1 when content and column order both match the gold result."""
    if predicted is None or gold is None or len(predicted.columns) != len(gold.columns):
        return 0
    return int(_tables_equal(predicted.rows, gold.rows, gold_has_order_by))


def lenient_match(predicted: ExecutionResult, gold: ExecutionResult, gold_has_order_by: bool) -> int:
    """1 when some injective gold-to-predicted column mapping reproduces the gold rows.

    Extra predicted columns are ignored; the argument order matters.
    """
    if predicted is None or gold is None:
        return 0
    g, p = len(gold.columns), len(predicted.columns)
    if g > p or len(gold.rows) != len(predicted.rows):
        return 0
    if g == 0:
        return 1

    def column(rows, j):
        return [r[j] for r in rows]

    def col_match(pj, gj):
        a, b = column(predicted.rows, pj), column(gold.rows, gj)
        return _tables_equal([(x,) for x in a], [(y,) for y in b], gold_has_order_by)

    compatible = [[pj for pj in range(p) if col_match(pj, gj)] for gj in range(g)]
    if any(not c for c in compatible):
        return 0
    order = sorted(range(g), key=lambda gj: len(compatible[gj]))
    mapping = [None] * g

    def search(i, used):
        if i == g:
            projected = [tuple(r[mapping[gj]] for gj in range(g)) for r in predicted.rows]
            return _tables_equal(projected, gold.rows, gold_has_order_by)
        gj = order[i]
        for pj in compatible[gj]:
            if pj in used:
                continue
            mapping[gj] = pj
            if search(i + 1, used | {pj}):
                return True
        return False

    return int(search(0, frozenset()))


def recall_at_k(candidate_results: Sequence, gold: ExecutionResult, mode: str,
                gold_has_order_by: bool) -> int:
    match = {"strict": strict_match, "lenient": lenient_match}[mode]
    return int(any(r is not None and is_valid(r) and match(r, gold, gold_has_order_by)
                   for r in candidate_results))


# -- schema filtering ---------------------------------------------------------

def gold_elements(gold_sql: str, catalog: SchemaCatalog, dialect: str = "sqlite",
                  compressed=None) -> set[str]:
    refs = extract_references(parse(gold_sql, dialect), catalog)
    return _elements(refs.tables, refs.columns, compressed)


def _elements(tables, columns, compressed=None) -> set[str]:
    def canon(t):
        return (compressed.canonical_table(t) if compressed is not None else t).casefold()
    out = {canon(t) for t in tables}
    for c in columns:
        t, _, col = c.rpartition(".")
        out.add(f"{canon(t)}.{col.casefold()}")
    return out


def set_quality(selected: set, gold: set) -> tuple[float, float]:
    hit = len(selected & gold)
    if not selected:
        precision = 1.0 if not gold else 0.0
    else:
        precision = hit / len(selected)
    recall = hit / len(gold) if gold else 1.0
    return precision, recall


def filter_quality(filtered_schema, gold_sql: str, catalog: SchemaCatalog,
                   dialect: str = "sqlite", compressed=None) -> tuple[float, float]:
    """(precision, recall) of selected tables and columns against those the gold SQL reads."""
    if isinstance(filtered_schema, dict):
        tables, columns = filtered_schema.get("tables", []), filtered_schema.get("columns", [])
    else:
        tables, columns = filtered_schema.tables, filtered_schema.columns
    selected = _elements(tables, columns, compressed)
    return set_quality(selected, gold_elements(gold_sql, catalog, dialect, compressed))


# -- benchmark items and outcomes ---------------------------------------------

@dataclass
class BenchmarkItem:
    question_id: str
    db_id: str
    question: str
    gold_sql: str
    evidence: str | None = None
    difficulty: str | None = None
    dialect: str = "sqlite"

    def __post_init__(self):
        self.question_id = str(self.question_id)
        if self.difficulty is not None and self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


def load_items(path: str | Path) -> list[BenchmarkItem]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"benchmark manifest not found: {path}")
    items = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                items.append(BenchmarkItem(**{k: d.get(k) for k in (
                    "question_id", "db_id", "question", "gold_sql", "evidence", "difficulty")
                    if k in d}, dialect=d.get("dialect", "sqlite")))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad benchmark item: {exc}") from exc
    return items


@dataclass
class EvalOutcome:
    question_id: str
    strict_ex: int = 0
    lenient_ex: int = 0
    filter_precision: float | None = None
    filter_recall: float | None = None
    recall_at_k: int | None = None
    difficulty: str | None = None
    note: str | None = None

    def __post_init__(self):
        if self.strict_ex and not self.lenient_ex:
            raise ValueError("strict match without lenient match")


def _candidate_sqls(record: dict, k: int) -> list[str]:
    cands = record.get("candidates") or []
    sqls = [c["iterations"][-1]["sql"] if c.get("iterations") else None for c in cands]
    chosen = next((i for i, c in enumerate(cands) if c.get("executed")), None)
    if chosen is not None and record.get("final_sql"):
        sqls[chosen] = record["final_sql"]
    return sqls[:k]


def evaluate_item(item: BenchmarkItem, record: dict | None, backend,
                  catalog: SchemaCatalog | None = None, k: int | None = None,
                  mode: str = "strict", compressed=None) -> EvalOutcome:
    out = EvalOutcome(item.question_id, difficulty=item.difficulty)
    limits = ExecutionLimits(row_cap=EVAL_ROW_CAP)
    gold = backend.execute(item.gold_sql, limits)
    if not is_valid(gold):
        out.note = f"gold SQL failed: {gold.message}"
        return out
    ordered = has_top_level_order_by(item.gold_sql, item.dialect)
    if record is None:
        out.note = "missing run-record"
        return out
    if record.get("final_sql"):
        pred = backend.execute(record["final_sql"], limits)
        if is_valid(pred):
            out.strict_ex = strict_match(pred, gold, ordered)
            out.lenient_ex = lenient_match(pred, gold, ordered)
        else:
            out.note = f"predicted SQL failed: {pred.message}"
    else:
        out.note = f"no final SQL ({record.get('status')})"
    fs = record.get("filtered_schema")
    if fs is not None and catalog is not None:
        try:
            out.filter_precision, out.filter_recall = filter_quality(
                fs, item.gold_sql, catalog, item.dialect, compressed)
        except SqlSyntaxError as err:
            out.note = f"gold SQL unparseable: {err}"
    if k:
        results = [backend.execute(s, limits) if s else None for s in _candidate_sqls(record, k)]
        out.recall_at_k = recall_at_k(results, gold, mode, ordered)
    return out


# -- reporting ----------------------------------------------------------------

def _pct(xs: list) -> float:
    return round(100.0 * sum(xs) / len(xs), 2) if xs else 0.0


def build_report(outcomes: list[EvalOutcome], records: dict[str, dict] | None = None,
                 items: Iterable[BenchmarkItem] | None = None, mode: str = "strict",
                 k: int | None = None) -> dict:
    records = records or {}
    item_ids = {it.question_id for it in items} if items is not None else \
        {o.question_id for o in outcomes}
    key = "strict_ex" if mode == "strict" else "lenient_ex"
    buckets: dict[str, list[int]] = {}
    for o in outcomes:
        buckets.setdefault(o.difficulty or "all", []).append(getattr(o, key))
    prec = [o.filter_precision for o in outcomes if o.filter_precision is not None]
    rec = [o.filter_recall for o in outcomes if o.filter_recall is not None]
    roles: dict[str, dict] = {}
    for r in records.values():
        for role, row in ((r.get("ledger") or {}).get("roles") or {}).items():
            acc = roles.setdefault(role, {"calls": 0, "input_tokens": 0, "output_tokens": 0,
                                          "wall_ms": 0})
            for f in acc:
                acc[f] += row.get(f, 0)
    doc = {
        "mode": mode,
        "items": len(outcomes),
        "overall_ex": _pct([getattr(o, key) for o in outcomes]),
        "strict_ex": _pct([o.strict_ex for o in outcomes]),
        "lenient_ex": _pct([o.lenient_ex for o in outcomes]),
        "by_difficulty": {d: {"n": len(v), "ex": _pct(v)} for d, v in sorted(buckets.items())},
        "filter_precision": round(sum(prec) / len(prec), 4) if prec else None,
        "filter_recall": round(sum(rec) / len(rec), 4) if rec else None,
        "missing_records": sorted(o.question_id for o in outcomes if o.note == "missing run-record"),
        "unjoined_records": sorted(q for q in records if q not in item_ids),
        "ledger": ledger_document(roles) if roles else None,
        "outcomes": [asdict(o) for o in outcomes],
    }
    if k:
        doc["k"] = k
        doc["recall_ex"] = _pct([o.recall_at_k or 0 for o in outcomes])
    return doc


def render_report(doc: dict) -> str:
    """Aligned plain-text rendering of a report document."""
    lines = [f"mode: {doc['mode']}   items: {doc['items']}",
             f"overall EX: {doc['overall_ex']:.2f}"]
    if "recall_ex" in doc:
        lines.append(f"recall EX@{doc['k']}: {doc['recall_ex']:.2f}")
    rows = [("difficulty", "n", "EX")] + [(d, str(b["n"]), f"{b['ex']:.2f}")
                                          for d, b in doc["by_difficulty"].items()]
    lines += ["", *_table(rows)]
    if doc["filter_precision"] is not None:
        lines += ["", f"filter precision: {doc['filter_precision']:.4f}   "
                      f"filter recall: {doc['filter_recall']:.4f}"]
    if doc.get("ledger"):
        rows = [("agent", "calls", "in_tokens", "out_tokens", "token_%", "wall_%")]
        for role, r in doc["ledger"]["roles"].items():
            rows.append((role, str(r["calls"]), str(r["input_tokens"]), str(r["output_tokens"]),
                         f"{r['token_pct']:.2f}", f"{r['wall_pct']:.2f}"))
        lines += ["", *_table(rows)]
    if doc["missing_records"]:
        lines += ["", "missing run-records: " + ", ".join(doc["missing_records"])]
    if doc["unjoined_records"]:
        lines += ["", "run-records without a benchmark item: " + ", ".join(doc["unjoined_records"])]
    return "\n".join(lines) + "\n"


def _table(rows) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for n, r in enumerate(rows):
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                             for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return out
