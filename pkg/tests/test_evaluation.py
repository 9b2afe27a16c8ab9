import itertools
import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from avsql.evaluation import (BenchmarkItem, EvalOutcome, build_report, cells_equal,
                              evaluate_item, filter_quality, lenient_match, load_items,
                              recall_at_k, render_report, set_quality, strict_match)
from avsql.execution import ExecutionResult, SqliteBackend
from avsql.pipeline import FilteredSchema
from helpers import cards_catalog


def R(columns, rows):
    return ExecutionResult(list(columns), [tuple(r) for r in rows])


GOLD = R(["name", "n"], [("a", 1), ("b", 2)])


def test_strict_identical():
    assert strict_match(GOLD, GOLD, False) == 1


def test_strict_rejects_swapped_columns():
    swapped = R(["n", "name"], [(1, "a"), (2, "b")])
    assert strict_match(swapped, GOLD, False) == 0
    assert lenient_match(swapped, GOLD, False) == 1


def test_strict_rejects_extra_column_lenient_accepts():
    extra = R(["name", "n", "x"], [("a", 1, 9), ("b", 2, 9)])
    assert strict_match(extra, GOLD, False) == 0
    assert lenient_match(extra, GOLD, False) == 1


def test_lenient_rejects_missing_column():
    assert lenient_match(R(["name"], [("a",), ("b",)]), GOLD, False) == 0


def test_lenient_is_not_symmetric():
    extra = R(["name", "n", "x"], [("a", 1, 9), ("b", 2, 9)])
    assert lenient_match(extra, GOLD, False) == 1
    assert lenient_match(GOLD, extra, False) == 0


def test_order_matters_only_with_gold_order_by():
    rev = R(["name", "n"], [("b", 2), ("a", 1)])
    assert strict_match(rev, GOLD, False) == 1
    assert strict_match(rev, GOLD, True) == 0
    assert lenient_match(rev, GOLD, True) == 0


def test_joint_rows_not_per_column():
    scrambled = R(["name", "n"], [("a", 2), ("b", 1)])
    assert lenient_match(scrambled, GOLD, False) == 0


def test_duplicate_gold_columns_need_distinct_predicted_columns():
    gold = R(["a", "a2"], [(1, 1)])
    assert lenient_match(R(["a"], [(1,)]), gold, False) == 0
    assert lenient_match(R(["x", "y"], [(1, 1)]), gold, False) == 1


def test_cell_normalization():
    assert cells_equal(1.0, 1.0000000001) and cells_equal(3, 3.0)
    assert not cells_equal(1.0, 1.001)
    assert cells_equal(" a ", "a") and not cells_equal("a", "A")
    assert cells_equal(None, None) and not cells_equal(None, 0) and not cells_equal("1", 1)


# -- brute-force oracles ------------------------------------------------------------

def _bag(rows):
    return Counter(tuple(rows))


def _lenient_oracle(pred, gold, ordered):
    g = len(gold.columns)
    if len(pred.rows) != len(gold.rows):
        return 0
    for mapping in itertools.permutations(range(len(pred.columns)), g):
        proj = [tuple(r[j] for j in mapping) for r in pred.rows]
        if (proj == list(gold.rows)) if ordered else (_bag(proj) == _bag(gold.rows)):
            return 1
    return 0


def _strict_oracle(pred, gold, ordered):
    if len(pred.columns) != len(gold.columns) or len(pred.rows) != len(gold.rows):
        return 0
    return int(list(pred.rows) == list(gold.rows) if ordered else _bag(pred.rows) == _bag(gold.rows))


@st.composite
def result_pairs(draw):
    cell = st.one_of(st.none(), st.integers(0, 3), st.sampled_from(["x", "y"]))
    g = draw(st.integers(1, 3))
    n = draw(st.integers(0, 4))
    gold = R([f"g{i}" for i in range(g)],
             [tuple(draw(cell) for _ in range(g)) for _ in range(n)])
    if draw(st.booleans()):
        perm = draw(st.permutations(range(g)))
        extra = draw(st.integers(0, 2))
        rows = [tuple(r[j] for j in perm) + tuple(draw(cell) for _ in range(extra))
                for r in gold.rows]
        if draw(st.booleans()):
            rows = draw(st.permutations(rows))
        pred = R([f"p{i}" for i in range(g + extra)], rows)
    else:
        p = draw(st.integers(1, 4))
        pred = R([f"p{i}" for i in range(p)],
                 [tuple(draw(cell) for _ in range(p)) for _ in range(draw(st.integers(0, 4)))])
    return pred, gold


@settings(max_examples=400, deadline=None)
@given(result_pairs(), st.booleans())
def test_matchers_agree_with_brute_force(pair, ordered):
    pred, gold = pair
    assert lenient_match(pred, gold, ordered) == _lenient_oracle(pred, gold, ordered)
    assert strict_match(pred, gold, ordered) == _strict_oracle(pred, gold, ordered)
    if strict_match(pred, gold, ordered):
        assert lenient_match(pred, gold, ordered)
    assert strict_match(gold, gold, ordered) == 1


def test_recall_at_k():
    wrong = R(["x"], [(0,)])
    assert recall_at_k([wrong, GOLD, wrong], GOLD, "strict", False) == 1
    assert recall_at_k([GOLD], GOLD, "strict", False) == strict_match(GOLD, GOLD, False)
    assert recall_at_k([wrong, None], GOLD, "lenient", False) == 0


# -- schema filter -------------------------------------------------------------------

def test_set_quality_definitions():
    assert set_quality({"t.a", "t.b", "t"}, {"t.a", "t"}) == (pytest.approx(2 / 3), 1.0)
    assert set_quality({"t"}, {"t"}) == (1.0, 1.0)
    assert set_quality({"u"}, {"t"}) == (0.0, 0.0)
    assert set_quality(set(), set()) == (1.0, 1.0)
    assert set_quality(set(), {"t"}) == (0.0, 0.0)


_ELEMS = st.sets(st.sampled_from(["t", "u", "t.a", "t.b", "u.c"]))


@given(_ELEMS, _ELEMS)
def test_set_quality_brute_force(s, g):
    p, r = set_quality(s, g)
    hit = sum(1 for x in s if x in g)
    assert p == (hit / len(s) if s else (1.0 if not g else 0.0))
    assert r == (hit / len(g) if g else 1.0)


def test_filter_quality_against_gold_sql():
    fs = FilteredSchema({"sets", "cards"}, {"sets.name", "sets.code", "cards.name"})
    gold = "SELECT c.name FROM cards c JOIN sets s ON c.setCode = s.code WHERE s.name = 'Nyx'"
    # gold reads cards, sets, cards.name, cards.setCode, sets.code, sets.name
    p, r = filter_quality(fs, gold, cards_catalog())
    assert p == pytest.approx(5 / 5) and r == pytest.approx(5 / 6)
    p, r = filter_quality({"tables": ["legalities"], "columns": []}, gold, cards_catalog())
    assert (p, r) == (0.0, 0.0)


# -- items, evaluate, report ---------------------------------------------------------

def test_load_items(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"question_id": 1, "db_id": "cards", "question": "q",
                                "gold_sql": "SELECT 1", "difficulty": "easy"}) + "\n\n")
    items = load_items(path)
    assert items[0].question_id == "1" and items[0].difficulty == "easy"
    path.write_text(json.dumps({"question_id": 1, "db_id": "c", "question": "q",
                                "gold_sql": "SELECT 1", "difficulty": "trivial"}))
    with pytest.raises(ValueError, match="difficulty"):
        load_items(path)
    with pytest.raises(FileNotFoundError):
        load_items(tmp_path / "none.jsonl")


def test_outcome_invariant():
    with pytest.raises(ValueError):
        EvalOutcome("q", strict_ex=1, lenient_ex=0)


def test_evaluate_item_with_candidates(cards_db):
    backend = SqliteBackend(cards_db)
    item = BenchmarkItem("q1", "cards", "Nyx cards", "SELECT name FROM cards WHERE setCode = 'NYX'")
    record = {
        "final_sql": "SELECT name, setCode FROM cards WHERE setCode = 'NYX'",
        "filtered_schema": {"tables": ["cards"], "columns": ["cards.name", "cards.setCode"]},
        "candidates": [
            {"executed": False, "iterations": [{"sql": "SELECT nope FROM cards"}]},
            {"executed": True, "iterations": [{"sql": "SELECT uuid FROM cards"}]},
            {"executed": True, "iterations": [{"sql": "SELECT name FROM cards WHERE setCode = 'NYX'"}]},
        ],
    }
    out = evaluate_item(item, record, backend, cards_catalog(), k=3)
    assert (out.strict_ex, out.lenient_ex) == (0, 1)
    assert out.recall_at_k == 1
    assert (out.filter_precision, out.filter_recall) == (1.0, 1.0)
    out1 = evaluate_item(item, record, backend, cards_catalog(), k=2, mode="strict")
    assert out1.recall_at_k == 0
    missing = evaluate_item(item, None, backend)
    assert missing.note == "missing run-record" and missing.strict_ex == 0


def test_report_overall_and_buckets():
    outs = [EvalOutcome("a", 1, 1, difficulty=None), EvalOutcome("b", 0, 0, difficulty=None)]
    doc = build_report(outs)
    assert doc["overall_ex"] == 50.0 and list(doc["by_difficulty"]) == ["all"]
    assert "overall EX: 50.00" in render_report(doc)


def test_report_ledger_and_unjoined():
    ledgers = [{"planner": (10, 5, 3), "revisor": (20, 1, 0)}, {"planner": (7, 0, 9)}]
    records = {}
    for i, led in enumerate(ledgers):
        records[f"q{i}"] = {"ledger": {"roles": {r: {"calls": 1, "input_tokens": a,
                                                     "output_tokens": b, "wall_ms": w}
                                                 for r, (a, b, w) in led.items()}}}
    records["stray"] = {}
    items = [BenchmarkItem(f"q{i}", "d", "q", "SELECT 1", difficulty="easy") for i in range(2)]
    outs = [EvalOutcome("q0", 1, 1, difficulty="easy"), EvalOutcome("q1", 0, 1, difficulty="easy")]
    doc = build_report(outs, records, items, mode="lenient")
    assert doc["overall_ex"] == 100.0 and doc["unjoined_records"] == ["stray"]
    roles = doc["ledger"]["roles"]
    total = 10 + 5 + 20 + 1 + 7
    assert roles["planner"]["token_pct"] == pytest.approx(100 * 22 / total)
    assert abs(sum(r["token_pct"] for r in roles.values()) - 100) <= 0.1
    assert abs(sum(r["wall_pct"] for r in roles.values()) - 100) <= 0.1
    text = render_report(doc)
    assert "stray" in text and "planner" in text
