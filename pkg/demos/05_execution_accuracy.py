"""Strict versus lenient execution accuracy, and recall over several candidates."""

from avsql.evaluation import lenient_match, recall_at_k, set_quality, strict_match
from avsql.execution import ExecutionResult

gold = ExecutionResult(["title", "loans"], [("Atlas", 7), ("Ember", 5)])
predictions = {
    "exact": ExecutionResult(["title", "loans"], [("Atlas", 7), ("Ember", 5)]),
    "columns swapped": ExecutionResult(["loans", "title"], [(7, "Atlas"), (5, "Ember")]),
    "extra column": ExecutionResult(["title", "loans", "year"],
                                    [("Atlas", 7, 1999), ("Ember", 5, 2004)]),
    "missing column": ExecutionResult(["title"], [("Atlas",), ("Ember",)]),
    "rows reordered": ExecutionResult(["title", "loans"], [("Ember", 5), ("Atlas", 7)]),
}
print(f"{'prediction':<16} strict  lenient  (gold without ORDER BY / with ORDER BY)")
for name, pred in predictions.items():
    loose = (strict_match(pred, gold, False), lenient_match(pred, gold, False))
    ordered = (strict_match(pred, gold, True), lenient_match(pred, gold, True))
    print(f"{name:<16} {loose[0]:>6} {loose[1]:>8}    {ordered[0]} {ordered[1]}")

wrong = ExecutionResult(["title"], [("Quiet",)])
candidates = [wrong, wrong, predictions["extra column"], wrong]
print("\nrecall EX with the right answer third of four candidates:")
for k in (1, 2, 4):
    print(f"  k={k}: strict {recall_at_k(candidates[:k], gold, 'strict', False)}  "
          f"lenient {recall_at_k(candidates[:k], gold, 'lenient', False)}")

p, r = set_quality({"loans", "loans.book_id", "loans.member_id"}, {"loans", "loans.book_id"})
print(f"\nschema filter precision {p:.3f}, recall {r:.3f}")
