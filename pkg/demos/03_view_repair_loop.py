"""Follow one question through the per-chunk view loop, repair by repair.

The toy responder is scripted: its first view for the authors chunk reads a
column it did not declare in its selection. The consistency check sends that
back, and the stored value 'USA' found by retrieval rides along in the repair
prompt. The SQL stage then shows one execution-error repair.
"""

import tempfile
from pathlib import Path

from avsql.config import from_dict
from avsql.gateway import FunctionBackend, Gateway, Route
from avsql.pipeline import Workspace, run_pipeline
from avsql.toy import TOY_MODEL, materialize, scripted_reply, toy_items

root = Path(tempfile.mkdtemp(prefix="avsql-demo-"))
cfg = from_dict(materialize(root))
gateway = Gateway(default=Route(FunctionBackend(scripted_reply, "toy"), TOY_MODEL))
item = toy_items()[0]
print(f"question: {item.question}\n")

run = run_pipeline(item.question, item.evidence, item.db_id, cfg.pipeline(),
                   Workspace(cfg.databases_dir, cfg.artifacts_dir), gateway, item.question_id)

for outcome in run.chunk_outcomes:
    print(f"chunk {outcome.chunk_index}: {outcome.status} after {outcome.iterations_used} "
          f"iteration(s)")
    for n, attempt in enumerate(outcome.attempts, 1):
        if attempt.get("irrelevant"):
            print(f"  attempt {n}: no view, chunk judged irrelevant")
            continue
        problems = [v["detail"] for v in attempt.get("consistency", {}).get("violations", [])]
        problems += [attempt["error"]] if attempt.get("error") else []
        print(f"  attempt {n}: " + ("; ".join(problems) if problems else "valid"))
    for cand in outcome.retrieved_values:
        print(f"  retrieved {cand.entry.table}.{cand.entry.column} = {cand.entry.value!r}")

print("\nfiltered schema:", sorted(run.filtered_schema.tables), sorted(run.filtered_schema.columns))
print("\nSQL attempts:")
for it in run.sql_iterations:
    status = "ok" if it["outcome"]["ok"] else it["outcome"]["message"]
    print(f"  {it['sql']!r}\n    -> {status}")
print(f"\nfinal SQL: {run.final_sql}")
print(f"rows: {run.final_result.rows}")
