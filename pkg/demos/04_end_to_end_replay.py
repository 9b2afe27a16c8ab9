"""Preprocess, run and score the toy benchmark from the command line, offline.

Model replies come from the committed replay cassette, so two runs produce
byte-identical run-records.
"""

import filecmp
import shutil
import tempfile
from pathlib import Path

from avsql.cli import main
from avsql.toy import materialize

cassette = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "toy_cassette.jsonl"
root = Path(tempfile.mkdtemp(prefix="avsql-e2e-"))
materialize(root, cassette)
config = str(root / "config.json")

print("$ avsql preprocess")
main(["preprocess", "--config", config])
print("\n$ avsql run --replay cassette.jsonl")
main(["run", "--config", config, "--replay", str(root / "cassette.jsonl")])
shutil.copytree(root / "runs", root / "runs-first")
print("\n$ avsql run   (again, cassette taken from the config)")
main(["run", "--config", config])
same = all(filecmp.cmp(p, root / "runs" / p.name, shallow=False)
           for p in (root / "runs-first").glob("*.json"))
print(f"\nsecond run byte-identical: {same}")

print("\n$ avsql eval --mode strict --k 1")
main(["eval", "--config", config, "--mode", "strict", "--k", "1"])
print(f"\nrun-records and reports are under {root}")
