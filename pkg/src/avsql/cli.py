"""Command-line entry point: preprocess, compress, split, index, run, eval, report."""

from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import sys
from pathlib import Path

from .catalog import CatalogError, ingest_from_database, load_manifest
from .compress import compress_schema
from .config import ConfigError, RunConfig, build_gateway, load_config
from .evaluation import build_report, evaluate_item, load_items, render_report
from .execution import SqliteBackend
from .gateway import GatewayError
from .pipeline import Workspace, run_pipeline
from .split import split_schema
from .values import ValueIndex, build_index

logger = logging.getLogger("avsql")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

# flag name -> RunConfig field
_CONFIG_FLAGS = {
    "t_max": int, "tau_edit": float, "tau_semantic": float, "token_budget": int,
    "temperature": float, "parallelism": int, "dialect": str, "row_cap": int,
    "timeout_ms": int, "retrieval_limit": int, "databases_dir": str, "artifacts_dir": str,
    "manifest": str, "cassette": str, "run_records_dir": str, "reports_dir": str,
    "base_url": str,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--sequential", action="store_true", default=None,
                   help="process schema chunks one at a time")
    p.add_argument("--no-compress", dest="compress", action="store_false", default=None)


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in list(_CONFIG_FLAGS) + ["sequential", "compress"]}
    if getattr(args, "k", None) is not None:
        overrides["k_candidates"] = args.k
    return load_config(args.config, overrides)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _catalog_from(args):
    if getattr(args, "db_path", None):
        return ingest_from_database(args.db_path, sample_rows=args.sample_rows)
    if getattr(args, "schema", None):
        return load_manifest(args.schema)
    raise ConfigError("give --db-path or --schema")


# -- subcommands --------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg = _config(args)
    ws = Workspace(cfg.databases_dir, cfg.artifacts_dir)
    db_ids = args.db or sorted({p.stem for p in Path(cfg.databases_dir).glob("*.sqlite")}
                               | {p.stem for p in Path(cfg.databases_dir).glob("*.db")})
    if not db_ids:
        logger.warning("no databases under %s", cfg.databases_dir)
        return EXIT_OK
    failures = 0
    for db_id in db_ids:
        try:
            status = ws.preprocess(db_id, cfg.pipeline(), force=args.force)
            print(f"{db_id}: {status['status']}")
        except (CatalogError, FileNotFoundError, OSError, ValueError) as err:
            failures += 1
            print(f"{db_id}: FAILED {err}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_compress(args) -> int:
    compressed = compress_schema(_catalog_from(args))
    text = json.dumps(compressed.to_json(), indent=2, default=str) + "\n"
    if args.out:
        _write(Path(args.out), text)
    print(f"{len(compressed.original_tables)} tables -> {len(compressed.catalog.tables)} "
          f"({len(compressed.table_clusters)} table clusters, "
          f"{len(compressed.column_clusters)} column clusters)")
    return EXIT_OK


def cmd_split(args) -> int:
    catalog = _catalog_from(args)
    if args.compress:
        catalog = compress_schema(catalog).catalog
    part = split_schema(catalog, args.budget, strategy=args.strategy)
    if args.out:
        _write(Path(args.out), json.dumps(part.to_json(), indent=2) + "\n")
    for c in part.chunks:
        flag = " (oversize)" if c.oversize else ""
        print(f"chunk {c.index}: {c.token_estimate} tokens{flag}: {', '.join(c.table_names)}")
    return EXIT_OK


def cmd_index(args) -> int:
    if args.index_cmd == "build":
        catalog = ingest_from_database(args.db_path)
        index = build_index(args.db_path, catalog)
        index.save(args.out)
        print(f"indexed {len(index)} values into {args.out}")
        return EXIT_OK
    index = ValueIndex.load(args.index)
    hits = index.retrieve(args.literal, args.tau_edit, args.tau_semantic, args.limit)
    for h in hits:
        print(f"{h.entry.table}.{h.entry.column} = {h.entry.value!r}  "
              f"edit={h.edit_similarity:.3f} semantic={h.semantic_similarity:.3f}")
    if not hits:
        print("no values above thresholds")
    return EXIT_OK


def _select(items, selector: str | None):
    if not selector:
        return items
    pats = [s.strip() for s in selector.split(",") if s.strip()]
    return [it for it in items if any(fnmatch.fnmatch(it.question_id, p) for p in pats)]


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.record and not cfg.base_url:
        raise ConfigError("--record needs base_url (flag or config) for the live endpoint")
    if not cfg.manifest:
        raise ConfigError("run needs a benchmark manifest (--manifest or manifest =)")
    items = _select(load_items(cfg.manifest), args.questions)
    if not items:
        logger.warning("question selector %r matched nothing", args.questions)
        return EXIT_OK
    gateway = build_gateway(cfg, replay=args.replay, record=args.record)
    ws = Workspace(cfg.databases_dir, cfg.artifacts_dir)
    pipe = cfg.pipeline()
    failed = 0
    for it in items:
        run = run_pipeline(it.question, it.evidence, it.db_id, pipe, ws, gateway.fork(),
                           it.question_id, cfg.run_records_dir, cfg.snapshot())
        print(f"{it.question_id}: {run.status}" + (f" ({run.stage})" if run.stage else ""))
        failed += run.status != "ok"
    return EXIT_PARTIAL if failed else EXIT_OK


def _evaluate(cfg: RunConfig, mode: str, k: int | None):
    if not cfg.manifest:
        raise ConfigError("evaluation needs a benchmark manifest (--manifest or manifest =)")
    items = load_items(cfg.manifest)
    records = {}
    for p in sorted(Path(cfg.run_records_dir).glob("*.json")):
        rec = json.loads(p.read_text(encoding="utf-8"))
        records[str(rec.get("question_id", p.stem))] = rec
    ws = Workspace(cfg.databases_dir, cfg.artifacts_dir)
    backends, catalogs, outcomes = {}, {}, []
    for it in items:
        if it.db_id not in backends:
            path = ws.db_path(it.db_id)
            backends[it.db_id] = SqliteBackend(path)
            arts = ws.load(it.db_id, cfg.pipeline())
            catalogs[it.db_id] = (arts.catalog, arts.compressed)
        catalog, compressed = catalogs[it.db_id]
        outcomes.append(evaluate_item(it, records.get(it.question_id), backends[it.db_id],
                                      catalog, k, mode, compressed))
    return build_report(outcomes, records, items, mode, k)


def _emit(cfg: RunConfig, doc: dict, name: str) -> None:
    out = Path(cfg.reports_dir)
    _write(out / f"{name}.json", json.dumps(doc, indent=2) + "\n")
    text = render_report(doc)
    _write(out / f"{name}.txt", text)
    print(text, end="")


def cmd_eval(args) -> int:
    cfg = _config(args)
    doc = _evaluate(cfg, args.mode, args.k)
    _emit(cfg, doc, f"eval_{args.mode}" + (f"_k{args.k}" if args.k else ""))
    return EXIT_PARTIAL if doc["missing_records"] else EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    doc = _evaluate(cfg, args.mode, None)
    _emit(cfg, doc, "report")
    return EXIT_PARTIAL if doc["missing_records"] else EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avsql", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("preprocess", help="build catalogs, partitions and value indexes")
    _add_config_flags(p)
    p.add_argument("--db", action="append", help="database id (repeatable); default all")
    p.add_argument("--force", action="store_true", help="rebuild even if up-to-date")
    p.set_defaults(fn=cmd_preprocess)

    for name, fn, help_ in (("compress", cmd_compress, "cluster near-duplicate tables/columns"),
                            ("split", cmd_split, "partition a schema under a token budget")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--db-path")
        p.add_argument("--schema", help="schema manifest JSON instead of a database")
        p.add_argument("--sample-rows", type=int, default=0)
        p.add_argument("--out")
        p.set_defaults(fn=fn)
        if name == "split":
            p.add_argument("--budget", type=int, required=True)
            p.add_argument("--strategy", choices=("length", "per_table"), default="length")
            p.add_argument("--compress", action="store_true", help="compress before splitting")

    p = sub.add_parser("index", help="build or query a value index")
    isub = p.add_subparsers(dest="index_cmd", required=True)
    b = isub.add_parser("build")
    b.add_argument("--db-path", required=True)
    b.add_argument("--out", required=True)
    q = isub.add_parser("lookup")
    q.add_argument("--index", required=True)
    q.add_argument("--literal", required=True)
    q.add_argument("--tau-edit", type=float, default=0.5)
    q.add_argument("--tau-semantic", type=float, default=0.5)
    q.add_argument("--limit", type=int, default=5)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("run", help="run the pipeline over benchmark questions")
    _add_config_flags(p)
    p.add_argument("--replay", help="cassette to replay model replies from")
    p.add_argument("--record", help="cassette to append live exchanges to")
    p.add_argument("--questions", help="comma-separated question ids or glob patterns")
    p.add_argument("--k", type=int, default=None, help="SQL candidates per question")
    p.set_defaults(fn=cmd_run)

    for name, fn in (("eval", cmd_eval), ("report", cmd_report)):
        p = sub.add_parser(name, help="score run-records against gold SQL")
        _add_config_flags(p)
        p.add_argument("--mode", choices=("strict", "lenient"), default="strict")
        if name == "eval":
            p.add_argument("--k", type=int, default=None, help="also report recall EX at k")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CatalogError, GatewayError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(err, FileNotFoundError) else EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
