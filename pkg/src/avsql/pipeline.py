"""Chunk-level view generation with repair, then plan, generate, repair and revise."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agents import (AgentView, QueryPlan, RewrittenQuestion, SelectionRecord, UnparseableReply,
                     ViewFeedback, generate_sql, generate_view, plan_query, revise_sql,
                     rewrite_question)
from .analyzer import (ReferenceSet, SqlSyntaxError, extract_literals, extract_references,
                       parse)
from .catalog import SchemaCatalog, TableDef, ingest_from_database, load_manifest, \
    save_manifest, serialize
from .compress import CompressedCatalog, compress_schema
from .execution import ExecutionLimits, ExecutionResult, SqliteBackend, is_valid
from .gateway import Gateway, GatewayError
from .split import SchemaPartition, split_schema
from .values import ValueIndex, build_index

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    t_max: int = 5
    tau_edit: float = 0.5
    tau_semantic: float = 0.5
    retrieval_limit: int = 5
    row_cap: int = 100
    timeout_ms: int = 30_000
    parallelism: int = 4
    sequential: bool = False
    dialect: str = "sqlite"
    k_candidates: int = 1
    token_budget: int = 10_000
    compress: bool = True

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")
        if not (0 <= self.tau_edit <= 1 and 0 <= self.tau_semantic <= 1):
            raise ValueError("similarity thresholds must lie in [0, 1]")
        if self.k_candidates < 1:
            raise ValueError("k_candidates must be at least 1")
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")

    @property
    def limits(self) -> ExecutionLimits:
        return ExecutionLimits(self.row_cap, self.timeout_ms)


class PipelineAborted(RuntimeError):
    def __init__(self, stage: str, cause: Exception, partial=None):
        super().__init__(f"{stage} aborted: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial


def outcome_json(outcome, max_rows: int | None = 10) -> dict:
    if is_valid(outcome):
        return {"ok": True, **outcome.to_json(max_rows)}
    return {"ok": False, **outcome.to_json()}


# -- consistency --------------------------------------------------------------

@dataclass
class ConsistencyVerdict:
    violations: list[dict] = field(default_factory=list)  # {"rule", "detail"}

    @property
    def consistent(self) -> bool:
        return not self.violations

    def message(self) -> str:
        return "\n".join(f"rule {v['rule']}: {v['detail']}" for v in self.violations)

    def to_json(self) -> dict:
        return {"consistent": self.consistent, "violations": list(self.violations)}


def _canon(name: str, compressed: CompressedCatalog | None) -> str:
    if compressed is not None:
        name = compressed.canonical_table(name)
    return name.casefold()


def _canon_col(qualified: str, compressed) -> str:
    t, _, c = qualified.rpartition(".")
    return f"{_canon(t, compressed)}.{c.casefold()}"


def check_consistency(view: AgentView | None, selection: SelectionRecord,
                      references: ReferenceSet, compressed: CompressedCatalog | None = None
                      ) -> ConsistencyVerdict:
    """Compare a view's actual references with its declared selection.

    Rule 1: a view exists but nothing is selected. Rule 2: a view exists but no
    column is selected. Rule 3: a table or column the view reads is not selected.
    Selecting more than the view reads is fine.
    """
    verdict = ConsistencyVerdict()
    has_view = view is not None and not view.empty
    if not has_view:
        return verdict
    if selection.empty:
        verdict.violations.append({"rule": 1, "detail": "a view was generated but the selection "
                                   "is empty; either select what the view uses or return no view"})
    if not selection.columns:
        verdict.violations.append({"rule": 2, "detail": "the selection must include at least one "
                                   "column used by the view"})
    sel_tables = {_canon(t, compressed) for t in selection.tables}
    sel_cols = {_canon_col(c, compressed) for c in selection.columns}
    for t in sorted(references.tables, key=str.casefold):
        if _canon(t, compressed) not in sel_tables:
            verdict.violations.append({"rule": 3, "detail": f"table {t} is used by the view "
                                       "but missing from the selection"})
    for c in sorted(references.columns, key=str.casefold):
        if _canon_col(c, compressed) not in sel_cols:
            verdict.violations.append({"rule": 3, "detail": f"column {c} is used by the view "
                                       "but missing from the selection"})
    return verdict


def selection_outside_chunk(selection: SelectionRecord, chunk) -> list[str]:
    tables = {t.name.casefold(): t for t in chunk.tables}
    errors = []
    for t in sorted(selection.tables, key=str.casefold):
        if t.casefold() not in tables:
            errors.append(f"selected table {t} is not in this schema slice")
    for c in sorted(selection.columns, key=str.casefold):
        t, _, col = c.rpartition(".")
        tdef = tables.get(t.casefold())
        if tdef is not None and tdef.column(col) is None:
            errors.append(f"selected column {c} does not exist")
    return errors


# -- view generation (per chunk) ----------------------------------------------

@dataclass
class ChunkOutcome:
    chunk_index: int
    status: str  # accepted | rejected_after_Tmax | irrelevant
    view: AgentView | None
    selection: SelectionRecord | None
    iterations_used: int
    retrieved_values: list = field(default_factory=list)
    attempts: list[dict] = field(default_factory=list)
    references: ReferenceSet | None = None

    def to_json(self) -> dict:
        return {
            "chunk_index": self.chunk_index, "status": self.status,
            "iterations_used": self.iterations_used,
            "view": self.view.to_json() if self.view is not None else None,
            "selection": self.selection.to_json() if self.selection is not None else None,
            "references": self.references.to_json() if self.references is not None else None,
            "retrieved_values": [c.to_json() for c in self.retrieved_values],
            "attempts": self.attempts,
        }


@dataclass
class FilteredSchema:
    tables: set[str] = field(default_factory=set)
    columns: set[str] = field(default_factory=set)
    source: dict[str, list[int]] = field(default_factory=dict)

    def covers(self, refs: ReferenceSet, compressed=None) -> bool:
        tables = {_canon(t, compressed) for t in self.tables}
        cols = {_canon_col(c, compressed) for c in self.columns}
        return all(_canon(t, compressed) in tables for t in refs.tables) and \
            all(_canon_col(c, compressed) in cols for c in refs.columns)

    def render(self, catalog: SchemaCatalog) -> str:
        """Selected tables with their selected columns (all columns if none selected)."""
        by_table: dict[str, set[str]] = {}
        for c in self.columns:
            t, _, col = c.rpartition(".")
            by_table.setdefault(t.casefold(), set()).add(col.casefold())
        tables = []
        for t in catalog.tables:
            if t.name not in self.tables and t.name.casefold() not in \
                    {x.casefold() for x in self.tables}:
                continue
            keep = by_table.get(t.name.casefold())
            cols = t.columns if not keep else tuple(c for c in t.columns
                                                    if c.name.casefold() in keep)
            pk = tuple(k for k in t.primary_key if any(c.name == k for c in cols))
            tables.append(TableDef(t.name, cols or t.columns, t.description, (), pk))
        sub = SchemaCatalog(catalog.db_id, tuple(tables), ())
        rels = [r for r in catalog.relations
                if sub.has_column(r.child_table, r.child_column)
                and sub.has_column(r.parent_table, r.parent_column)]
        return serialize(SchemaCatalog(catalog.db_id, tuple(tables), tuple(rels)))

    def to_json(self) -> dict:
        return {"tables": sorted(self.tables), "columns": sorted(self.columns),
                "source": {k: self.source[k] for k in sorted(self.source)}}


def _retrieve(view: AgentView, value_index, config: PipelineConfig, found: dict) -> None:
    if value_index is None:
        return
    literals = []
    for i in range(1, len(view.ctes) + 1):
        try:
            literals.extend(extract_literals(parse(view.program_sql(i), config.dialect)))
        except SqlSyntaxError:
            continue
    for lit in dict.fromkeys(literals):
        query = lit.strip("%_ ")
        if not query:
            continue
        for cand in value_index.retrieve(query, config.tau_edit, config.tau_semantic,
                                         config.retrieval_limit):
            key = (cand.entry.table, cand.entry.column, cand.entry.value)
            found.setdefault(key, cand)


def _execute_view(view: AgentView, backend, config: PipelineConfig) -> str | None:
    """Run each CTE prefix; return the first error message or None."""
    for raw in view.raw_blocks:
        try:
            parse(raw, config.dialect)
        except SqlSyntaxError as err:
            engine = backend.execute(raw, config.limits)
            msg = str(err)
            if not is_valid(engine):
                msg += f"\nengine: {engine.message}"
            return msg
    last = None
    for i, cte in enumerate(view.ctes, 1):
        outcome = backend.execute(view.program_sql(i), config.limits)
        if not is_valid(outcome):
            return f"CTE {cte['name']}: {outcome.kind} error: {outcome.message}"
        last = outcome
    if last is not None:
        view.sample_result = ExecutionResult(last.columns, last.rows[:10], last.row_cap_hit, 0)
    return None


def run_chunk(rewritten: RewrittenQuestion, chunk, backend, value_index, config: PipelineConfig,
              gateway: Gateway, catalog: SchemaCatalog,
              compressed: CompressedCatalog | None = None) -> ChunkOutcome:
    found: dict = {}
    attempts = []

    def generate(feedback):
        try:
            view, sel, reply = generate_view(rewritten, chunk, feedback, gateway, config.dialect)
            return view, sel, reply, None
        except UnparseableReply as err:
            return None, None, getattr(err, "reply", None), str(err)

    view, sel, reply, format_error = generate(None)
    t = 0
    valid = False
    status = "rejected_after_Tmax"
    refs = None
    while t < config.t_max and not valid:
        t += 1
        error = consistency = None
        if format_error is not None:
            error = f"reply format error: {format_error}"
            attempts.append({"format_error": format_error})
        elif view is None or view.empty:
            # nothing generated: consistent by rule 1, contributes only its selection
            status, valid = "irrelevant", True
            attempts.append({"irrelevant": True})
            break
        else:
            _retrieve(view, value_index, config, found)
            error = _execute_view(view, backend, config)
            refs = None
            if view.ctes:
                try:
                    refs = extract_references(parse(view.program_sql(), config.dialect), catalog)
                except SqlSyntaxError as err:
                    error = error or str(err)
            verdict = check_consistency(view, sel, refs or ReferenceSet(), compressed)
            outside = selection_outside_chunk(sel, chunk)
            msgs = [verdict.message()] if not verdict.consistent else []
            msgs += outside
            consistency = "\n".join(msgs) or None
            valid = error is None and verdict.consistent and not outside
            attempts.append({"error": error, "consistency": verdict.to_json(),
                             "selection_errors": outside})
            if valid:
                status = "accepted"
                break
        if t >= config.t_max:
            break
        feedback = ViewFeedback(reply, error, consistency,
                                [found[k] for k in sorted(found)])
        view, sel, reply, format_error = generate(feedback)

    retrieved = [found[k] for k in sorted(found)]
    return ChunkOutcome(chunk.index, status, view, sel, t, retrieved, attempts, refs)


def aggregate(outcomes: list[ChunkOutcome]) -> tuple[list[AgentView], FilteredSchema]:
    views, fs = [], FilteredSchema()
    for o in sorted(outcomes, key=lambda o: o.chunk_index):
        if o.status == "rejected_after_Tmax":
            continue
        if o.status == "accepted" and o.view is not None:
            views.append(o.view)
        if o.selection is None:
            continue
        for t in o.selection.tables:
            fs.tables.add(t)
            fs.source.setdefault(t, []).append(o.chunk_index)
        for c in o.selection.columns:
            fs.columns.add(c)
            fs.source.setdefault(c, []).append(o.chunk_index)
    return views, fs


def run_view_generation(rewritten: RewrittenQuestion, partition: SchemaPartition, backend,
                        value_index, config: PipelineConfig, gateway: Gateway,
                        catalog: SchemaCatalog, compressed: CompressedCatalog | None = None):
    """Returns (aggregated views, filtered schema, per-chunk outcomes)."""
    workers = 1 if config.sequential else max(1, config.parallelism)
    outcomes: list[ChunkOutcome] = []
    failure = None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chunk, rewritten, chunk, backend, value_index, config,
                               gateway, catalog, compressed) for chunk in partition.chunks]
        for fut in futures:
            try:
                outcomes.append(fut.result())
            except GatewayError as err:
                failure = failure or err
    outcomes.sort(key=lambda o: o.chunk_index)
    if failure is not None:
        raise PipelineAborted("view_generation", failure, outcomes)
    views, fs = aggregate(outcomes)
    for o in outcomes:
        if o.status == "accepted" and o.references is not None:
            assert fs.covers(o.references, compressed), \
                f"filtered schema misses references of chunk {o.chunk_index}"
    return views, fs, outcomes


# -- SQL generation -----------------------------------------------------------

@dataclass
class Candidate:
    iterations: list[dict] = field(default_factory=list)  # {"sql", "outcome"}
    executed: bool = False
    last_result: ExecutionResult | None = None

    @property
    def last_sql(self) -> str | None:
        return self.iterations[-1]["sql"] if self.iterations else None

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "executed": self.executed}


@dataclass
class SqlOutcome:
    plan: QueryPlan
    candidates: list[Candidate]
    sql_iterations: list[dict]
    final_sql: str | None
    final_result: ExecutionResult | None
    revision: dict | None
    status: str  # ok | failed_execution


def _repair_candidate(sql, plan, rewritten, views, schema_text, backend, config, gateway):
    cand = Candidate()
    t = 0
    while t < config.t_max:
        t += 1
        outcome = backend.execute(sql, config.limits)
        cand.iterations.append({"sql": sql, "outcome": outcome_json(outcome)})
        if is_valid(outcome):
            cand.executed, cand.last_result = True, outcome
            break
        if t >= config.t_max:
            break
        try:
            sql = generate_sql(plan, rewritten, views, schema_text, sql,
                               f"{outcome.kind} error: {outcome.message}", gateway,
                               1, config.dialect)[-1]
        except UnparseableReply as err:
            logger.warning("SQL repair produced no query: %s", err)
            break
    return cand


def run_sql_generation(rewritten: RewrittenQuestion, views: list[AgentView], schema_text: str,
                       backend, config: PipelineConfig, gateway: Gateway,
                       k_candidates: int | None = None) -> SqlOutcome:
    k = k_candidates or config.k_candidates
    plan = plan_query(rewritten, views, schema_text, gateway)
    initial = generate_sql(plan, rewritten, views, schema_text, None, None, gateway, k,
                           config.dialect)
    candidates = [_repair_candidate(sql, plan, rewritten, views, schema_text, backend, config,
                                    gateway) for sql in initial]
    chosen = next((c for c in candidates if c.executed), None)
    if chosen is None:
        last = candidates[-1]
        return SqlOutcome(plan, candidates, last.iterations, last.last_sql, None, None,
                          "failed_execution")
    rev = revise_sql(rewritten, chosen.last_sql, chosen.last_result, gateway, config.dialect)
    final = backend.execute(rev.sql, config.limits)
    revision = {"verdict": rev.verdict, "flagged": rev.flagged, "sql": rev.sql,
                "outcome": outcome_json(final)}
    if not is_valid(final):
        return SqlOutcome(plan, candidates, chosen.iterations, rev.sql, None, revision,
                          "failed_execution")
    return SqlOutcome(plan, candidates, chosen.iterations, rev.sql, final, revision, "ok")


# -- workspace and full runs --------------------------------------------------

def content_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Artifacts:
    catalog: SchemaCatalog
    compressed: CompressedCatalog | None
    partition: SchemaPartition
    value_index: ValueIndex | None
    built: dict = field(default_factory=dict)

    @property
    def working_catalog(self) -> SchemaCatalog:
        return self.compressed.catalog if self.compressed is not None else self.catalog


class Workspace:
    """Locates databases and per-database preprocessing artifacts on disk."""

    def __init__(self, databases_dir: str | Path, artifacts_dir: str | Path):
        self.databases_dir = Path(databases_dir)
        self.artifacts_dir = Path(artifacts_dir)

    def db_path(self, db_id: str) -> Path:
        for cand in (self.databases_dir / f"{db_id}.sqlite", self.databases_dir / f"{db_id}.db",
                     self.databases_dir / db_id / f"{db_id}.sqlite"):
            if cand.is_file():
                return cand
        raise FileNotFoundError(f"no database file for {db_id} under {self.databases_dir}")

    def artifact_dir(self, db_id: str) -> Path:
        return self.artifacts_dir / db_id

    def paths(self, db_id: str) -> dict[str, Path]:
        d = self.artifact_dir(db_id)
        return {"catalog": d / "catalog.json", "compressed": d / "compressed.json",
                "partition": d / "partition.json", "values": d / "values.jsonl",
                "stamp": d / "source.sha256"}

    def preprocess(self, db_id: str, config: PipelineConfig, force: bool = False) -> dict:
        """Write catalog, compressed catalog, partition and value index.

        Skips work when the stored source hash and budget match; returns a status dict.
        """
        p = self.paths(db_id)
        db = self.db_path(db_id)
        stamp = f"{content_hash(db)} budget={config.token_budget} compress={config.compress}"
        if not force and p["stamp"].is_file() and p["stamp"].read_text() == stamp \
                and all(p[k].is_file() for k in ("catalog", "compressed", "partition", "values")):
            logger.info("%s: artifacts up-to-date", db_id)
            return {"db_id": db_id, "status": "up-to-date"}
        p["catalog"].parent.mkdir(parents=True, exist_ok=True)
        catalog = ingest_from_database(db, db_id, sample_rows=3)
        save_manifest(catalog, p["catalog"])
        compressed = compress_schema(catalog)
        _write_json(p["compressed"], compressed.to_json())
        working = compressed.catalog if config.compress else catalog
        _write_json(p["partition"], split_schema(working, config.token_budget).to_json())
        build_index(db, catalog).save(p["values"])
        p["stamp"].write_text(stamp)
        return {"db_id": db_id, "status": "written"}

    def load(self, db_id: str, config: PipelineConfig) -> Artifacts:
        """Load artifacts, building any that are missing."""
        p = self.paths(db_id)
        built = {}
        if p["catalog"].is_file():
            catalog = load_manifest(p["catalog"])
        else:
            catalog = ingest_from_database(self.db_path(db_id), db_id, sample_rows=3)
            built["catalog"] = True
        compressed = None
        if config.compress:
            if p["compressed"].is_file():
                compressed = CompressedCatalog.from_json(json.loads(p["compressed"].read_text()))
            else:
                compressed = compress_schema(catalog)
                built["compressed"] = True
        working = compressed.catalog if compressed is not None else catalog
        partition = None
        if p["partition"].is_file():
            data = json.loads(p["partition"].read_text())
            if data.get("budget") == config.token_budget:
                try:
                    partition = SchemaPartition.from_json(data, working)
                except (AttributeError, KeyError):
                    partition = None
        if partition is None:
            partition = split_schema(working, config.token_budget)
            built["partition"] = True
        if p["values"].is_file():
            index = ValueIndex.load(p["values"])
        else:
            index = build_index(self.db_path(db_id), catalog)
            built["value_index"] = True
        return Artifacts(catalog, compressed, partition, index, built)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, default=str) + "\n",
                    encoding="utf-8")


def config_hash(snapshot: dict) -> str:
    blob = json.dumps(snapshot, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class PipelineRun:
    question_id: str
    db_id: str
    question: str
    status: str = "ok"  # ok | failed_execution | failed
    stage: str | None = None
    error: str | None = None
    rewritten: RewrittenQuestion | None = None
    chunk_outcomes: list[ChunkOutcome] = field(default_factory=list)
    aggregated_views: list[AgentView] = field(default_factory=list)
    filtered_schema: FilteredSchema | None = None
    plan: QueryPlan | None = None
    candidates: list[Candidate] = field(default_factory=list)
    sql_iterations: list[dict] = field(default_factory=list)
    revision: dict | None = None
    final_sql: str | None = None
    final_result: ExecutionResult | None = None
    ledger: dict | None = None
    artifacts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id, "db_id": self.db_id, "question": self.question,
            "status": self.status, "stage": self.stage, "error": self.error,
            "rewritten": self.rewritten.to_json() if self.rewritten else None,
            "chunk_outcomes": [o.to_json() for o in self.chunk_outcomes],
            "aggregated_views": [v.to_json() for v in self.aggregated_views],
            "filtered_schema": self.filtered_schema.to_json() if self.filtered_schema else None,
            "plan": self.plan.to_json() if self.plan else None,
            "candidates": [c.to_json() for c in self.candidates],
            "sql_iterations": self.sql_iterations,
            "revision": self.revision,
            "final_sql": self.final_sql,
            "final_result": self.final_result.to_json() if self.final_result else None,
            "ledger": self.ledger,
            "artifacts": self.artifacts,
        }


def run_pipeline(question: str, knowledge: str | None, db_id: str, config: PipelineConfig,
                 workspace: Workspace, gateway: Gateway, question_id: str = "q",
                 record_dir: str | Path | None = None, config_snapshot: dict | None = None
                 ) -> PipelineRun:
    """Rewrite, generate views per chunk, then generate and revise the final SQL.

    The run-record is written to ``record_dir/<question_id>.json`` even when a
    stage fails; ``stage`` then names the failing stage.
    """
    run = PipelineRun(question_id, db_id, question)
    stage = "preprocess"
    try:
        arts = workspace.load(db_id, config)
        run.artifacts = {"value_index_built": bool(arts.built.get("value_index")),
                         "built": sorted(arts.built),
                         "chunks": len(arts.partition.chunks)}
        backend = SqliteBackend(workspace.db_path(db_id))
        stage = "rewrite"
        run.rewritten = rewrite_question(question, knowledge, gateway)
        stage = "view_generation"
        try:
            views, fs, outcomes = run_view_generation(
                run.rewritten, arts.partition, backend, arts.value_index, config, gateway,
                arts.working_catalog, arts.compressed)
        except PipelineAborted as ab:
            run.chunk_outcomes = ab.partial or []
            raise ab.cause
        run.chunk_outcomes, run.aggregated_views, run.filtered_schema = outcomes, views, fs
        stage = "sql_generation"
        sql = run_sql_generation(run.rewritten, views, fs.render(arts.working_catalog),
                                 backend, config, gateway)
        run.plan, run.candidates, run.sql_iterations = sql.plan, sql.candidates, sql.sql_iterations
        run.revision, run.final_sql, run.final_result = sql.revision, sql.final_sql, sql.final_result
        run.status = sql.status
        if sql.status != "ok":
            run.stage = "final_execution"
    except (GatewayError, UnparseableReply, FileNotFoundError, ValueError, OSError) as err:
        logger.error("question %s failed during %s: %s", question_id, stage, err)
        run.status, run.stage, run.error = "failed", stage, f"{type(err).__name__}: {err}"
    run.ledger = gateway.ledger_report()
    if record_dir is not None:
        write_run_record(run, record_dir, config, gateway, config_snapshot)
    return run


def write_run_record(run: PipelineRun, record_dir, config: PipelineConfig, gateway: Gateway,
                     config_snapshot: dict | None = None) -> Path:
    snapshot = config_snapshot if config_snapshot is not None else asdict(config)
    doc = run.to_json()
    doc["config"] = snapshot
    doc["config_hash"] = config_hash(snapshot)
    doc["backends"] = gateway.backend_ids()
    out = Path(record_dir) / f"{run.question_id}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, doc)
    return out
