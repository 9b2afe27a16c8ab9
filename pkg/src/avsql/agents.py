"""Prompt construction and reply parsing for the five pipeline agents."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from string import Template

from sqlglot import exp

from .analyzer import SqlSyntaxError, parse, render
from .catalog import serialize
from .execution import MAX_MESSAGE, ExecutionResult

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
SAMPLE_ROWS = 10
_SPLIT = "==== user ===="
_FENCE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)
_LABELS = ("TASK", "REQUIRED OUTPUTS", "FILTERS", "SORTING/LIMIT")
_LABEL_LINE = re.compile(r"^\s*\**\s*(TASK|REQUIRED OUTPUTS|FILTERS|SORTING/LIMIT)\s*\**\s*:\s*(.*)$",
                         re.IGNORECASE)


class UnparseableReply(ValueError):
    """A reply that does not follow the agent's envelope; repairable."""


@lru_cache(maxsize=None)
def load_template(agent: str, version: str = PROMPT_VERSION) -> tuple[Template, Template]:
    text = resources.files("avsql.prompts").joinpath(f"{agent}.{version}.txt").read_text("utf-8")
    system, user = text.split(_SPLIT, 1)
    return Template(system.strip()), Template(user.strip("\n"))


def build_messages(agent: str, version: str = PROMPT_VERSION, **values) -> list[dict]:
    system, user = load_template(agent, version)
    return [{"role": "system", "content": system.substitute(values)},
            {"role": "user", "content": user.substitute(values).rstrip() + "\n"}]


def fenced_blocks(reply: str) -> list[tuple[str, str]]:
    return [(lang.lower(), body.strip()) for lang, body in _FENCE.findall(reply or "")]


def _sql_blocks(reply: str) -> list[str]:
    out = []
    for lang, body in fenced_blocks(reply):
        if lang == "sql" or (lang == "" and not body.lstrip().startswith(("{", "["))):
            out.append(body.rstrip().rstrip(";").strip())
    return [b for b in out if b]


def _json_block(reply: str):
    for lang, body in reversed(fenced_blocks(reply)):
        if lang in ("json", ""):
            try:
                return json.loads(body)
            except json.JSONDecodeError:
                continue
    return None


def truncate(text: str, limit: int = MAX_MESSAGE) -> str:
    return text if len(text) <= limit else text[:limit] + " ...[truncated]"


def format_sample(result: ExecutionResult | None, max_rows: int = SAMPLE_ROWS) -> str:
    if result is None:
        return "(no result)"
    lines = [" | ".join(result.columns)]
    for row in result.rows[:max_rows]:
        lines.append(" | ".join("NULL" if v is None else str(v) for v in row))
    if len(result.rows) > max_rows or result.row_cap_hit:
        lines.append(f"... ({'at least ' if result.row_cap_hit else ''}{len(result.rows)} rows)")
    return "\n".join(lines)


def _reformat(messages, reply, reason) -> list[dict]:
    return messages + [
        {"role": "assistant", "content": reply},
        {"role": "user", "content": f"Your reply could not be parsed: {reason}. "
                                    "Reply again using exactly the required format."},
    ]


# -- rewriter -----------------------------------------------------------------

@dataclass
class RewrittenQuestion:
    task: str
    required_outputs: list[str]
    filters: list[str]
    sorting_limit: str | None
    full_text: str
    fallback: bool = False

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "RewrittenQuestion":
        return cls(**d)


def _items(lines: list[str]) -> list[str]:
    out = []
    for ln in lines:
        s = ln.strip().lstrip("-*").strip()
        if s and s.lower() != "none":
            out.append(s)
    return out


def parse_rewrite(reply: str) -> RewrittenQuestion:
    sections: dict[str, list[str]] = {}
    current = None
    for line in (reply or "").splitlines():
        m = _LABEL_LINE.match(line)
        if m:
            current = m.group(1).upper()
            sections[current] = [m.group(2)] if m.group(2).strip() else []
        elif current is not None:
            sections[current].append(line)
    missing = [l for l in _LABELS if l not in sections]
    if missing:
        raise UnparseableReply(f"missing section(s) {', '.join(missing)}")
    task = " ".join(s.strip() for s in sections["TASK"] if s.strip())
    if not task:
        raise UnparseableReply("TASK section is empty")
    outputs = _items(sections["REQUIRED OUTPUTS"])
    filters = _items(sections["FILTERS"])
    sl = " ".join(s.strip() for s in sections["SORTING/LIMIT"] if s.strip())
    sorting = None if not sl or sl.lower() == "none" else sl
    return RewrittenQuestion(task, outputs, filters, sorting,
                             render_rewrite(task, outputs, filters, sorting))


def render_rewrite(task, outputs, filters, sorting) -> str:
    def bullets(xs):
        return "\n".join(f"- {x}" for x in xs) if xs else "none"
    return (f"TASK: {task}\nREQUIRED OUTPUTS:\n{bullets(outputs)}\n"
            f"FILTERS:\n{bullets(filters)}\nSORTING/LIMIT: {sorting or 'none'}")


def rewrite_question(question: str, external_knowledge: str | None, gateway) -> RewrittenQuestion:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    knowledge = (external_knowledge or "").strip()
    block = f"\nExternal knowledge:\n{knowledge}" if knowledge else ""
    messages = build_messages("rewriter", question=question.strip(), knowledge_block=block)
    reply = gateway.chat("rewriter", messages).content
    try:
        return parse_rewrite(reply)
    except UnparseableReply as err:
        retry = _reformat(messages, reply, str(err))
        try:
            return parse_rewrite(gateway.chat("rewriter", retry).content)
        except UnparseableReply:
            logger.warning("rewriter reply unparseable twice; using the original question")
    text = question.strip() + (f"\n\nExternal knowledge:\n{knowledge}" if knowledge else "")
    return RewrittenQuestion(question.strip(), [], [], None, text, fallback=True)


# -- view generator -----------------------------------------------------------

@dataclass
class SelectionRecord:
    tables: set[str] = field(default_factory=set)
    columns: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.tables = set(self.tables)
        self.columns = set(self.columns)
        # a listed column implies its table
        for c in self.columns:
            self.tables.add(c.rpartition(".")[0])

    @property
    def empty(self) -> bool:
        return not self.tables and not self.columns

    def to_json(self) -> dict:
        return {"tables": sorted(self.tables), "columns": sorted(self.columns)}


@dataclass
class AgentView:
    chunk_index: int
    ctes: list[dict]  # {"name", "sql"}
    rationale: str = ""
    sample_result: ExecutionResult | None = None
    raw_blocks: list[str] = field(default_factory=list)  # SQL that failed to parse

    @property
    def empty(self) -> bool:
        return not self.ctes and not self.raw_blocks

    def with_clause(self, upto: int | None = None) -> str:
        ctes = self.ctes if upto is None else self.ctes[:upto]
        return "WITH " + ",\n".join(f"{c['name']} AS (\n{c['sql']}\n)" for c in ctes)

    def program_sql(self, upto: int | None = None) -> str:
        """Executable form: all (or the first ``upto``) CTEs, selecting from the last one."""
        ctes = self.ctes if upto is None else self.ctes[:upto]
        return f"{self.with_clause(upto)}\nSELECT * FROM {ctes[-1]['name']}"

    def to_json(self) -> dict:
        return {"chunk_index": self.chunk_index, "ctes": [dict(c) for c in self.ctes],
                "rationale": self.rationale, "raw_blocks": list(self.raw_blocks),
                "sample_result": None if self.sample_result is None
                else self.sample_result.to_json(SAMPLE_ROWS)}


def _is_trivial_final(select, last_name: str) -> bool:
    if not isinstance(select, exp.Select) or len(select.expressions) != 1:
        return False
    if not isinstance(select.expressions[0], exp.Star):
        return False
    src = select.args.get("from_") or select.args.get("from")
    if src is None or select.args.get("joins") or select.args.get("where"):
        return False
    if any(select.args.get(k) for k in ("group", "order", "limit", "having", "distinct")):
        return False
    t = src.this
    return isinstance(t, exp.Table) and t.name.casefold() == last_name.casefold()


def _ctes_from_block(sql: str, chunk_index: int, n: int, dialect: str) -> list[dict]:
    program = parse(sql, dialect)
    stmt = program.statements[-1]
    out = []
    with_ = stmt.args.get("with_") or stmt.args.get("with")
    if with_ is not None:
        for cte in with_.expressions:
            name = cte.alias_or_name
            body = type(program)(sql, dialect, [cte.this], [])
            out.append({"name": name, "sql": render(body)})
        stmt = stmt.copy()
        stmt.set("with_" if "with_" in stmt.args else "with", None)
        if not _is_trivial_final(stmt, out[-1]["name"]):
            out.append({"name": f"{out[-1]['name']}_result",
                        "sql": render(type(program)(sql, dialect, [stmt], []))})
    else:
        out.append({"name": f"chunk{chunk_index}_view{n}", "sql": render(program)})
    return out


def parse_view_reply(reply: str, chunk_index: int, dialect: str = "sqlite"):
    """Return (view or None, selection); raise UnparseableReply without a JSON selection."""
    sel = _json_block(reply)
    if not isinstance(sel, dict) or "tables" not in sel or "columns" not in sel:
        raise UnparseableReply('no ```json block with "tables" and "columns"')
    if not isinstance(sel["tables"], list) or not isinstance(sel["columns"], list) \
            or not all(isinstance(x, str) for x in sel["tables"] + sel["columns"]) \
            or any("." not in c for c in sel["columns"]):
        raise UnparseableReply('"tables" must list names and "columns" must list table.column names')
    selection = SelectionRecord(set(sel["tables"]), set(sel["columns"]))
    blocks = _sql_blocks(reply)
    if not blocks:
        return None, selection
    ctes, raw = [], []
    for n, block in enumerate(blocks, 1):
        try:
            ctes.extend(_ctes_from_block(block, chunk_index, n, dialect))
        except SqlSyntaxError:
            raw.append(block)
    names = [c["name"].casefold() for c in ctes]
    if len(set(names)) != len(names):
        raise UnparseableReply("CTE names must be unique within a view")
    rationale = _FENCE.sub("", reply).strip()
    return AgentView(chunk_index, ctes, rationale, None, raw), selection


@dataclass
class ViewFeedback:
    prior_reply: str | None = None
    error: str | None = None
    consistency: str | None = None
    retrieved_values: list = field(default_factory=list)  # RetrievalCandidate

    def render(self) -> str:
        parts = []
        if self.retrieved_values:
            lines = [f"- {c.entry.table}.{c.entry.column} = '{c.entry.value}'"
                     for c in self.retrieved_values]
            parts.append("Values stored in the database that resemble literals you used:\n"
                         + "\n".join(lines))
        if self.prior_reply:
            parts.append("Your previous reply:\n" + truncate(self.prior_reply, 4000))
        if self.error:
            parts.append("Executing your views failed with:\n" + truncate(self.error))
        if self.consistency:
            parts.append("Your views and JSON selection disagree:\n" + truncate(self.consistency))
        if self.prior_reply:
            parts.append("Fix the problems above and reply again in the same format.")
        return ("\n\n" + "\n\n".join(parts)) if parts else ""


def generate_view(rewritten: RewrittenQuestion, chunk, feedback: ViewFeedback | None, gateway,
                  dialect: str = "sqlite"):
    messages = build_messages(
        "view_generator", question=rewritten.full_text, chunk_index=chunk.index,
        schema=serialize(chunk).rstrip(), dialect=dialect,
        feedback_block=(feedback or ViewFeedback()).render())
    reply = gateway.chat("view_generator", messages).content
    try:
        view, selection = parse_view_reply(reply, chunk.index, dialect)
    except UnparseableReply as err:
        err.reply = reply
        raise
    return view, selection, reply


# -- planner ------------------------------------------------------------------

@dataclass
class QueryPlan:
    steps: list[str]
    ctes_to_use: list[str] = field(default_factory=list)
    tables_to_use: list[str] = field(default_factory=list)
    output_columns: list[str] = field(default_factory=list)
    notes: str = ""
    degraded: bool = False

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a plan needs at least one step")

    def render(self) -> str:
        lines = [f"{i}. {s}" for i, s in enumerate(self.steps, 1)]
        for label, xs in (("CTEs", self.ctes_to_use), ("Tables", self.tables_to_use),
                          ("Output columns", self.output_columns)):
            if xs:
                lines.append(f"{label}: {', '.join(xs)}")
        if self.notes:
            lines.append(f"Notes: {self.notes}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def parse_plan(reply: str) -> QueryPlan:
    data = _json_block(reply)
    if data is None:
        m = re.search(r"\{.*\}", reply or "", re.DOTALL)
        if m:
            try:
                data = json.loads(m.group(0))
            except json.JSONDecodeError:
                data = None
    if isinstance(data, dict) and isinstance(data.get("steps"), list) and data["steps"]:
        def strs(key):
            v = data.get(key) or []
            return [str(x) for x in v] if isinstance(v, list) else [str(v)]
        return QueryPlan([str(s) for s in data["steps"]], strs("ctes_to_use"),
                         strs("tables_to_use"), strs("output_columns"), str(data.get("notes") or ""))
    return QueryPlan([(reply or "").strip() or "(empty plan)"], degraded=True)


def render_views(views) -> str:
    if not views:
        return "(none)"
    out = []
    for v in views:
        out.append(f"-- from schema slice {v.chunk_index}\n{v.with_clause()}")
        if v.sample_result is not None:
            out.append(f"-- sample of {v.ctes[-1]['name']}:\n" + format_sample(v.sample_result, 3))
    return "\n\n".join(out)


def plan_query(rewritten: RewrittenQuestion, views, filtered_schema_text: str, gateway) -> QueryPlan:
    messages = build_messages("planner", question=rewritten.full_text, views=render_views(views),
                              schema=filtered_schema_text.rstrip() or "(empty)")
    return parse_plan(gateway.chat("planner", messages).content)


# -- SQL generator ------------------------------------------------------------

class NoSqlBlock(UnparseableReply):
    pass


def generate_sql(plan: QueryPlan, rewritten: RewrittenQuestion, views, filtered_schema_text: str,
                 prior_sql: str | None, exec_error: str | None, gateway, k: int = 1,
                 dialect: str = "sqlite") -> list[str]:
    """Return the last ``k`` fenced SQL blocks of the reply (one retry when none)."""
    feedback = ""
    if prior_sql:
        feedback += "\n\nYour previous query:\n```sql\n" + truncate(prior_sql, 4000) + "\n```"
    if exec_error:
        feedback += "\n\nIt failed with:\n" + truncate(exec_error)
    if feedback:
        feedback += "\n\nReturn a corrected query."
    phrase = "one query" if k == 1 else f"{k} distinct candidate queries, each"
    messages = build_messages("sql_generator", dialect=dialect, count_phrase=phrase,
                              question=rewritten.full_text, plan=plan.render(),
                              views=render_views(views),
                              schema=filtered_schema_text.rstrip() or "(empty)",
                              feedback_block=feedback)
    reply = gateway.chat("sql_generator", messages).content
    blocks = _sql_blocks(reply)
    if not blocks:
        reply = gateway.chat("sql_generator",
                             _reformat(messages, reply, "no fenced ```sql block")).content
        blocks = _sql_blocks(reply)
    if not blocks:
        raise NoSqlBlock("SQL generator reply has no fenced ```sql block")
    return blocks[-k:]


# -- revisor ------------------------------------------------------------------

@dataclass
class Revision:
    sql: str
    verdict: str  # correct | revised | kept_unparseable
    flagged: bool = False


def revise_sql(rewritten: RewrittenQuestion, sql_text: str, sample_result, gateway,
               dialect: str = "sqlite") -> Revision:
    rows = 0 if sample_result is None else min(len(sample_result.rows), SAMPLE_ROWS)
    messages = build_messages("revisor", question=rewritten.full_text, sql=sql_text,
                              row_note=f"first {rows} rows", sample=format_sample(sample_result))
    reply = gateway.chat("revisor", messages).content or ""
    if re.search(r"VERDICT:\s*CORRECT", reply, re.IGNORECASE):
        return Revision(sql_text, "correct")
    blocks = _sql_blocks(reply)
    if not blocks:
        logger.warning("revisor gave neither a verdict nor SQL; keeping the query")
        return Revision(sql_text, "kept_unparseable", True)
    try:
        parse(blocks[-1], dialect)
    except SqlSyntaxError as err:
        logger.warning("revised SQL does not parse (%s); keeping the query", err)
        return Revision(sql_text, "kept_unparseable", True)
    return Revision(blocks[-1], "revised")
