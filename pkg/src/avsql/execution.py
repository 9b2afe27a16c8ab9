"""Read-only SQL execution with row caps and timeouts."""

from __future__ import annotations

import re
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Protocol

MAX_MESSAGE = 2000
EVAL_ROW_CAP = 10_000

_LEADING = re.compile(r"^\s*(?:(?:--[^\n]*\n)|(?:/\*.*?\*/)|\s|\()*", re.DOTALL)


@dataclass(frozen=True)
class ExecutionLimits:
    row_cap: int = 100
    timeout_ms: int = 30_000


@dataclass
class ExecutionResult:
    columns: list[str]
    rows: list[tuple]
    row_cap_hit: bool = False
    elapsed_ms: int = 0

    def __post_init__(self):
        width = len(self.columns)
        if any(len(r) != width for r in self.rows):
            raise ValueError("row width does not match column count")

    def to_json(self, max_rows: int | None = None) -> dict:
        rows = self.rows if max_rows is None else self.rows[:max_rows]
        return {"columns": list(self.columns), "rows": [list(r) for r in rows],
                "row_cap_hit": self.row_cap_hit}


@dataclass
class ExecutionError:
    kind: Literal["syntax", "unknown_identifier", "timeout", "other"]
    message: str

    def __post_init__(self):
        self.message = (self.message or "unknown error")[:MAX_MESSAGE]

    def to_json(self) -> dict:
        return {"kind": self.kind, "message": self.message}


Outcome = ExecutionResult | ExecutionError


def is_valid(outcome: Outcome) -> bool:
    return isinstance(outcome, ExecutionResult)


def classify_error(message: str) -> str:
    m = message.lower()
    if "interrupted" in m:
        return "timeout"
    if "syntax error" in m or "incomplete input" in m or "unrecognized token" in m:
        return "syntax"
    if "no such table" in m or "no such column" in m or "ambiguous column" in m \
            or "no such function" in m:
        return "unknown_identifier"
    return "other"


def is_read_statement(sql_text: str) -> bool:
    head = _LEADING.sub("", sql_text, count=1)
    word = head.split(None, 1)[0].upper() if head.strip() else ""
    return word in ("SELECT", "WITH", "VALUES")


class Backend(Protocol):
    def execute(self, sql_text: str, limits: ExecutionLimits = ...) -> Outcome: ...


class SqliteBackend:
    """Opens a fresh read-only connection per execution, so it is safe to share."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"database file not found: {self.path}")

    @property
    def db_id(self) -> str:
        return self.path.stem

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(f"{self.path.resolve().as_uri()}?mode=ro", uri=True,
                               check_same_thread=False)
        conn.execute("PRAGMA query_only = ON")
        return conn

    def execute(self, sql_text: str, limits: ExecutionLimits = ExecutionLimits()) -> Outcome:
        if not sql_text or not sql_text.strip():
            return ExecutionError("syntax", "empty SQL text")
        if not is_read_statement(sql_text):
            return ExecutionError("other", "only SELECT/WITH statements may be executed")
        start = time.monotonic()
        deadline = start + limits.timeout_ms / 1000.0
        conn = self._connect()
        conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 1000)
        try:
            cur = conn.execute(sql_text)
            columns = [d[0] for d in (cur.description or [])]
            rows = [tuple(r) for r in cur.fetchmany(limits.row_cap + 1)]
        except sqlite3.Warning as exc:  # e.g. "You can only execute one statement at a time."
            return ExecutionError("other", str(exc))
        except sqlite3.Error as exc:
            msg = str(exc)
            kind = classify_error(msg)
            if kind == "timeout":
                msg = f"query exceeded {limits.timeout_ms} ms and was interrupted"
            return ExecutionError(kind, msg)
        finally:
            conn.close()
        hit = len(rows) > limits.row_cap
        elapsed = int((time.monotonic() - start) * 1000)
        return ExecutionResult(columns, rows[:limits.row_cap], hit, max(elapsed, 0))


def execute(sql_text: str, db: SqliteBackend | str | Path,
            limits: ExecutionLimits = ExecutionLimits()) -> Outcome:
    backend = db if hasattr(db, "execute") else SqliteBackend(db)
    return backend.execute(sql_text, limits)
