"""Chat-completion gateway: per-role routing, record/replay and usage accounting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .catalog import estimate_tokens

logger = logging.getLogger(__name__)

AGENT_ROLES = ("rewriter", "view_generator", "planner", "sql_generator", "revisor")
MESSAGE_ROLES = ("system", "user", "assistant")


class GatewayError(RuntimeError):
    pass


class ReplayMissError(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"replay miss: no cassette entry for request hash {key}")
        self.key = key


class BackendUnavailable(GatewayError):
    pass


class PromptTooLong(GatewayError):
    pass


@dataclass(frozen=True)
class ChatParams:
    model: str = "replay"
    temperature: float = 1.0
    max_output_tokens: int = 2048


@dataclass
class ChatRequest:
    agent_role: str
    messages: list[dict]
    params: ChatParams = field(default_factory=ChatParams)

    def __post_init__(self):
        if self.agent_role not in AGENT_ROLES:
            raise ValueError(f"unknown agent role {self.agent_role!r}")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].get("role") != "system":
            raise ValueError("first message must have role 'system'")
        for m in self.messages:
            if m.get("role") not in MESSAGE_ROLES or not isinstance(m.get("content"), str):
                raise ValueError(f"malformed message {m!r}")

    def cache_key(self) -> str:
        """sha256 over (role, messages, model) in canonical JSON."""
        payload = {
            "agent_role": self.agent_role,
            "messages": [{"role": m["role"], "content": m["content"]} for m in self.messages],
            "model": self.params.model,
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def prompt_tokens(self) -> int:
        return sum(estimate_tokens(m["content"]) for m in self.messages)


@dataclass
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    estimated: bool = False


@dataclass
class ChatResponse:
    content: str
    usage: Usage = field(default_factory=Usage)
    latency_ms: int = 0


class ChatBackend(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass
class RoleUsage:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    wall_ms: int = 0


class UsageLedger:
    """Thread-safe per-role accumulation of calls, tokens and wall time."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows: dict[str, RoleUsage] = {r: RoleUsage() for r in AGENT_ROLES}

    def record(self, role: str, usage: Usage, wall_ms: int) -> None:
        with self._lock:
            row = self._rows.setdefault(role, RoleUsage())
            row.calls += 1
            row.input_tokens += usage.input_tokens
            row.output_tokens += usage.output_tokens
            row.wall_ms += wall_ms

    def merge(self, other: "UsageLedger") -> None:
        for role, row in other.snapshot()["roles"].items():
            with self._lock:
                mine = self._rows.setdefault(role, RoleUsage())
                mine.calls += row["calls"]
                mine.input_tokens += row["input_tokens"]
                mine.output_tokens += row["output_tokens"]
                mine.wall_ms += row["wall_ms"]

    def snapshot(self) -> dict:
        with self._lock:
            rows = {r: asdict(u) for r, u in self._rows.items()}
        return ledger_document(rows)


def ledger_document(rows: dict[str, dict]) -> dict:
    """Totals plus per-role token and wall-time percentages for a role table."""
    totals = {k: sum(r[k] for r in rows.values())
              for k in ("calls", "input_tokens", "output_tokens", "wall_ms")}
    all_tokens = totals["input_tokens"] + totals["output_tokens"]
    roles = {}
    for role, r in rows.items():
        tokens = r["input_tokens"] + r["output_tokens"]
        roles[role] = dict(r)
        roles[role]["token_pct"] = 100.0 * tokens / all_tokens if all_tokens else 0.0
        roles[role]["wall_pct"] = 100.0 * r["wall_ms"] / totals["wall_ms"] if totals["wall_ms"] else 0.0
    return {"roles": roles, "totals": totals}


# -- backends -----------------------------------------------------------------

def _usage_for(request: ChatRequest, content: str, raw: dict | None) -> Usage:
    if raw and "input_tokens" in raw and "output_tokens" in raw:
        return Usage(int(raw["input_tokens"]), int(raw["output_tokens"]),
                     bool(raw.get("estimated", False)))
    return Usage(request.prompt_tokens(), estimate_tokens(content), True)


class ReplayBackend:
    """Serves recorded responses from a JSON-lines cassette keyed by request hash."""

    def __init__(self, cassette: str | Path):
        self.path = Path(cassette)
        self.name = f"replay:{self.path.name}"
        self.entries: dict[str, dict] = {}
        if not self.path.is_file():
            raise GatewayError(f"cassette not found: {self.path}")
        with self.path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    self.entries[entry["key"]] = entry["response"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise GatewayError(f"{self.path}:{n}: malformed cassette line: {exc}") from exc

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()[:16]

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        resp = self.entries.get(key)
        if resp is None:
            raise ReplayMissError(key)
        content = resp["content"]
        return ChatResponse(content, _usage_for(request, content, resp.get("usage")),
                            int(resp.get("latency_ms", 0)))


class RecordingBackend:
    """Wraps a live backend and appends every exchange to a cassette."""

    def __init__(self, inner: ChatBackend, cassette: str | Path):
        self.inner = inner
        self.path = Path(cassette)
        self.name = f"record:{inner.name}"
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        resp = self.inner.complete(request)
        entry = cassette_entry(request, resp)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return resp


def cassette_entry(request: ChatRequest, response: ChatResponse, include_request=True) -> dict:
    entry = {"key": request.cache_key(),
             "response": {"content": response.content, "usage": asdict(response.usage),
                          "latency_ms": response.latency_ms}}
    if include_request:
        entry["request"] = {"agent_role": request.agent_role, "model": request.params.model,
                            "messages": request.messages}
    return entry


class FunctionBackend:
    """Calls a Python function for replies; for tests and scripted demos."""

    def __init__(self, fn: Callable[[ChatRequest], str], name: str = "function"):
        self.fn = fn
        self.name = name

    def complete(self, request: ChatRequest) -> ChatResponse:
        content = self.fn(request)
        return ChatResponse(content, _usage_for(request, content, None), 0)


class OpenAICompatBackend:
    """HTTP client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, base_url: str, api_key_env: str = "OPENAI_API_KEY",
                 timeout_s: float = 120.0, max_retries: int = 3, backoff_s: float = 1.0,
                 client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.name = f"openai:{self.base_url}"
        self._client = client or httpx.Client(timeout=timeout_s)

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = os.environ.get(self.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = {"model": request.params.model, "messages": request.messages,
                "temperature": request.params.temperature,
                "max_tokens": request.params.max_output_tokens}
        last_err = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                r = self._client.post(f"{self.base_url}/chat/completions", json=body,
                                      headers=headers)
            except httpx.TransportError as exc:
                last_err = f"transport error: {exc}"
                continue
            if r.status_code == 429 or r.status_code >= 500:
                last_err = f"HTTP {r.status_code}"
                continue
            if r.status_code >= 400:
                raise GatewayError(f"HTTP {r.status_code}: {r.text[:500]}")
            data = r.json()
            content = data["choices"][0]["message"].get("content") or ""
            u = data.get("usage") or {}
            raw = None
            if "prompt_tokens" in u and "completion_tokens" in u:
                raw = {"input_tokens": u["prompt_tokens"], "output_tokens": u["completion_tokens"]}
            return ChatResponse(content, _usage_for(request, content, raw),
                                int((time.monotonic() - start) * 1000))
        raise BackendUnavailable(f"{self.name} unreachable after {self.max_retries} retries: {last_err}")


@dataclass
class Route:
    backend: ChatBackend
    model: str
    context_limit: int = 128_000
    temperature: float = 1.0
    max_output_tokens: int = 2048


class Gateway:
    """Routes each agent role to a backend and model and records usage."""

    def __init__(self, routes: dict[str, Route] | None = None, default: Route | None = None):
        self.routes = dict(routes or {})
        self.default = default
        self.ledger = UsageLedger()

    def fork(self) -> "Gateway":
        """Same routes, fresh ledger; one per question keeps run ledgers separate."""
        return Gateway(self.routes, self.default)

    def route(self, role: str) -> Route:
        r = self.routes.get(role, self.default)
        if r is None:
            raise GatewayError(f"no backend configured for agent role {role}")
        return r

    def chat(self, role: str, messages: list[dict]) -> ChatResponse:
        r = self.route(role)
        req = ChatRequest(role, messages, ChatParams(r.model, r.temperature, r.max_output_tokens))
        if req.prompt_tokens() > r.context_limit:
            raise PromptTooLong(f"{role} prompt of {req.prompt_tokens()} tokens exceeds "
                                f"context limit {r.context_limit} of {r.model}")
        start = time.monotonic()
        resp = r.backend.complete(req)
        wall = resp.latency_ms if isinstance(r.backend, ReplayBackend) \
            else int((time.monotonic() - start) * 1000)
        self.ledger.record(role, resp.usage, wall)
        return resp

    def ledger_report(self) -> dict:
        return self.ledger.snapshot()

    def backend_ids(self) -> dict:
        ids = {}
        for role in AGENT_ROLES:
            r = self.routes.get(role, self.default)
            if r is not None:
                ident = {"backend": r.backend.name, "model": r.model}
                if isinstance(r.backend, ReplayBackend):
                    ident["cassette_sha256"] = r.backend.digest
                ids[role] = ident
        return ids


def single_backend_gateway(backend: ChatBackend, model: str = "replay",
                           context_limit: int = 128_000) -> Gateway:
    return Gateway(default=Route(backend, model, context_limit))
