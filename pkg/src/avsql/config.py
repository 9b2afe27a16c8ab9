"""Run configuration: TOML or JSON file, overridden by command-line flags."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .gateway import (AGENT_ROLES, Gateway, OpenAICompatBackend, RecordingBackend,
                      ReplayBackend, Route)
from .pipeline import PipelineConfig

BACKENDS = ("replay", "openai")


class ConfigError(ValueError):
    pass


@dataclass
class ModelRoute:
    model: str = "replay"
    backend: str = "replay"
    context_limit: int = 128_000
    max_output_tokens: int = 2048


@dataclass
class RunConfig:
    routes: dict[str, ModelRoute] = field(default_factory=lambda: {"default": ModelRoute()})
    temperature: float = 1.0
    tau_edit: float = 0.5
    tau_semantic: float = 0.5
    t_max: int = 5
    token_budget: int = 10_000
    retrieval_limit: int = 5
    row_cap: int = 100
    timeout_ms: int = 30_000
    parallelism: int = 4
    sequential: bool = False
    dialect: str = "sqlite"
    k_candidates: int = 1
    compress: bool = True
    databases_dir: str = "databases"
    artifacts_dir: str = "artifacts"
    manifest: str | None = None
    cassette: str | None = None
    run_records_dir: str = "runs"
    reports_dir: str = "reports"
    base_url: str | None = None
    api_key_env: str = "OPENAI_API_KEY"

    def validate(self) -> "RunConfig":
        for name in ("tau_edit", "tau_semantic"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be at least 1, got {self.t_max}")
        if self.token_budget <= 0:
            raise ConfigError(f"token_budget must be positive, got {self.token_budget}")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be at least 1")
        if self.dialect not in ("generic", "sqlite", "snowflake"):
            raise ConfigError(f"unknown dialect {self.dialect!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        for role, r in self.routes.items():
            if role != "default" and role not in AGENT_ROLES:
                raise ConfigError(f"unknown agent role {role!r} in routes")
            if r.backend not in BACKENDS:
                raise ConfigError(f"route {role}: backend must be one of {BACKENDS}")
        return self

    def pipeline(self) -> PipelineConfig:
        names = {f.name for f in fields(PipelineConfig)}
        return PipelineConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def snapshot(self) -> dict:
        return asdict(self)

    def route_for(self, role: str) -> ModelRoute:
        return self.routes.get(role) or self.routes.get("default") or ModelRoute()


_SCALARS = {f.name: f for f in fields(RunConfig) if f.name != "routes"}


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SCALARS) - {"routes"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: v for k, v in data.items() if k != "routes"}
    routes = {}
    for role, r in (data.get("routes") or {}).items():
        if isinstance(r, str):
            r = {"model": r}
        try:
            routes[role] = ModelRoute(**r)
        except TypeError as exc:
            raise ConfigError(f"route {role}: {exc}") from exc
    if routes:
        kwargs["routes"] = routes
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (TOML or JSON) and apply non-None ``overrides``."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            if path.suffix == ".json":
                data = json.loads(path.read_text(encoding="utf-8"))
            else:
                data = tomllib.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        base = path.parent
        for key in ("databases_dir", "artifacts_dir", "manifest", "cassette", "run_records_dir",
                    "reports_dir"):
            if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return from_dict(data)


def build_gateway(cfg: RunConfig, replay: str | None = None, record: str | None = None) -> Gateway:
    """Backends per role; ``replay`` or ``record`` name a cassette and override the routes."""
    if replay and record:
        raise ConfigError("--replay and --record are mutually exclusive")
    live = None

    def live_backend():
        nonlocal live
        if live is None:
            if not cfg.base_url:
                raise ConfigError("a live backend needs base_url in the config")
            live = OpenAICompatBackend(cfg.base_url, cfg.api_key_env)
            if record:
                live = RecordingBackend(live, record)
        return live

    replay_backend = None
    cassette = replay or cfg.cassette
    routes = {}
    for role in AGENT_ROLES:
        mr = cfg.route_for(role)
        if record or (mr.backend == "openai" and not replay):
            backend = live_backend()
        else:
            if cassette is None:
                raise ConfigError("replay backend needs a cassette (--replay or cassette =)")
            if replay_backend is None:
                replay_backend = ReplayBackend(cassette)
            backend = replay_backend
        routes[role] = Route(backend, mr.model, mr.context_limit, cfg.temperature,
                             mr.max_output_tokens)
    return Gateway(routes)
