"""Run configuration file: backends, director and controller settings.

JSON with strict validation: unknown keys are rejected at every level so a
typo cannot silently fall back to a default. See docs/config.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .artifacts import ArtifactStore
from .backends.base import BackendSuite
from .backends.http import EndpointConfig, build_http_suite
from .backends.mock import build_mock_suite
from .backends.scenario import load_scenario
from .director import DirectorConfig, controller_from_dict
from .errors import ConfigError
from .repair import ScaleController

_ENDPOINT_KEYS = {"base_url", "auth_env", "timeout_s", "retries", "backoff_s"}
_BACKEND_NAMES = ("vlm", "generator", "editor", "embedder", "segmenter")
_OPTIONAL_BACKENDS = ("clip_embedder", "distance")
_TOP_KEYS = {
    "label", "runs_root", "embedding_dim", "mock", "backends",
    "director", "controller", "prompts_dir", "service", "lenient_parse",
}
_DIRECTOR_KEYS = {"tau", "t_max", "mode", "seed", "sequential_init"}
_CONTROLLER_KEYS = {
    "scale", "step", "scale_min", "scale_max",
    "over_edit_threshold", "subtle_threshold", "max_attempts",
}
_SERVICE_KEYS = {"auth_token_env"}
_MOCK_KEYS = {"scenario"}


@dataclass
class RunConfig:
    label: str = "engine"
    runs_root: str = "runs"
    embedding_dim: int = 32
    mock: dict[str, Any] | None = None
    backends: dict[str, dict[str, Any]] | None = None
    director: dict[str, Any] = field(default_factory=dict)
    controller: dict[str, Any] = field(default_factory=dict)
    prompts_dir: str | None = None
    service: dict[str, Any] = field(default_factory=dict)
    lenient_parse: bool = False
    base_dir: Path = field(default_factory=Path)

    def director_config(self, **overrides: Any) -> DirectorConfig:
        merged = {**self.director, **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return DirectorConfig.from_dict(merged)
        except ValueError as exc:
            raise ConfigError(f"director: {exc}") from exc

    def scale_controller(self) -> ScaleController:
        try:
            return controller_from_dict(self.controller)
        except ValueError as exc:
            raise ConfigError(f"controller: {exc}") from exc

    def engine_dict(self) -> dict[str, Any]:
        """The portion of config a run directory needs to rebuild its backends.

        Paths are made absolute so a persisted run stays loadable from anywhere.
        """
        mock = dict(self.mock) if self.mock is not None else None
        if mock and mock.get("scenario"):
            mock["scenario"] = str(self.resolve(mock["scenario"]))
        return {
            "label": self.label,
            "embedding_dim": self.embedding_dim,
            "mock": mock,
            "backends": self.backends,
            "prompts_dir": str(self.resolve(self.prompts_dir)) if self.prompts_dir else None,
        }

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _check_keys(doc: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def config_from_dict(doc: Mapping[str, Any], *, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be an object")
    _check_keys(doc, _TOP_KEYS, "config")
    mock = doc.get("mock")
    backends = doc.get("backends")
    if (mock is None) == (backends is None):
        raise ConfigError("config requires exactly one of 'mock' or 'backends'")
    if mock is not None:
        _check_keys(mock, _MOCK_KEYS, "mock")
        if not mock.get("scenario"):
            raise ConfigError("mock.scenario path is required in mock mode")
    if backends is not None:
        for name in _BACKEND_NAMES:
            if name not in backends:
                raise ConfigError(f"backends.{name} is required")
        for name, ep in backends.items():
            if name not in _BACKEND_NAMES + _OPTIONAL_BACKENDS:
                raise ConfigError(f"backends: unknown backend {name!r}")
            _check_keys(ep, _ENDPOINT_KEYS, f"backends.{name}")
            if not ep.get("base_url"):
                raise ConfigError(f"backends.{name}.base_url is required")
    _check_keys(doc.get("director", {}), _DIRECTOR_KEYS, "director")
    _check_keys(doc.get("controller", {}), _CONTROLLER_KEYS, "controller")
    _check_keys(doc.get("service", {}), _SERVICE_KEYS, "service")
    config = RunConfig(
        label=str(doc.get("label", "engine")),
        runs_root=str(doc.get("runs_root", "runs")),
        embedding_dim=int(doc.get("embedding_dim", 32)),
        mock=dict(mock) if mock is not None else None,
        backends={k: dict(v) for k, v in backends.items()} if backends is not None else None,
        director=dict(doc.get("director", {})),
        controller=dict(doc.get("controller", {})),
        prompts_dir=doc.get("prompts_dir"),
        service=dict(doc.get("service", {})),
        lenient_parse=bool(doc.get("lenient_parse", False)),
        base_dir=base_dir or Path.cwd(),
    )
    config.director_config()
    config.scale_controller()
    return config


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not JSON: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)


def build_suite(config_like: Mapping[str, Any] | RunConfig, store: ArtifactStore | None = None) -> BackendSuite:
    """Build the backend suite a config (or a run's persisted engine dict) describes."""
    if isinstance(config_like, RunConfig):
        engine = config_like.engine_dict()
        base_dir = config_like.base_dir
    else:
        engine = dict(config_like)
        base_dir = Path(engine.pop("base_dir", "."))
    mock = engine.get("mock")
    dim = int(engine.get("embedding_dim", 32))
    if mock is not None:
        scenario_path = Path(mock["scenario"])
        if not scenario_path.is_absolute():
            scenario_path = base_dir / scenario_path
        scenario = load_scenario(scenario_path)
        return build_mock_suite(scenario, store, dim=dim)
    endpoints = {
        name: EndpointConfig(
            base_url=ep["base_url"],
            auth_env=ep.get("auth_env"),
            timeout_s=float(ep.get("timeout_s", 30.0)),
            retries=int(ep.get("retries", 2)),
            backoff_s=float(ep.get("backoff_s", 0.5)),
        )
        for name, ep in (engine.get("backends") or {}).items()
    }
    if not endpoints:
        raise ConfigError("run has neither mock scenario nor backend endpoints")
    return build_http_suite(endpoints, embedding_dim=dim, store=store)
