"""Declarative run configuration: one YAML file drives every CLI command.

Validation errors carry the dotted path of the offending field. Environment
variables may override provider *endpoints* only (LOGITFUSE_TARGET_ENDPOINT,
LOGITFUSE_BASE_ENDPOINT, LOGITFUSE_GUIDER_ENDPOINT).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .fusion import GuidanceConfig
from .providers import LogitProvider, RemoteProvider, TableLM
from .sampling import SamplingConfig

ENV_ENDPOINT_OVERRIDES = {
    "target": "LOGITFUSE_TARGET_ENDPOINT",
    "base": "LOGITFUSE_BASE_ENDPOINT",
    "guider": "LOGITFUSE_GUIDER_ENDPOINT",
}

PROVIDER_ROLES = ("target", "base", "guider")


@dataclass(frozen=True)
class ProviderSpec:
    fixture: Path | None = None
    endpoint: str | None = None
    stateless: bool = False

    def build(self) -> LogitProvider:
        if self.fixture is not None:
            return TableLM.load(self.fixture)
        assert self.endpoint is not None
        return RemoteProvider(self.endpoint, stateless=self.stateless)


@dataclass(frozen=True)
class SweepConfig:
    alphas: tuple[float, ...] = ()
    no_warmup: bool = False
    budget_forcing: bool = False
    target_only: bool = False


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8390
    max_concurrency: int = 4


@dataclass(frozen=True)
class RunConfig:
    providers: dict[str, ProviderSpec]
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    max_new_tokens: int = 8192
    mode: str = "guided"
    n_samples: int = 1
    forcing_tokens: tuple[int, ...] = ()
    forcing_budget: int | None = None
    record_logits: bool = False
    dataset: Path | None = None
    vocab_path: Path | None = None
    output_dir: Path = Path("out")
    sweep: SweepConfig = field(default_factory=SweepConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def provider_roles_needed(self) -> tuple[str, ...]:
        if self.mode == "guided":
            return PROVIDER_ROLES
        return ("target",)

    def display_vocab_source(self) -> Path | None:
        """Token table used for detokenization: explicit path, else the
        target fixture (remote providers expose no token strings)."""
        if self.vocab_path is not None:
            return self.vocab_path
        target = self.providers.get("target")
        if target is not None and target.fixture is not None:
            return target.fixture
        return None


def _expect_mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    return node


def _get_number(node: dict, path: str, key: str, default, minimum=None, strict_min=False):
    value = node.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {value!r}")
    if minimum is not None and (value <= minimum if strict_min else value < minimum):
        op = ">" if strict_min else ">="
        raise ConfigError(f"{path}.{key}: must be {op} {minimum}, got {value}")
    return value


def _get_int(node: dict, path: str, key: str, default, minimum=None):
    value = _get_number(node, path, key, default, minimum)
    if value is None:
        return None
    if int(value) != value:
        raise ConfigError(f"{path}.{key}: expected an integer, got {value!r}")
    return int(value)


def _get_bool(node: dict, path: str, key: str, default: bool) -> bool:
    value = node.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected a boolean, got {value!r}")
    return value


def _get_str(node: dict, path: str, key: str, default=None):
    value = node.get(key, default)
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f"{path}.{key}: expected a string, got {value!r}")
    return value


def _existing_path(raw: str, path: str, root: Path) -> Path:
    candidate = Path(raw)
    if not candidate.is_absolute():
        candidate = root / candidate
    if not candidate.exists():
        raise ConfigError(f"{path}: referenced path does not exist: {candidate}")
    return candidate


def _parse_provider(node, path: str, role: str, root: Path) -> ProviderSpec:
    node = _expect_mapping(node, path)
    fixture_raw = _get_str(node, path, "fixture")
    endpoint = _get_str(node, path, "endpoint")
    env_var = ENV_ENDPOINT_OVERRIDES.get(role)
    if env_var and os.environ.get(env_var):
        endpoint = os.environ[env_var]
        fixture_raw = None
    if (fixture_raw is None) == (endpoint is None):
        raise ConfigError(f"{path}: exactly one of fixture or endpoint is required")
    fixture = _existing_path(fixture_raw, f"{path}.fixture", root) if fixture_raw else None
    return ProviderSpec(
        fixture=fixture,
        endpoint=endpoint,
        stateless=_get_bool(node, path, "stateless", False),
    )


def parse_config(raw: dict, root: Path) -> RunConfig:
    raw = _expect_mapping(raw, "config")

    providers_node = _expect_mapping(raw.get("providers"), "providers")
    providers: dict[str, ProviderSpec] = {}
    for role in PROVIDER_ROLES:
        if role in providers_node or os.environ.get(ENV_ENDPOINT_OVERRIDES[role]):
            providers[role] = _parse_provider(providers_node.get(role), f"providers.{role}", role, root)

    guidance_node = _expect_mapping(raw.get("guidance"), "guidance")
    try:
        guidance = GuidanceConfig(
            alpha=float(_get_number(guidance_node, "guidance", "alpha", 1.0, minimum=0)),
            warmup_tokens=_get_int(guidance_node, "guidance", "warmup_tokens", 100, minimum=0),
        )
    except ValueError as exc:
        raise ConfigError(f"guidance: {exc}") from exc

    sampling_node = _expect_mapping(raw.get("sampling"), "sampling")
    try:
        sampling = SamplingConfig(
            temperature=float(
                _get_number(sampling_node, "sampling", "temperature", 0.6, minimum=0, strict_min=True)
            ),
            top_p=float(_get_number(sampling_node, "sampling", "top_p", 0.95)),
            seed=_get_int(sampling_node, "sampling", "seed", 0, minimum=0),
            greedy=_get_bool(sampling_node, "sampling", "greedy", False),
        )
    except ValueError as exc:
        raise ConfigError(f"sampling: {exc}") from exc

    decode_node = _expect_mapping(raw.get("decode"), "decode")
    mode = _get_str(decode_node, "decode", "mode", "guided")
    if mode not in ("guided", "target_only", "budget_forcing"):
        raise ConfigError(f"decode.mode: unknown mode {mode!r}")
    forcing_tokens = decode_node.get("forcing_tokens", [])
    if not isinstance(forcing_tokens, list) or any(
        isinstance(t, bool) or not isinstance(t, int) for t in forcing_tokens
    ):
        raise ConfigError("decode.forcing_tokens: expected a list of token ids")

    sweep_node = _expect_mapping(raw.get("sweep"), "sweep")
    alphas = sweep_node.get("alphas", [])
    if not isinstance(alphas, list) or any(
        isinstance(a, bool) or not isinstance(a, (int, float)) for a in alphas
    ):
        raise ConfigError("sweep.alphas: expected a list of numbers")
    if any(a < 0 for a in alphas):
        raise ConfigError("sweep.alphas: alpha values must be >= 0")

    service_node = _expect_mapping(raw.get("service"), "service")

    dataset_raw = _get_str(raw, "config", "dataset")
    vocab_raw = _get_str(raw, "config", "vocab")
    output_raw = _get_str(raw, "config", "output_dir", "out")

    cfg = RunConfig(
        providers=providers,
        guidance=guidance,
        sampling=sampling,
        max_new_tokens=_get_int(decode_node, "decode", "max_new_tokens", 8192, minimum=1),
        mode=mode,
        n_samples=_get_int(decode_node, "decode", "n_samples", 1, minimum=1),
        forcing_tokens=tuple(forcing_tokens),
        forcing_budget=_get_int(decode_node, "decode", "forcing_budget", None, minimum=0),
        record_logits=_get_bool(decode_node, "decode", "record_logits", False),
        dataset=_existing_path(dataset_raw, "dataset", root) if dataset_raw else None,
        vocab_path=_existing_path(vocab_raw, "vocab", root) if vocab_raw else None,
        output_dir=Path(output_raw) if Path(output_raw).is_absolute() else root / output_raw,
        sweep=SweepConfig(
            alphas=tuple(float(a) for a in alphas),
            no_warmup=_get_bool(sweep_node, "sweep", "no_warmup", False),
            budget_forcing=_get_bool(sweep_node, "sweep", "budget_forcing", False),
            target_only=_get_bool(sweep_node, "sweep", "target_only", False),
        ),
        service=ServiceConfig(
            host=_get_str(service_node, "service", "host", "127.0.0.1"),
            port=_get_int(service_node, "service", "port", 8390, minimum=0),
            max_concurrency=_get_int(service_node, "service", "max_concurrency", 4, minimum=1),
        ),
    )

    missing = [r for r in cfg.provider_roles_needed() if r not in cfg.providers]
    if missing:
        raise ConfigError(f"providers.{missing[0]}: required for mode {mode!r}")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML in {path}: {exc}") from exc
    return parse_config(raw or {}, root=path.parent.resolve())
