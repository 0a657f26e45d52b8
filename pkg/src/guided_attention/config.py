"""Run configuration: YAML files, flag overrides and seed resolution."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import yaml

try:  # pragma: no cover - optional dependency
    from dotenv import load_dotenv
except ImportError:  # pragma: no cover
    load_dotenv = None  # type: ignore

from .attention import FusionOrder
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError, DataError

SEED_ENV = "GUIDED_ATTN_SEED"
DEFAULT_SEED = 7

# ``guidance`` section keys and the DecoderConfig fields they set.
_GUIDANCE_KEYS = {
    "self": "self_guide",
    "neighbor": "neighbor_guide",
    "alpha": "alpha",
    "order": "fusion_order",
    "arm": "use_arm",
    "in_training": "neighbor_in_training",
    "self_layers": "self_guide_layers",
    "neighbor_layers": "neighbor_guide_layers",
}


@dataclass(slots=True)
class OptimizerConfig:
    """SGD with momentum, L2 weight decay and optional global-norm clipping."""

    lr: float = 0.08
    weight_decay: float = 1e-4
    momentum: float = 0.9
    grad_clip: float | None = 5.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}.")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be nonnegative and momentum in [0, 1).")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}.")


@dataclass(slots=True)
class DataConfig:
    batch_size: int = 8
    augment: bool = True
    scale_low: float = 0.7
    scale_high: float = 1.4
    val_limit: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}.")
        if not 0 < self.scale_low <= self.scale_high:
            raise ConfigError(f"Invalid scale range [{self.scale_low}, {self.scale_high}].")


@dataclass(slots=True)
class RunConfig:
    """Everything a training or evaluation run needs besides the data."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 10
    seed: int = DEFAULT_SEED
    precision: str = "float64"
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be 'float64' or 'float32', got '{self.precision}'.")
        if self.epochs < 0 or self.jobs < 1:
            raise ConfigError("epochs must be nonnegative and jobs at least 1.")
        if self.encoder.out_dim != self.decoder.d_model:
            raise ConfigError(
                f"encoder.out_dim ({self.encoder.out_dim}) must equal decoder.d_model ({self.decoder.d_model})."
            )

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data view suitable for YAML (tuples become lists, enums strings)."""

        def _plain(value):
            if isinstance(value, FusionOrder):
                return value.value
            if isinstance(value, tuple):
                return list(value)
            return value

        out: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                out[f.name] = {k.name: _plain(getattr(value, k.name)) for k in dataclasses.fields(value)}
            else:
                out[f.name] = value
        return out


def _build(cls, section: str, values: Any):
    if values is None:
        return cls()
    if not isinstance(values, Mapping):
        raise ConfigError(f"Section '{section}' must be a mapping, got {type(values).__name__}.")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(sorted(unknown))}.")
    try:
        return cls(**values)
    except TypeError as exc:  # pragma: no cover - guarded by the name check
        raise ConfigError(f"Invalid '{section}' section: {exc}") from exc


def config_from_dict(raw: Mapping[str, Any] | None) -> RunConfig:
    """Build a :class:`RunConfig` from nested mappings.

    Sections ``encoder``, ``decoder``, ``optimizer`` and ``data`` map onto the
    dataclasses of the same name; ``guidance`` is a shorthand for the
    decoder's guidance fields and is applied last.

    Raises
    ------
    ConfigError
        For unknown sections or keys and for invalid values.
    """

    raw = dict(raw or {})
    sections = {"encoder", "decoder", "optimizer", "data", "guidance"}
    scalars = {"epochs", "seed", "precision", "jobs"}
    unknown = set(raw) - sections - scalars
    if unknown:
        raise ConfigError(f"Unknown configuration key(s): {', '.join(sorted(unknown))}.")

    decoder = _build(DecoderConfig, "decoder", raw.get("decoder"))
    guidance = raw.get("guidance") or {}
    if not isinstance(guidance, Mapping):
        raise ConfigError("Section 'guidance' must be a mapping.")
    bad = set(guidance) - set(_GUIDANCE_KEYS)
    if bad:
        raise ConfigError(f"Unknown key(s) in 'guidance': {', '.join(sorted(bad))}.")
    if guidance:
        decoder = dataclasses.replace(decoder, **{_GUIDANCE_KEYS[k]: v for k, v in guidance.items()})

    return RunConfig(
        encoder=_build(EncoderConfig, "encoder", raw.get("encoder")),
        decoder=decoder,
        optimizer=_build(OptimizerConfig, "optimizer", raw.get("optimizer")),
        data=_build(DataConfig, "data", raw.get("data")),
        **{k: raw[k] for k in scalars if k in raw},
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML (or JSON) run configuration; ``None`` gives the defaults.

    Raises
    ------
    DataError
        If the file does not exist or does not parse.
    ConfigError
        If the parsed document is not a mapping or holds invalid values.
    """

    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Config file '{path}' does not exist.")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DataError(f"Failed to parse config '{path}': {exc}") from exc
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError(f"Config '{path}' must be a mapping, got {type(raw).__name__}.")
    return config_from_dict(raw)


def with_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    """Apply dotted overrides such as ``optimizer.lr=0.01``; ``None`` values are skipped."""

    current = cfg
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.replace("__", ".").rpartition(".")
        if not section:
            current = dataclasses.replace(current, **{key: value})
            continue
        if not hasattr(current, section):
            raise ConfigError(f"Unknown configuration section '{section}'.")
        sub = getattr(current, section)
        if key not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigError(f"Unknown key '{key}' in '{section}'.")
        current = dataclasses.replace(current, **{section: dataclasses.replace(sub, **{key: value})})
    return current


def resolve_seed(flag: int | None = None, *, default: int = DEFAULT_SEED, load_env: bool = True) -> int:
    """Seed from the flag, else ``GUIDED_ATTN_SEED`` (``.env`` aware), else ``default``.

    Raises
    ------
    ConfigError
        If the environment value is not an integer.
    """

    if flag is not None:
        return int(flag)
    if load_env and load_dotenv is not None:
        load_dotenv()
    raw = os.getenv(SEED_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got '{raw}'.") from None
