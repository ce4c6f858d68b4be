"""Run configuration: a flat key=value schema shared by every CLI entry point.

A RunConfig is the single source of tunables. It is parsed from
line-delimited ``key=value`` text (blank lines and ``#`` comments are
ignored), every key not in the schema is rejected, and the resolved
form serializes back to deterministic text so a run directory always
carries the exact configuration that produced it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from .errors import UsageError

_VALID_SHUFFLE = ("global", "local")
_VALID_PRECISION = ("f32", "f64")


@dataclass
class RunConfig:
    # model geometry
    segment_len: int = 96
    max_tokens: int = 15
    model_dim: int = 256
    layers: int = 6
    heads: int = 8
    ffn_dim: int = 0  # 0 means 2 * model_dim, resolved at construction
    use_position_embedding: bool = True
    pre_norm: bool = True
    init_std: float = 0.02
    norm_eps: float = 1e-5

    # optimization
    seed: int = 0
    batch_size: int = 256
    epochs: int = 10
    batches_per_epoch: int = 100
    base_lr: float = 5e-5
    final_lr: float = 2e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: bool = True
    clip_norm: float = 1.0
    warmup_steps: int = 0
    shuffle_mode: str = "global"
    shards: int = 1
    precision: str = "f32"
    max_val_windows: int = 1024
    save_optimizer: bool = True

    # fine-tuning
    ft_lr: float = 3e-5
    ft_decay: float = 0.5
    ft_epochs: int = 10
    ft_batch_size: int = 64
    scarcity_ratio: float = 1.0
    impute_segments: int = 8
    impute_ratio: float = 0.25
    detect_context: int = 7
    detect_alpha: float = 0.1

    # inference and evaluation
    horizon: int = 96
    lookback_tokens: int = 0  # 0 means the task default (7 tokens, capped at max_tokens)
    eval_stride: int = 0  # 0 means horizon

    # corpus statistics
    adf_lags: int = 0  # 0 means the automatic length-based rule

    # synthetic data generation
    synth_records: int = 8
    synth_len: int = 0  # 0 means the family default

    def __post_init__(self) -> None:
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.model_dim
        self.validate()

    def validate(self) -> None:
        positive = (
            "segment_len", "max_tokens", "model_dim", "layers", "heads",
            "ffn_dim", "batch_size", "batches_per_epoch", "ft_batch_size",
            "impute_segments", "detect_context", "horizon",
        )
        for key in positive:
            if getattr(self, key) <= 0:
                raise UsageError(f"config key {key} must be positive, got {getattr(self, key)}")
        non_negative = (
            "seed", "epochs", "ft_epochs", "warmup_steps", "adf_lags",
            "lookback_tokens", "eval_stride", "max_val_windows", "synth_len",
        )
        for key in non_negative:
            if getattr(self, key) < 0:
                raise UsageError(f"config key {key} must be >= 0, got {getattr(self, key)}")
        if self.model_dim % self.heads != 0:
            raise UsageError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if self.shuffle_mode not in _VALID_SHUFFLE:
            raise UsageError(
                f"shuffle_mode must be one of {_VALID_SHUFFLE}, got {self.shuffle_mode!r}"
            )
        if self.precision not in _VALID_PRECISION:
            raise UsageError(
                f"precision must be one of {_VALID_PRECISION}, got {self.precision!r}"
            )
        if self.shards < 1:
            raise UsageError(f"shards must be >= 1, got {self.shards}")
        if not 0.0 < self.scarcity_ratio <= 1.0:
            raise UsageError(f"scarcity_ratio must be in (0, 1], got {self.scarcity_ratio}")
        if not 0.0 <= self.impute_ratio < 1.0:
            raise UsageError(f"impute_ratio must be in [0, 1), got {self.impute_ratio}")
        if not 0.0 < self.detect_alpha <= 1.0:
            raise UsageError(f"detect_alpha must be in (0, 1], got {self.detect_alpha}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise UsageError(f"config key {key} expects true/false, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key} expects a {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Builds a RunConfig from key=value lines plus optional override pairs."""
    items: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r} on line {lineno}")
        items[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        items[key] = _coerce(key, value)
    return RunConfig(**items)


def load_config(path: str, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, overrides)


def config_text(cfg: RunConfig) -> str:
    """Serializes every field, sorted by key, one key=value per line."""
    lines = []
    for name in sorted(_FIELD_TYPES):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Derives a named random stream from the run seed.

    Every consumer of randomness (init, sampling, masking, ...) pulls its
    own stream, so adding a new consumer never perturbs existing ones.
    Extra integers (e.g. an epoch number) key further sub-streams.
    """
    if seed < 0:
        raise UsageError(f"seed must be >= 0, got {seed}")
    entropy = [seed, zlib.crc32(name.encode("utf-8"))] + [int(e) for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
