"""Optimization loops, learning-rate schedules, and checkpoint I/O.

Pre-training runs the next-token objective over the sampled window
stream with cosine annealing; fine-tuning runs a task-supplied
objective with per-epoch exponential decay. Both emit a Checkpoint
plus per-epoch metrics. The checkpoint format is a self-describing
binary: config text up front, parameter arrays in canonical order,
optional optimizer state, and a trailing metadata block.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from .config import RunConfig, substream
from .errors import DataError, NumericError, TrainingAborted, UsageError
from .model import (
    ModelConfig,
    canonical_parameters,
    forward,
    gpt_loss,
    init_params,
    params_from_arrays,
    pretrain_loss,
)
from .nn import Parameter, Tensor, backward, no_grad, zero_grad
from .nn import kernels as K
from .windows import WindowPool, batch_stream, stack_batch, validation_windows

MAGIC = b"TIMERCKPT"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# learning-rate schedules


def cosine_lr(step: int, total_steps: int, base: float = 5e-5, final: float = 2e-6) -> float:
    """Cosine annealing from base (step 0) to final (step total_steps)."""
    if total_steps <= 0:
        return base
    step = min(max(step, 0), total_steps)
    return final + (base - final) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def exponential_lr(epoch: int, init: float = 3e-5, decay: float = 0.5) -> float:
    """Per-epoch exponential decay: init * decay^epoch."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return init * decay**epoch


def warmup_cosine_lr(step: int, total_steps: int, warmup: int, base: float, final: float) -> float:
    """Optional linear warmup into the cosine span (warmup=0 is pure cosine)."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    return cosine_lr(step - warmup, total_steps - warmup, base, final)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    beta1: float
    beta2: float
    eps: float
    weight_decay: float


def new_optimizer_state(params: Mapping[str, Parameter], cfg: RunConfig) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        step=0,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scales all gradients in place so their joint norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        seen: set[int] = set()
        for g in grads.values():
            if id(g) not in seen:  # a gradient array may back several entries
                seen.add(id(g))
                g *= factor
    return norm


def adamw_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
) -> None:
    """Decoupled-weight-decay moment update; missing gradients count as zero."""
    state.step += 1
    bias_corr1 = 1.0 - state.beta1**state.step
    bias_corr2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        K.adamw_update(
            p.data, g, state.m[name], state.v[name],
            lr, state.beta1, state.beta2, state.eps, state.weight_decay,
            bias_corr1, bias_corr2,
        )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]  # float32, canonical order
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    opt_step: int = 0
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def scalar_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def to_params(self) -> dict[str, Parameter]:
        arrays = {name: arr.copy() for name, arr in self.arrays.items()}
        return params_from_arrays(arrays, self.config)


def checkpoint_from_params(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    state: OptimizerState | None = None,
    metadata: dict[str, str] | None = None,
) -> Checkpoint:
    names = [name for name, _ in canonical_parameters(config)]
    arrays = {name: np.ascontiguousarray(params[name].data, dtype=np.float32) for name in names}
    ckpt = Checkpoint(config=config, arrays=arrays, metadata=dict(metadata or {}))
    if state is not None:
        ckpt.opt_m = {n: np.ascontiguousarray(state.m[n], dtype=np.float32) for n in names}
        ckpt.opt_v = {n: np.ascontiguousarray(state.v[n], dtype=np.float32) for n in names}
        ckpt.opt_step = state.step
    return ckpt


_CONFIG_FIELDS = (
    ("segment_len", int),
    ("max_tokens", int),
    ("model_dim", int),
    ("layers", int),
    ("heads", int),
    ("ffn_dim", int),
    ("use_position_embedding", bool),
    ("pre_norm", bool),
    ("init_std", float),
    ("norm_eps", float),
    ("use_mask_token", bool),
)


def _config_to_text(config: ModelConfig) -> str:
    lines = []
    for name, kind in _CONFIG_FIELDS:
        value = getattr(config, name)
        if kind is bool:
            value = "true" if value else "false"
        elif kind is float:
            value = repr(float(value))
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    items: dict[str, object] = {}
    kinds = dict(_CONFIG_FIELDS)
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key not in kinds:
            raise DataError(f"checkpoint config has unknown key {key!r}")
        kind = kinds[key]
        if kind is bool:
            items[key] = value == "true"
        else:
            items[key] = kind(value)
    missing = set(kinds) - set(items)
    if missing:
        raise DataError(f"checkpoint config missing keys {sorted(missing)}")
    return ModelConfig(**items)  # type: ignore[arg-type]


def _meta_to_text(metadata: dict[str, str]) -> str:
    lines = [f"{k}={v}" for k, v in sorted(metadata.items())]
    return "\n".join(lines) + ("\n" if lines else "")


def _meta_from_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    parts: list[bytes] = [MAGIC, struct.pack("<I", ckpt.version)]
    cfg_bytes = _config_to_text(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg_bytes)))
    parts.append(cfg_bytes)
    expected = canonical_parameters(ckpt.config)
    for name, shape in expected:
        arr = ckpt.arrays.get(name)
        if arr is None:
            raise NumericError(f"checkpoint is missing parameter {name}")
        if arr.shape != shape:
            raise NumericError(f"parameter {name} has shape {arr.shape}, config implies {shape}")
        raw = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", raw.ndim))
        parts.append(struct.pack(f"<{raw.ndim}Q", *raw.shape))
        parts.append(raw.tobytes())
    has_opt = ckpt.opt_m is not None and ckpt.opt_v is not None
    parts.append(struct.pack("<B", 1 if has_opt else 0))
    if has_opt:
        parts.append(struct.pack("<Q", ckpt.opt_step))
        for name, _ in expected:
            parts.append(np.ascontiguousarray(ckpt.opt_m[name], dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(ckpt.opt_v[name], dtype="<f4").tobytes())
    meta_bytes = _meta_to_text(ckpt.metadata).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated checkpoint {self.path}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    config = _config_from_text(r.take(r.u32()).decode("utf-8"))
    expected = canonical_parameters(config)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in expected:
        stored_name = r.take(r.u32()).decode("utf-8")
        if stored_name != name:
            raise DataError(f"checkpoint parameter order mismatch: expected {name}, found {stored_name}")
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        if dims != shape:
            raise DataError(f"parameter {name} has shape {dims}, config implies {shape}")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = arr.astype(np.float32)  # owned, native-order copy
    ckpt = Checkpoint(config=config, arrays=arrays, version=version)
    if r.u8():
        ckpt.opt_step = r.u64()
        ckpt.opt_m = {}
        ckpt.opt_v = {}
        for name, shape in expected:
            count = int(np.prod(shape)) if shape else 1
            ckpt.opt_m[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
            ckpt.opt_v[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    ckpt.metadata = _meta_from_text(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(blob):
        raise DataError(f"checkpoint {path} has {len(blob) - r.pos} trailing bytes")
    return ckpt


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats]


def metrics_csv(history: Iterable[EpochStats]) -> str:
    lines = ["epoch,step,lr,train_loss,val_loss"]
    for row in history:
        lines.append(f"{row.epoch},{row.step},{row.lr:.8e},{row.train_loss:.8e},{row.val_loss:.8e}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pre-training


def _val_loss(params, config: ModelConfig, val_tokens: np.ndarray, batch_size: int) -> float:
    if val_tokens.shape[0] == 0:
        return float("nan")
    total = 0.0
    with no_grad():
        for lo in range(0, val_tokens.shape[0], batch_size):
            chunk = val_tokens[lo : lo + batch_size]
            loss = gpt_loss(forward(params, config, chunk), chunk)
            total += float(loss.data) * chunk.shape[0]
    return total / val_tokens.shape[0]


def _snapshot(params, config, state, metadata) -> Checkpoint:
    return checkpoint_from_params(params, config, state, metadata)


def persistence_val_mse(val_tokens: np.ndarray) -> float:
    """Next-token MSE of repeating the previous token, same normalizer."""
    if val_tokens.shape[0] == 0:
        return float("nan")
    b, n, s = val_tokens.shape
    diff = val_tokens[:, 1:] - val_tokens[:, :-1]
    return float((diff**2).sum()) / (b * n * s)


def pretrain(pool: WindowPool, config: ModelConfig, cfg: RunConfig) -> TrainResult:
    """Generative pre-training over the window pool.

    Cosine schedule spans epochs * batches_per_epoch steps; a
    non-finite loss or gradient aborts with the checkpoint taken at the
    last completed epoch attached to the error.
    """
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    ns = config.window_len
    params = init_params(config, cfg.seed, dtype)
    state = new_optimizer_state(params, cfg)
    rng = substream(cfg.seed, "sampler")
    stream = batch_stream(pool, ns, cfg.batch_size, cfg.shuffle_mode, cfg.seed, cfg.shards, rng=rng)
    val = validation_windows(pool, ns, config.segment_len, cfg.max_val_windows)
    val_tokens = (
        np.stack([w.values for w in val]).astype(dtype).reshape(len(val), config.max_tokens, config.segment_len)
        if val
        else np.zeros((0, config.max_tokens, config.segment_len), dtype=dtype)
    )
    total_steps = cfg.epochs * cfg.batches_per_epoch

    def meta(step: int) -> dict[str, str]:
        return {
            "source": "pretrain",
            "schedule_step": str(step),
            "schedule_total": str(total_steps),
            "seed": str(cfg.seed),
            "rng_state": json.dumps(rng.bit_generator.state, sort_keys=True),
        }

    history: list[EpochStats] = []
    last_good = _snapshot(params, config, state, meta(0))
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        last_lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.final_lr)
        for _ in range(cfg.batches_per_epoch):
            batch = next(stream)
            tokens = stack_batch(batch, dtype).reshape(len(batch), config.max_tokens, config.segment_len)
            lr = warmup_cosine_lr(step, total_steps, cfg.warmup_steps, cfg.base_lr, cfg.final_lr)
            last_lr = lr
            try:
                loss = pretrain_loss(params, config, tokens)
                backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                if cfg.clip:
                    clip_global_norm({n: g for n, g in grads.items() if g is not None}, cfg.clip_norm)
                adamw_step(params, grads, state, lr)
            except NumericError as exc:
                raise TrainingAborted(
                    f"pre-training aborted at step {step}: {exc}", checkpoint=last_good
                ) from exc
            zero_grad(list(params.values()))
            epoch_loss += float(loss.data)
            step += 1
        stats = EpochStats(
            epoch=epoch,
            step=step,
            lr=last_lr,
            train_loss=epoch_loss / cfg.batches_per_epoch,
            val_loss=_val_loss(params, config, val_tokens, cfg.batch_size),
        )
        history.append(stats)
        last_good = _snapshot(params, config, state, meta(step))
    final = last_good
    if not cfg.save_optimizer:
        final.opt_m = None
        final.opt_v = None
    return TrainResult(checkpoint=final, history=history)


# ---------------------------------------------------------------------------
# fine-tuning


class FinetuneTask(Protocol):
    """What the fine-tuning loop needs from a downstream task."""

    segment_len: int
    n_tokens: int  # context tokens the task feeds the model

    def adapt(self, params: dict[str, Parameter], config: ModelConfig, cfg: RunConfig) -> tuple[dict[str, Parameter], ModelConfig]:
        """Extends parameters/config for the task (e.g. mask embedding)."""
        ...

    def epoch_batches(self, epoch: int) -> Iterable[np.ndarray]:
        ...

    def loss(self, params: Mapping[str, Parameter], config: ModelConfig, batch: np.ndarray) -> Tensor:
        ...

    def eval_mse(self, params: Mapping[str, Parameter], config: ModelConfig) -> float:
        ...


def finetune(
    checkpoint: Checkpoint | None,
    task: FinetuneTask,
    cfg: RunConfig,
    from_scratch: bool = False,
) -> TrainResult:
    """Full-parameter fine-tuning with per-epoch exponential lr decay.

    from_scratch ignores the checkpoint weights (fresh init, same
    architecture) so transfer can be compared against a cold start.
    """
    if checkpoint is None:
        raise UsageError("finetune needs a checkpoint (from_scratch reuses its architecture)")
    config = checkpoint.config
    if config.segment_len != task.segment_len:
        raise UsageError(
            f"checkpoint segment length {config.segment_len} does not match task {task.segment_len}"
        )
    if task.n_tokens > config.max_tokens:
        raise UsageError(
            f"task needs {task.n_tokens} context tokens, checkpoint supports {config.max_tokens}"
        )
    params = init_params(config, cfg.seed) if from_scratch else checkpoint.to_params()
    params, config = task.adapt(params, config, cfg)
    state = new_optimizer_state(params, cfg)
    history: list[EpochStats] = []
    step = 0
    last_good = checkpoint_from_params(params, config, state, {"source": "finetune", "epoch": "0"})
    for epoch in range(cfg.ft_epochs):
        lr = exponential_lr(epoch, cfg.ft_lr, cfg.ft_decay)
        epoch_loss = 0.0
        n_batches = 0
        for batch in task.epoch_batches(epoch):
            try:
                loss = task.loss(params, config, batch)
                if not loss.requires_grad:  # degenerate batch (e.g. empty mask)
                    continue
                backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                if cfg.clip:
                    clip_global_norm({n: g for n, g in grads.items() if g is not None}, cfg.clip_norm)
                adamw_step(params, grads, state, lr)
            except NumericError as exc:
                raise TrainingAborted(
                    f"fine-tuning aborted at step {step}: {exc}", checkpoint=last_good
                ) from exc
            zero_grad(list(params.values()))
            epoch_loss += float(loss.data)
            n_batches += 1
            step += 1
        stats = EpochStats(
            epoch=epoch,
            step=step,
            lr=lr,
            train_loss=epoch_loss / n_batches if n_batches else float("nan"),
            val_loss=task.eval_mse(params, config),
        )
        history.append(stats)
        last_good = checkpoint_from_params(
            params, config, state, {"source": "finetune", "epoch": str(epoch + 1)}
        )
    return TrainResult(checkpoint=last_good, history=history)
