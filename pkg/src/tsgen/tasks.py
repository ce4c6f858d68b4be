"""Downstream adaptation and evaluation on the generative scheme.

Every task reuses next-token generation: forecasting rolls the model
forward token by token, imputation reconstructs masked segments from
their generated next tokens, and anomaly detection scores each test
segment by its prediction error. Fine-tuning tasks plug into
train.finetune through a shared adapter interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .config import RunConfig, substream
from .corpus import Corpus
from .errors import DataError, NumericError, ShapeMismatch, UsageError
from .model import MASK_TOKEN_NAME, ModelConfig, add_mask_token, forecast_loss, impute_loss, predict
from .nn import Parameter, Tensor
from .windows import TRAIN_FRACTION, NormalizationStats

# ---------------------------------------------------------------------------
# task specifications


@dataclass(frozen=True)
class ForecastSpec:
    lookback_len: int = 672
    horizon: int = 96
    segment_len: int = 96

    def __post_init__(self) -> None:
        if self.lookback_len % self.segment_len != 0:
            raise UsageError(
                f"lookback {self.lookback_len} must be a multiple of segment length {self.segment_len}"
            )
        if self.horizon < 1:
            raise UsageError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def n_tokens(self) -> int:
        return self.lookback_len // self.segment_len


@dataclass(frozen=True)
class ImputeSpec:
    n_segments: int = 8
    segment_len: int = 24
    mask_ratio: float = 0.25

    def __post_init__(self) -> None:
        if self.n_segments < 2:
            raise UsageError(f"need at least 2 segments, got {self.n_segments}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise UsageError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.mask_count > self.n_segments - 1:
            raise UsageError(
                f"mask_ratio {self.mask_ratio} masks {self.mask_count} of {self.n_segments} segments; "
                "the first segment must stay observed"
            )

    @property
    def mask_count(self) -> int:
        return int(round(self.mask_ratio * self.n_segments))

    @property
    def window_len(self) -> int:
        return self.n_segments * self.segment_len


@dataclass(frozen=True)
class AnomalySpec:
    n_tokens: int = 7
    segment_len: int = 96
    interval: tuple[int, int] = (0, 0)  # labeled anomaly [a, b], test indices

    def __post_init__(self) -> None:
        a, b = self.interval
        if a > b or a < 0:
            raise UsageError(f"anomaly interval must satisfy 0 <= a <= b, got [{a}, {b}]")


@dataclass(frozen=True)
class ScarcityConfig:
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise UsageError(f"scarcity ratio must be in (0, 1], got {self.ratio}")


# ---------------------------------------------------------------------------
# metrics


def _paired(pred, truth, op: str) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{op}: shapes {p.shape} and {t.shape} differ")
    if p.size == 0:
        raise ShapeMismatch(f"{op}: empty inputs")
    return p, t


def mse(pred, truth) -> float:
    p, t = _paired(pred, truth, "mse")
    return float(((p - t) ** 2).mean())


def mae(pred, truth) -> float:
    p, t = _paired(pred, truth, "mae")
    return float(np.abs(p - t).mean())


# ---------------------------------------------------------------------------
# generation

forecast_objective = forecast_loss  # supervised next-token MSE over all positions
impute_objective = impute_loss  # masked-segment reconstruction MSE


def _param_dtype(params: Mapping[str, Parameter]):
    return params["embed.weight"].data.dtype


def autoregressive_forecast_batch(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    contexts: np.ndarray,
    horizon: int,
) -> np.ndarray:
    """Rolls next-token generation forward for a batch of contexts.

    contexts: (batch, lookback) with lookback a positive multiple of the
    segment length. Generates ceil(horizon / S) tokens, keeping only the
    most recent max_tokens as context, and crops the tail to exactly
    horizon points.
    """
    if horizon < 1:
        raise UsageError(f"horizon must be >= 1, got {horizon}")
    contexts = np.asarray(contexts)
    if contexts.ndim != 2:
        raise ShapeMismatch(f"expected (batch, lookback) contexts, got {contexts.shape}")
    s = config.segment_len
    b, lookback = contexts.shape
    if lookback == 0 or lookback % s != 0:
        raise ShapeMismatch(f"lookback {lookback} is not a positive multiple of segment length {s}")
    dtype = _param_dtype(params)
    tokens = contexts.reshape(b, lookback // s, s).astype(dtype)
    if tokens.shape[1] > config.max_tokens:
        tokens = tokens[:, -config.max_tokens :]
    steps = math.ceil(horizon / s)
    generated = []
    for _ in range(steps):
        out = predict(params, config, tokens)
        next_token = out[:, -1]
        generated.append(next_token)
        tokens = np.concatenate([tokens, next_token[:, None]], axis=1)
        if tokens.shape[1] > config.max_tokens:
            tokens = tokens[:, -config.max_tokens :]
    return np.concatenate(generated, axis=1)[:, :horizon]


def autoregressive_forecast(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    lookback: np.ndarray,
    horizon: int,
) -> np.ndarray:
    """Forecast of exactly ``horizon`` points from one context series."""
    lookback = np.asarray(lookback)
    if lookback.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D lookback series, got {lookback.shape}")
    return autoregressive_forecast_batch(params, config, lookback[None], horizon)[0]


# ---------------------------------------------------------------------------
# imputation


def make_mask(spec: ImputeSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean vector over segments; the first segment is never masked."""
    mask = np.zeros(spec.n_segments, dtype=bool)
    count = spec.mask_count
    if count:
        chosen = rng.choice(np.arange(1, spec.n_segments), size=count, replace=False)
        mask[chosen] = True
    return mask


def _impute_tokens(series: np.ndarray, spec: ImputeSpec) -> np.ndarray:
    series = np.asarray(series)
    if series.shape != (spec.window_len,):
        raise ShapeMismatch(
            f"imputation expects {spec.n_segments} segments of {spec.segment_len} points "
            f"({spec.window_len} total), got shape {series.shape}"
        )
    return series.reshape(spec.n_segments, spec.segment_len)


def impute(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    series: np.ndarray,
    mask: np.ndarray,
    spec: ImputeSpec,
) -> np.ndarray:
    """Fills masked segments with their generated next tokens.

    Observed segments pass through untouched; each masked segment j is
    replaced by the model's prediction row j-1 given the mask-aware
    input encoding.
    """
    tokens = _impute_tokens(series, spec)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (spec.n_segments,):
        raise ShapeMismatch(f"mask shape {mask.shape} does not match {spec.n_segments} segments")
    if mask[0]:
        raise NumericError("the first segment must stay observed")
    if not mask.any():
        return tokens.reshape(-1).copy()
    dtype = _param_dtype(params)
    out = predict(params, config, tokens[None].astype(dtype), segment_mask=mask[None])
    completed = tokens.copy()
    for j in np.flatnonzero(mask):
        completed[j] = out[0, j - 1]
    return completed.reshape(-1)


def impute_series_loss(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    series: np.ndarray,
    mask: np.ndarray,
    spec: ImputeSpec,
) -> Tensor:
    """Masked-only reconstruction loss for a single 1-D series."""
    tokens = _impute_tokens(series, spec)
    dtype = _param_dtype(params)
    return impute_loss(params, config, tokens[None].astype(dtype), np.asarray(mask, dtype=bool)[None])


# ---------------------------------------------------------------------------
# anomaly detection


def anomaly_scores(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    test_values: np.ndarray,
    spec: AnomalySpec,
) -> np.ndarray:
    """Per-segment prediction-error scores over a test series.

    Segment j (0-based) is scored as the MSE between its observed
    values and the next-token prediction from the n_tokens preceding
    segments; the first n_tokens segments have no full context and
    stay NaN (unscored).
    """
    s = spec.segment_len
    n = spec.n_tokens
    values = np.asarray(test_values)
    total_segments = len(values) // s
    if total_segments < n + 1:
        raise DataError(
            f"test series has {total_segments} full segments; scoring needs at least {n + 1}"
        )
    segments = values[: total_segments * s].reshape(total_segments, s)
    dtype = _param_dtype(params)
    contexts = np.stack([segments[j - n : j] for j in range(n, total_segments)]).astype(dtype)
    predictions = predict(params, config, contexts)[:, -1]
    scores = np.full(total_segments, np.nan)
    for offset, j in enumerate(range(n, total_segments)):
        scores[j] = mse(predictions[offset], segments[j])
    return scores


def _segment_overlaps(j: int, interval: tuple[int, int], segment_len: int) -> bool:
    a, b = interval
    return j * segment_len <= b and (j + 1) * segment_len - 1 >= a


def hit_quantile(scores: np.ndarray, interval: tuple[int, int], segment_len: int) -> float:
    """Rank fraction of the first anomaly-overlapping segment.

    Scored segments are sorted by score descending (ties broken by
    earlier index); the returned quantile is the 1-based rank of the
    first segment overlapping [a, b] divided by the scored count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    scored = [int(j) for j in np.flatnonzero(np.isfinite(scores))]
    if not scored:
        raise NumericError("no scored segments")
    if not any(_segment_overlaps(j, interval, segment_len) for j in scored):
        raise DataError(f"interval {interval} outside scored region")
    order = sorted(scored, key=lambda j: (-scores[j], j))
    for rank, j in enumerate(order, start=1):
        if _segment_overlaps(j, interval, segment_len):
            return rank / len(scored)
    raise AssertionError("unreachable: overlap verified above")


def flag_anomalies(scores: np.ndarray, alpha: float) -> set[int]:
    """Indices of the ceil(alpha * count) highest-scoring segments."""
    if not 0.0 < alpha <= 1.0:
        raise UsageError(f"alpha must be in (0, 1], got {alpha}")
    scores = np.asarray(scores, dtype=np.float64)
    scored = [int(j) for j in np.flatnonzero(np.isfinite(scores))]
    if not scored:
        return set()
    k = math.ceil(alpha * len(scored))
    order = sorted(scored, key=lambda j: (-scores[j], j))
    return set(order[:k])


# ---------------------------------------------------------------------------
# scarcity sampling


class ScarcitySampler:
    """Uniform-interval retrieval of training windows plus epoch shuffles.

    The subset is fixed by (total, ratio): indices floor(j * total / k)
    for j < k with k = max(1, floor(ratio * total)). Epoch orders are
    seeded shuffles of that fixed subset, reproducible per (seed,
    epoch).
    """

    def __init__(self, total: int, ratio: float, seed: int):
        ScarcityConfig(ratio=ratio, seed=seed)  # validates
        if total < 1:
            raise DataError("scarcity sampling needs at least one window")
        self.total = total
        self.ratio = ratio
        self.seed = seed
        k = max(1, int(ratio * total))
        self.indices = np.array([(j * total) // k for j in range(k)], dtype=np.int64)

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = substream(self.seed, "scarcity", epoch)
        return rng.permutation(self.indices)


def scarcity_subsample(total: int, ratio: float) -> np.ndarray:
    """The fixed uniform-stride subset without the shuffling wrapper."""
    return ScarcitySampler(total, ratio, seed=0).indices


# ---------------------------------------------------------------------------
# task data


@dataclass(frozen=True)
class TaskSeries:
    record_id: str
    values: np.ndarray  # normalized with train-split statistics
    boundary: int  # train/test split index (exclusive end of train)
    stats: NormalizationStats


@dataclass
class TaskData:
    series: list[TaskSeries]
    diagnostics: list[str]


def task_data_from_corpus(corpus: Corpus, min_len: int) -> TaskData:
    """Normalizes corpus records for downstream tasks (9:1 split rule)."""
    series: list[TaskSeries] = []
    diagnostics: list[str] = []
    for ds in corpus.datasets:
        for rid in ds.records:
            record = corpus.records[rid]
            n = len(record.values)
            if n < min_len:
                diagnostics.append(f"{rid}: length {n} below task minimum {min_len}")
                continue
            boundary = int(TRAIN_FRACTION * n)
            train = record.values[:boundary]
            std = float(train.std())
            if std < 1e-8:
                diagnostics.append(f"{rid}: constant training split")
                continue
            stats = NormalizationStats(mean=float(train.mean()), std=std)
            series.append(
                TaskSeries(
                    record_id=rid,
                    values=(record.values - stats.mean) / stats.std,
                    boundary=boundary,
                    stats=stats,
                )
            )
    if not series:
        raise DataError("no task series long enough: " + "; ".join(diagnostics))
    return TaskData(series=series, diagnostics=diagnostics)


def _enumerate_train_windows(data: TaskData, window_len: int) -> list[tuple[int, int]]:
    """(series index, start) pairs for stride-1 windows inside train splits."""
    out: list[tuple[int, int]] = []
    for si, ts in enumerate(data.series):
        last = ts.boundary - window_len
        out.extend((si, start) for start in range(last + 1))
    return out


def _gather(data: TaskData, refs: Sequence[tuple[int, int]], window_len: int, dtype) -> np.ndarray:
    return np.stack([data.series[si].values[start : start + window_len] for si, start in refs]).astype(dtype)


# ---------------------------------------------------------------------------
# fine-tuning adapters


class ForecastFinetuneTask:
    """Next-token fine-tuning on stride-1 lookback windows.

    Each training window holds n_tokens+1 segments: the model reads the
    first n_tokens and every prediction row is supervised. Evaluation
    rolls full autoregressive forecasts over the held-out tails.
    """

    def __init__(self, data: TaskData, cfg: RunConfig, n_tokens: int | None = None):
        self.segment_len = cfg.segment_len
        if n_tokens is None:
            n_tokens = cfg.lookback_tokens if cfg.lookback_tokens > 0 else min(7, cfg.max_tokens)
        self.n_tokens = n_tokens
        self.window_len = (n_tokens + 1) * self.segment_len
        self.data = data
        self.cfg = cfg
        self.horizon = cfg.horizon
        refs = _enumerate_train_windows(data, self.window_len)
        if not refs:
            raise DataError(f"no training windows of length {self.window_len} available")
        self.refs = refs
        self.sampler = ScarcitySampler(len(refs), cfg.scarcity_ratio, cfg.seed)

    def adapt(self, params, config, cfg):
        return params, config

    def epoch_batches(self, epoch: int) -> Iterator[np.ndarray]:
        order = self.sampler.epoch_order(epoch)
        bs = self.cfg.ft_batch_size
        for lo in range(0, len(order), bs):
            chosen = [self.refs[i] for i in order[lo : lo + bs]]
            windows = _gather(self.data, chosen, self.window_len, np.float32)
            yield windows.reshape(len(chosen), self.n_tokens + 1, self.segment_len)

    def loss(self, params, config, batch):
        return forecast_loss(params, config, batch)

    def eval_mse(self, params, config) -> float:
        return forecast_test_mse(
            params, config, self.data, self.n_tokens, self.horizon,
            stride=self.cfg.eval_stride or self.horizon,
        )


def forecast_test_mse(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    data: TaskData,
    n_tokens: int,
    horizon: int,
    stride: int,
) -> float:
    """Average forecast MSE over held-out windows of every series.

    Targets start at the train/test boundary and advance by ``stride``;
    each window's context is the n_tokens * S points preceding it.
    """
    lookback = n_tokens * config.segment_len
    total = 0.0
    count = 0
    for ts in data.series:
        contexts = []
        targets = []
        target_start = max(ts.boundary, lookback)
        while target_start + horizon <= len(ts.values):
            contexts.append(ts.values[target_start - lookback : target_start])
            targets.append(ts.values[target_start : target_start + horizon])
            target_start += stride
        if not contexts:
            continue
        forecasts = autoregressive_forecast_batch(params, config, np.stack(contexts), horizon)
        for fc, tgt in zip(forecasts, targets):
            total += mse(fc, tgt)
            count += 1
    if count == 0:
        raise DataError("no evaluation windows fit the held-out tails")
    return total / count


class ImputeFinetuneTask:
    """Denoising fine-tuning: random segment masks, masked-only loss."""

    def __init__(self, data: TaskData, cfg: RunConfig):
        self.segment_len = cfg.segment_len
        self.n_tokens = cfg.impute_segments
        self.spec = ImputeSpec(
            n_segments=cfg.impute_segments,
            segment_len=cfg.segment_len,
            mask_ratio=cfg.impute_ratio,
        )
        self.window_len = self.spec.window_len
        self.data = data
        self.cfg = cfg
        refs = _enumerate_train_windows(data, self.window_len)
        if not refs:
            raise DataError(f"no training windows of length {self.window_len} available")
        self.refs = refs
        self.sampler = ScarcitySampler(len(refs), cfg.scarcity_ratio, cfg.seed)
        self._mask_rng = substream(cfg.seed, "mask")

    def adapt(self, params, config, cfg):
        return add_mask_token(params, config, cfg.seed)

    def epoch_batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.sampler.epoch_order(epoch)
        bs = self.cfg.ft_batch_size
        for lo in range(0, len(order), bs):
            chosen = [self.refs[i] for i in order[lo : lo + bs]]
            windows = _gather(self.data, chosen, self.window_len, np.float32)
            tokens = windows.reshape(len(chosen), self.spec.n_segments, self.spec.segment_len)
            masks = np.stack([make_mask(self.spec, self._mask_rng) for _ in range(len(chosen))])
            yield tokens, masks

    def loss(self, params, config, batch):
        tokens, masks = batch
        return impute_loss(params, config, tokens, masks)

    def eval_mse(self, params, config) -> float:
        rng = substream(self.cfg.seed, "mask-eval")
        total = 0.0
        count = 0
        for ts in self.data.series:
            start = ts.boundary
            while start + self.window_len <= len(ts.values):
                window = ts.values[start : start + self.window_len]
                mask = make_mask(self.spec, rng)
                if mask.any():
                    completed = impute(params, config, window, mask, self.spec)
                    truth = window.reshape(self.spec.n_segments, self.spec.segment_len)
                    filled = completed.reshape(self.spec.n_segments, self.spec.segment_len)
                    total += mse(filled[mask], truth[mask])
                    count += 1
                start += self.window_len
        if count == 0:
            return float("nan")
        return total / count


@dataclass
class AnomalyTaskData:
    train: TaskSeries  # whole series is normal training data
    test: TaskSeries  # same normalization as train
    spec: AnomalySpec


class AnomalyFinetuneTask:
    """Next-token fine-tuning on the task's single normal series."""

    def __init__(self, data: AnomalyTaskData, cfg: RunConfig):
        self.segment_len = data.spec.segment_len
        self.n_tokens = data.spec.n_tokens
        self.window_len = (self.n_tokens + 1) * self.segment_len
        self.data = data
        self.cfg = cfg
        train_len = len(data.train.values)
        if train_len < self.window_len:
            raise DataError(
                f"training series has {train_len} points; fine-tuning needs {self.window_len}"
            )
        self.starts = np.arange(train_len - self.window_len + 1)
        self.sampler = ScarcitySampler(len(self.starts), cfg.scarcity_ratio, cfg.seed)

    def adapt(self, params, config, cfg):
        return params, config

    def epoch_batches(self, epoch: int) -> Iterator[np.ndarray]:
        order = self.sampler.epoch_order(epoch)
        bs = self.cfg.ft_batch_size
        values = self.data.train.values
        for lo in range(0, len(order), bs):
            starts = [int(self.starts[i]) for i in order[lo : lo + bs]]
            yield np.stack(
                [values[st : st + self.window_len] for st in starts]
            ).astype(np.float32).reshape(len(starts), self.n_tokens + 1, self.segment_len)

    def loss(self, params, config, batch):
        return forecast_loss(params, config, batch)

    def eval_mse(self, params, config) -> float:
        scores = anomaly_scores(params, config, self.data.test.values, self.data.spec)
        finite = scores[np.isfinite(scores)]
        return float(finite.mean()) if finite.size else float("nan")


def anomaly_task_from_dir(path: str | Path, cfg: RunConfig) -> AnomalyTaskData:
    """Loads an anomaly task: train/test records plus label.csv interval.

    The directory follows the corpus dataset convention with records
    named "train" and "test"; both are normalized with the training
    series' statistics so anomalies cannot skew the scale.
    """
    from .corpus import _load_record_csv  # same CSV convention

    path = Path(path)
    label_file = path / "label.csv"
    if not label_file.is_file():
        raise DataError(f"anomaly task {path} has no label.csv")
    lines = [ln.strip() for ln in label_file.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 2 or lines[0].lower() != "a,b":
        raise DataError(f"label.csv must hold a header 'a,b' and one interval row, got {lines}")
    try:
        a, b = (int(part) for part in lines[1].split(","))
    except ValueError:
        raise DataError(f"label.csv interval row is not two integers: {lines[1]!r}") from None
    train_rec = _load_record_csv(path / "train.csv", "train", path.name, "")
    test_rec = _load_record_csv(path / "test.csv", "test", path.name, "")
    std = float(train_rec.values.std())
    if std < 1e-8:
        raise DataError("anomaly training series is constant")
    stats = NormalizationStats(mean=float(train_rec.values.mean()), std=std)
    spec = AnomalySpec(
        n_tokens=cfg.detect_context,
        segment_len=cfg.segment_len,
        interval=(a, b),
    )
    normalize = lambda v: (v - stats.mean) / stats.std
    train = TaskSeries("train", normalize(train_rec.values), len(train_rec.values), stats)
    test = TaskSeries("test", normalize(test_rec.values), 0, stats)
    return AnomalyTaskData(train=train, test=test, spec=spec)


# ---------------------------------------------------------------------------
# zero-shot evaluation


@dataclass(frozen=True)
class ZeroShotResult:
    avg_mse: float
    windows: int
    lookback_len: int


def zero_shot_eval(
    params: Mapping[str, Parameter],
    config: ModelConfig,
    test_values: np.ndarray,
    pred_len: int = 96,
    lookback_len: int | None = None,
) -> ZeroShotResult:
    """Average MSE over every stride-1 predict window in a test split.

    The lookback defaults to the longest multiple of S that fits both
    the model context and the available history before each target.
    """
    test_values = np.asarray(test_values)
    if pred_len < 1:
        raise UsageError(f"pred_len must be >= 1, got {pred_len}")
    s = config.segment_len
    test_len = len(test_values)
    if lookback_len is None:
        lookback_len = s * min(config.max_tokens, (test_len - pred_len) // s)
    if lookback_len < s or lookback_len % s != 0:
        raise DataError(
            f"test split of {test_len} points cannot host a lookback multiple of {s} plus {pred_len} targets"
        )
    count = test_len - lookback_len - pred_len + 1
    if count < 1:
        raise DataError(
            f"test split of {test_len} points is shorter than lookback {lookback_len} + horizon {pred_len}"
        )
    total = 0.0
    for start in range(count):
        context = test_values[start : start + lookback_len]
        target = test_values[start + lookback_len : start + lookback_len + pred_len]
        forecast = autoregressive_forecast(params, config, context, pred_len)
        total += mse(forecast, target)
    return ZeroShotResult(avg_mse=total / count, windows=count, lookback_len=lookback_len)
