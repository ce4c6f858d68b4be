"""Single-series sequence pooling and window sampling.

Converts repaired univariate records into one flat pool: each series is
split 9:1 into train/validation portions, z-normalized with statistics
from its training portion only, and sampled as fixed-length windows
with every valid training start position equally likely.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .config import substream
from .corpus import Corpus, SeriesRecord
from .errors import DataError, UsageError

STD_FLOOR = 1e-8
TRAIN_FRACTION = 0.9


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float  # floored at STD_FLOOR


@dataclass(frozen=True)
class PooledSeries:
    record_id: str
    values: np.ndarray  # whole series, normalized with training-split stats
    split_boundary: int  # end of the training portion, exclusive
    stats: NormalizationStats

    def train_positions(self, ns: int) -> int:
        """Number of valid training window starts for window length ns."""
        return max(0, self.split_boundary - ns + 1)


@dataclass(frozen=True)
class S3Window:
    values: np.ndarray  # exactly ns points from one pooled series
    record_id: str
    start: int


@dataclass
class WindowPool:
    series: list[PooledSeries]
    window_len: int
    diagnostics: list[str] = field(default_factory=list)


def min_series_length(ns: int) -> int:
    return math.ceil(ns / TRAIN_FRACTION)


def normalize_and_split(record: SeriesRecord, ns: int) -> PooledSeries:
    """Splits 9:1 and z-normalizes the whole series with training stats.

    Series whose training portion cannot host one window, or whose
    training portion is (numerically) constant, are rejected; callers
    building a pool turn that into a skip-with-diagnostic.
    """
    n = len(record.values)
    needed = min_series_length(ns)
    if n < needed:
        raise DataError(f"record {record.id}: length {n} below minimum {needed} for window length {ns}")
    boundary = int(TRAIN_FRACTION * n)
    train = record.values[:boundary]
    mean = float(train.mean())
    std = float(train.std())
    if std < STD_FLOOR:
        raise DataError(f"record {record.id}: constant training split")
    stats = NormalizationStats(mean=mean, std=max(std, STD_FLOOR))
    normalized = (record.values - stats.mean) / stats.std
    return PooledSeries(
        record_id=record.id,
        values=normalized,
        split_boundary=boundary,
        stats=stats,
    )


def build_pool(records: Iterable[SeriesRecord], ns: int) -> WindowPool:
    """Pools every admissible record, collecting skip diagnostics."""
    series: list[PooledSeries] = []
    diagnostics: list[str] = []
    for record in records:
        try:
            series.append(normalize_and_split(record, ns))
        except DataError as exc:
            diagnostics.append(str(exc))
    return WindowPool(series=series, window_len=ns, diagnostics=diagnostics)


def pool_from_corpus(corpus: Corpus, ns: int) -> WindowPool:
    """Pools corpus records in dataset order, then manifest order."""
    ordered = [corpus.records[rid] for ds in corpus.datasets for rid in ds.records]
    pool = build_pool(ordered, ns)
    if not pool.series:
        detail = "; ".join(pool.diagnostics) if pool.diagnostics else "corpus has no records"
        raise DataError(f"no series admits a window of length {ns}: {detail}")
    return pool


# ---------------------------------------------------------------------------
# sampling


def _position_table(series: list[PooledSeries], ns: int) -> tuple[np.ndarray, int]:
    counts = np.array([s.train_positions(ns) for s in series], dtype=np.int64)
    return np.cumsum(counts), int(counts.sum())


def _window_at(series: PooledSeries, start: int, ns: int) -> S3Window:
    return S3Window(
        values=series.values[start : start + ns].copy(),
        record_id=series.record_id,
        start=start,
    )


def sample_window(pool: WindowPool, ns: int, rng: np.random.Generator) -> S3Window:
    """Draws one training window, uniform over all valid start positions.

    Flattening the two-level draw (series proportional to its position
    count, then uniform within) into one integer draw over the pooled
    position space gives the identical distribution with one rng call.
    """
    cumulative, total = _position_table(pool.series, ns)
    if total == 0:
        raise DataError(f"pool exhausted for window length {ns}")
    flat = int(rng.integers(total))
    idx = int(np.searchsorted(cumulative, flat, side="right"))
    prev = int(cumulative[idx - 1]) if idx > 0 else 0
    return _window_at(pool.series[idx], flat - prev, ns)


def _shard_of(record_id: str, shards: int) -> int:
    return zlib.crc32(record_id.encode("utf-8")) % shards


def batch_stream(
    pool: WindowPool,
    ns: int,
    batch_size: int,
    shuffle_mode: str = "global",
    seed: int = 0,
    shards: int = 1,
    *,
    rng: np.random.Generator | None = None,
) -> Iterator[list[S3Window]]:
    """Infinite deterministic stream of window batches.

    Global mode draws every batch from the whole pool. Local mode
    partitions series into ``shards`` groups by record-id hash and
    draws each successive batch from the next non-empty group in
    round-robin order; with one shard it degenerates to global mode.
    An explicit rng overrides the one derived from seed (the training
    loop passes its own so it can serialize the final state).
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle_mode not in ("global", "local"):
        raise UsageError(f"shuffle_mode must be global or local, got {shuffle_mode!r}")
    k = 1 if shuffle_mode == "global" else shards
    if k > len(pool.series):
        raise UsageError(f"local shuffle with {k} shards needs >= {k} series, pool has {len(pool.series)}")
    groups: list[list[PooledSeries]] = [[] for _ in range(k)]
    for s in pool.series:
        groups[_shard_of(s.record_id, k)].append(s)
    tables = [_position_table(g, ns) for g in groups]
    active = [i for i in range(k) if tables[i][1] > 0]
    if not active:
        raise DataError(f"pool exhausted for window length {ns}")
    if rng is None:
        rng = substream(seed, "sampler")

    def generate() -> Iterator[list[S3Window]]:
        batch_index = 0
        while True:
            shard = active[batch_index % len(active)]
            group = groups[shard]
            cumulative, total = tables[shard]
            flats = rng.integers(total, size=batch_size)
            batch = []
            for flat in flats:
                idx = int(np.searchsorted(cumulative, flat, side="right"))
                prev = int(cumulative[idx - 1]) if idx > 0 else 0
                batch.append(_window_at(group[idx], int(flat) - prev, ns))
            yield batch
            batch_index += 1

    return generate()


def validation_windows(
    pool: WindowPool,
    ns: int,
    segment_len: int,
    limit: int = 0,
) -> list[S3Window]:
    """Deterministic validation windows from the 10% tails.

    Starts at split_boundary - segment_len per series (so all predicted
    segments lie in the tail) and advances by segment_len. A positive
    limit keeps an evenly spaced subset.
    """
    out: list[S3Window] = []
    for series in pool.series:
        base = max(0, series.split_boundary - segment_len)
        last = len(series.values) - ns
        for start in range(base, last + 1, segment_len):
            out.append(_window_at(series, start, ns))
    if limit and len(out) > limit:
        keep = [out[(j * len(out)) // limit] for j in range(limit)]
        out = keep
    return out


def stack_batch(batch: list[S3Window], dtype=np.float32) -> np.ndarray:
    """Stacks windows into a (batch, ns) array of the training dtype."""
    return np.stack([w.values for w in batch]).astype(dtype)
