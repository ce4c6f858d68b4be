"""Pooling, normalization, and window sampling tests.

Uniformity of the flattened position draw is checked with a chi-square
test over a small pool where every (record, start) cell is enumerable.
"""

from __future__ import annotations

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from tsgen import DataError, UsageError
from tsgen.config import substream
from tsgen.corpus import load_corpus
from tsgen.windows import (
    STD_FLOOR,
    TRAIN_FRACTION,
    NormalizationStats,
    PooledSeries,
    batch_stream,
    build_pool,
    min_series_length,
    normalize_and_split,
    pool_from_corpus,
    sample_window,
    stack_batch,
    validation_windows,
)


def noise_record(rng, n, record_id="r0"):
    return make_record(rng.normal(size=n), record_id=record_id)


def record_with_positions(rng, ns, positions, record_id):
    """Builds a record with exactly `positions` valid training starts."""
    boundary = ns + positions - 1
    n = boundary
    while int(TRAIN_FRACTION * n) < boundary:
        n += 1
    if int(TRAIN_FRACTION * n) != boundary:
        raise AssertionError("no length realizes the requested boundary")
    return noise_record(rng, n, record_id=record_id)


# ---------------------------------------------------------------------------
# minimum length and the 9:1 split


def test_min_series_length_examples():
    assert min_series_length(672) == 747
    assert min_series_length(9) == 10
    assert min_series_length(768) == 854


@given(ns=st.integers(min_value=1, max_value=5000))
@settings(max_examples=200, deadline=None)
def test_min_series_length_admits_one_window(ns):
    n = min_series_length(ns)
    assert int(TRAIN_FRACTION * n) >= ns
    assert n == math.ceil(ns / TRAIN_FRACTION)


def test_split_boundary_is_floor_of_nine_tenths(rng):
    for n in (10, 100, 101, 107, 999):
        pooled = normalize_and_split(noise_record(rng, n), ns=4)
        assert pooled.split_boundary == int(0.9 * n)


def test_training_split_is_z_normalized(rng):
    pooled = normalize_and_split(noise_record(rng, 500), ns=8)
    train = pooled.values[: pooled.split_boundary]
    assert abs(train.mean()) < 1e-6
    assert abs(train.std() - 1.0) < 1e-6


def test_whole_series_uses_training_stats():
    values = np.arange(1.0, 101.0)
    pooled = normalize_and_split(make_record(values), ns=8)
    train = values[:90]
    expected = (values - train.mean()) / train.std()
    np.testing.assert_allclose(pooled.values, expected, rtol=0, atol=1e-12)
    # the ramp's tail sits well above the training mean
    assert pooled.values[90:].mean() > 1.0
    assert pooled.stats == NormalizationStats(mean=train.mean(), std=train.std())


def test_normalization_is_idempotent(rng):
    first = normalize_and_split(noise_record(rng, 400), ns=8)
    again = normalize_and_split(
        make_record(first.values), ns=8
    )
    assert np.max(np.abs(again.values - first.values)) < 1e-6


def test_too_short_record_names_the_minimum(rng):
    with pytest.raises(DataError, match="minimum 747"):
        normalize_and_split(noise_record(rng, 746), ns=672)


def test_exact_minimum_length_is_admitted(rng):
    pooled = normalize_and_split(noise_record(rng, 747), ns=672)
    assert pooled.train_positions(672) == 1


def test_constant_training_split_is_rejected():
    values = np.concatenate([np.full(90, 3.0), np.arange(10.0)])
    with pytest.raises(DataError, match="constant training split"):
        normalize_and_split(make_record(values), ns=8)


def test_build_pool_skips_bad_records_with_diagnostics(rng):
    records = [
        noise_record(rng, 300, record_id="good"),
        make_record(np.zeros(300), record_id="flat"),
        noise_record(rng, 5, record_id="short"),
    ]
    pool = build_pool(records, ns=8)
    assert [s.record_id for s in pool.series] == ["good"]
    assert len(pool.diagnostics) == 2
    assert any("flat" in d for d in pool.diagnostics)
    assert any("short" in d for d in pool.diagnostics)


def test_pool_from_corpus_orders_and_rejects_empty(rng, tmp_path):
    from test_corpus import _write_dataset

    _write_dataset(tmp_path, "alpha", {"b": rng.normal(size=200), "a": rng.normal(size=200)})
    corpus = load_corpus(tmp_path)
    pool = pool_from_corpus(corpus, ns=8)
    assert [s.record_id for s in pool.series] == ["alpha/b", "alpha/a"]
    with pytest.raises(DataError, match="no series admits"):
        pool_from_corpus(corpus, ns=50000)


# ---------------------------------------------------------------------------
# training window sampling


def test_single_position_pool_always_yields_start_zero(rng):
    pool = build_pool([noise_record(rng, min_series_length(96))], ns=96)
    for _ in range(20):
        w = sample_window(pool, 96, rng)
        assert (w.record_id, w.start) == ("r0", 0)
        assert len(w.values) == 96


def test_sampling_never_crosses_the_split_boundary(rng):
    pool = build_pool(
        [noise_record(rng, n, record_id=f"r{n}") for n in (60, 100, 250)], ns=16
    )
    boundaries = {s.record_id: s.split_boundary for s in pool.series}
    for _ in range(2000):
        w = sample_window(pool, 16, rng)
        assert w.start >= 0
        assert w.start + 16 <= boundaries[w.record_id]


def test_sampling_frequency_is_proportional_to_positions(rng):
    few = record_with_positions(rng, 20, 10, "few")
    many = record_with_positions(rng, 20, 30, "many")
    pool = build_pool([few, many], ns=20)
    assert [s.train_positions(20) for s in pool.series] == [10, 30]
    draw = substream(11, "freq")
    hits = sum(sample_window(pool, 20, draw).record_id == "few" for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.02


def test_start_positions_are_uniform_chi_square(rng):
    from scipy import stats

    pool = build_pool(
        [record_with_positions(rng, 20, 10, "few"), record_with_positions(rng, 20, 30, "many")],
        ns=20,
    )
    cells = {}
    draw = substream(5, "chi")
    for _ in range(100_000):
        w = sample_window(pool, 20, draw)
        key = (w.record_id, w.start)
        cells[key] = cells.get(key, 0) + 1
    assert len(cells) == 40
    observed = np.array(list(cells.values()))
    assert stats.chisquare(observed).pvalue > 0.01


def test_sample_window_is_deterministic(rng):
    pool = build_pool([noise_record(rng, n, record_id=f"r{n}") for n in (80, 120)], ns=12)
    g1, g2 = substream(3, "s"), substream(3, "s")
    seq1 = [(w.record_id, w.start) for w in (sample_window(pool, 12, g1) for _ in range(50))]
    seq2 = [(w.record_id, w.start) for w in (sample_window(pool, 12, g2) for _ in range(50))]
    assert seq1 == seq2


def test_window_values_are_copies(rng):
    pool = build_pool([noise_record(rng, 100)], ns=8)
    w = sample_window(pool, 8, rng)
    before = pool.series[0].values[w.start : w.start + 8].copy()
    w.values[:] = 0.0
    np.testing.assert_array_equal(pool.series[0].values[w.start : w.start + 8], before)


def test_exhausted_pool_raises(rng):
    pool = build_pool([noise_record(rng, 100)], ns=8)
    with pytest.raises(DataError, match="exhausted"):
        sample_window(pool, 95, rng)


# ---------------------------------------------------------------------------
# batch streams


def drain(stream, n):
    return [next(stream) for _ in range(n)]


def batch_triples(batches):
    return [[(w.record_id, w.start, w.values.tobytes()) for w in b] for b in batches]


def test_local_one_shard_equals_global(rng):
    pool = build_pool([noise_record(rng, n, record_id=f"r{n}") for n in (90, 150, 333)], ns=16)
    g = drain(batch_stream(pool, 16, 8, "global", seed=7), 25)
    l = drain(batch_stream(pool, 16, 8, "local", seed=7, shards=1), 25)
    assert batch_triples(g) == batch_triples(l)


def test_identical_seed_gives_byte_identical_stream(rng):
    pool = build_pool([noise_record(rng, n, record_id=f"r{n}") for n in (90, 150)], ns=16)
    a = drain(batch_stream(pool, 16, 8, "global", seed=3), 20)
    b = drain(batch_stream(pool, 16, 8, "global", seed=3), 20)
    assert batch_triples(a) == batch_triples(b)
    c = drain(batch_stream(pool, 16, 8, "global", seed=4), 20)
    assert batch_triples(a) != batch_triples(c)


def test_explicit_rng_matches_seed_derivation(rng):
    pool = build_pool([noise_record(rng, 200)], ns=16)
    by_seed = drain(batch_stream(pool, 16, 4, "global", seed=9), 10)
    by_rng = drain(batch_stream(pool, 16, 4, "global", rng=substream(9, "sampler")), 10)
    assert batch_triples(by_seed) == batch_triples(by_rng)


def test_local_batches_stay_within_one_shard(rng):
    records = [noise_record(rng, 120 + 7 * i, record_id=f"series_{i}") for i in range(9)]
    pool = build_pool(records, ns=16)
    stream = batch_stream(pool, 16, 16, "local", seed=2, shards=3)
    seen_shards = []
    for batch in drain(stream, 30):
        shards = {zlib.crc32(w.record_id.encode()) % 3 for w in batch}
        assert len(shards) == 1
        seen_shards.append(shards.pop())
    # round-robin visits every populated shard
    assert set(seen_shards) == {zlib.crc32(r.id.encode()) % 3 for r in records}


def test_local_round_robin_cycles_shards(rng):
    records = [noise_record(rng, 150, record_id=f"series_{i}") for i in range(6)]
    pool = build_pool(records, ns=16)
    stream = batch_stream(pool, 16, 4, "local", seed=2, shards=2)
    order = []
    for batch in drain(stream, 8):
        order.append(zlib.crc32(batch[0].record_id.encode()) % 2)
    assert order == order[:2] * 4
    assert set(order) == {0, 1}


def test_global_scan_satisfies_window_invariants(rng):
    records = [noise_record(rng, n, record_id=f"r{n}") for n in (70, 130, 400)]
    pool = build_pool(records, ns=16)
    boundaries = {s.record_id: s.split_boundary for s in pool.series}
    windows = [w for b in drain(batch_stream(pool, 16, 32, "global", seed=0), 100) for w in b]
    assert len(windows) == 3200
    for w in windows:
        assert len(w.values) == 16
        assert np.all(np.isfinite(w.values))
        assert 0 <= w.start and w.start + 16 <= boundaries[w.record_id]


def test_more_shards_than_series_is_an_error(rng):
    pool = build_pool([noise_record(rng, 100), noise_record(rng, 100, record_id="r1")], ns=8)
    with pytest.raises(UsageError, match="shards"):
        batch_stream(pool, 8, 4, "local", seed=0, shards=3)


@pytest.mark.parametrize("bad", [0, -2])
def test_batch_size_must_be_positive(rng, bad):
    pool = build_pool([noise_record(rng, 100)], ns=8)
    with pytest.raises(UsageError, match="batch_size"):
        batch_stream(pool, 8, bad, "global", seed=0)


def test_unknown_shuffle_mode_is_an_error(rng):
    pool = build_pool([noise_record(rng, 100)], ns=8)
    with pytest.raises(UsageError, match="shuffle_mode"):
        batch_stream(pool, 8, 4, "sorted", seed=0)


# ---------------------------------------------------------------------------
# validation windows


def test_validation_windows_start_at_boundary_minus_segment(rng):
    pooled = normalize_and_split(noise_record(rng, 100), ns=8)
    pool = build_pool([noise_record(rng, 100)], ns=8)
    windows = validation_windows(pool, ns=8, segment_len=4)
    starts = [w.start for w in windows]
    assert starts[0] == pooled.split_boundary - 4
    assert starts == list(range(86, 93, 4))
    for w in windows:
        assert len(w.values) == 8


def test_validation_windows_clamp_base_to_zero():
    series = PooledSeries(
        record_id="tiny",
        values=np.arange(12.0),
        split_boundary=2,
        stats=NormalizationStats(0.0, 1.0),
    )
    pool_like = build_pool([], ns=4)
    pool_like.series.append(series)
    windows = validation_windows(pool_like, ns=4, segment_len=4)
    assert [w.start for w in windows] == [0, 4, 8]


def test_validation_window_limit_keeps_even_subset(rng):
    pool = build_pool([noise_record(rng, 500)], ns=8)
    full = validation_windows(pool, ns=8, segment_len=2)
    kept = validation_windows(pool, ns=8, segment_len=2, limit=4)
    n = len(full)
    assert n > 4
    expected = [(full[(j * n) // 4].record_id, full[(j * n) // 4].start) for j in range(4)]
    assert [(w.record_id, w.start) for w in kept] == expected


def test_validation_windows_are_deterministic(rng):
    pool = build_pool([noise_record(rng, 300, record_id="a"), noise_record(rng, 200, record_id="b")], ns=8)
    one = validation_windows(pool, ns=8, segment_len=4)
    two = validation_windows(pool, ns=8, segment_len=4)
    assert [(w.record_id, w.start) for w in one] == [(w.record_id, w.start) for w in two]


# ---------------------------------------------------------------------------
# batch stacking


def test_stack_batch_shape_and_dtype(rng):
    pool = build_pool([noise_record(rng, 100)], ns=8)
    batch = next(batch_stream(pool, 8, 5, "global", seed=0))
    stacked = stack_batch(batch)
    assert stacked.shape == (5, 8)
    assert stacked.dtype == np.float32
    wide = stack_batch(batch, dtype=np.float64)
    assert wide.dtype == np.float64
    np.testing.assert_allclose(wide[0], batch[0].values, atol=1e-7)


def test_std_floor_constant():
    assert STD_FLOOR == 1e-8
