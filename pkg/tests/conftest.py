"""Shared fixtures: tiny architectures and in-memory series factories."""

from __future__ import annotations

import numpy as np
import pytest

from tsgen.config import RunConfig
from tsgen.corpus import SeriesRecord
from tsgen.model import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        segment_len=4,
        max_tokens=3,
        model_dim=8,
        layers=1,
        heads=2,
        ffn_dim=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_record(values, record_id="r0", dataset="ds", frequency_label="h") -> SeriesRecord:
    values = np.asarray(values, dtype=np.float64)
    return SeriesRecord(
        id=record_id,
        values=values,
        timestamps=np.arange(len(values), dtype=np.int64),
        source_dataset=dataset,
        frequency_label=frequency_label,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def run_config() -> RunConfig:
    return RunConfig()


def ar1_series(rng: np.random.Generator, n: int, phi: float = 0.5) -> np.ndarray:
    noise = rng.normal(size=n)
    out = np.empty(n)
    out[0] = noise[0]
    for i in range(1, n):
        out[i] = phi * out[i - 1] + noise[i]
    return out


def random_walk_series(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.cumsum(rng.normal(size=n))
