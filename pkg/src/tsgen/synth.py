"""Synthetic corpus generation for smoke tests and demos.

Four families cover the difficulty spectrum: sinusoid mixtures and
trend+seasonal series are highly forecastable, AR(1) processes are
stationary but noisy, and random walks are neither. A separate helper
emits a spike-injected anomaly-detection task directory.
"""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, substream
from .errors import UsageError

FAMILIES = ("sinusoid", "trend_seasonal", "ar1", "random_walk")

# AR(1) needs a long sample before the unit-root statistic separates
# cleanly from the random-walk family at the default lag order.
DEFAULT_LENGTHS = {
    "sinusoid": 10000,
    "trend_seasonal": 10000,
    "ar1": 20000,
    "random_walk": 10000,
}


def _family_rng(seed: int, family: str, index: int) -> np.random.Generator:
    return substream(seed, "synth", zlib.crc32(family.encode("utf-8")), index)


def sinusoid_mixture(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    values = np.zeros(length)
    for _ in range(int(rng.integers(2, 5))):
        period = float(rng.uniform(24.0, 400.0))
        amp = float(rng.uniform(0.5, 2.0))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        values += amp * np.sin(2.0 * np.pi * t / period + phase)
    return values + rng.normal(0.0, 0.05, size=length)


def trend_seasonal(rng: np.random.Generator, length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    slope = float(rng.uniform(-2.0, 2.0)) / length
    period = float(rng.uniform(48.0, 200.0))
    amp = float(rng.uniform(1.0, 3.0))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    return slope * t + amp * np.sin(2.0 * np.pi * t / period + phase) + rng.normal(0.0, 0.1, size=length)


def ar1(rng: np.random.Generator, length: int, phi: float = 0.9) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, size=length)
    values = np.empty(length)
    values[0] = noise[0]
    for i in range(1, length):
        values[i] = phi * values[i - 1] + noise[i]
    return values


def random_walk(rng: np.random.Generator, length: int) -> np.ndarray:
    return np.cumsum(rng.normal(0.0, 1.0, size=length))


_GENERATORS = {
    "sinusoid": sinusoid_mixture,
    "trend_seasonal": trend_seasonal,
    "ar1": ar1,
    "random_walk": random_walk,
}


def generate_family(family: str, seed: int, index: int, length: int) -> np.ndarray:
    if family not in _GENERATORS:
        raise UsageError(f"unknown synthetic family {family!r}; choose from {', '.join(FAMILIES)}")
    rng = _family_rng(seed, family, index)
    return _GENERATORS[family](rng, length)


def _write_record(path: Path, values: np.ndarray) -> None:
    lines = ["value"]
    lines.extend(f"{v:.8f}" for v in values)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_corpus(
    root: str | Path, cfg: RunConfig, families: Sequence[str] | None = None
) -> list[Path]:
    """Writes one dataset directory per family under ``root``.

    Each dataset holds cfg.synth_records records; cfg.synth_len
    overrides the per-family default length when positive. Output is a
    pure function of cfg.seed and independent across families.
    """
    if cfg.synth_records < 1:
        raise UsageError(f"synth_records must be >= 1, got {cfg.synth_records}")
    root = Path(root)
    written: list[Path] = []
    for family in families if families is not None else FAMILIES:
        if family not in _GENERATORS:
            raise UsageError(f"unknown synthetic family {family!r}; choose from {', '.join(FAMILIES)}")
        length = cfg.synth_len if cfg.synth_len > 0 else DEFAULT_LENGTHS[family]
        ds_dir = root / family
        ds_dir.mkdir(parents=True, exist_ok=True)
        manifest = ["record_id,file,frequency_label"]
        for index in range(cfg.synth_records):
            rid = f"{family}_{index:03d}"
            filename = f"{rid}.csv"
            _write_record(ds_dir / filename, generate_family(family, cfg.seed, index, length))
            manifest.append(f"{rid},{filename},synthetic")
        (ds_dir / "manifest.csv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
        written.append(ds_dir)
    return written


def anomaly_series(
    rng: np.random.Generator,
    train_len: int = 4800,
    test_len: int = 1920,
    spike_segment: int = 12,
    segment_len: int = 96,
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Clean training series, spiked test series, and the spike interval."""
    period = 96.0
    t_train = np.arange(train_len, dtype=np.float64)
    t_test = np.arange(train_len, train_len + test_len, dtype=np.float64)
    base = lambda t: np.sin(2.0 * np.pi * t / period) + 0.5 * np.sin(2.0 * np.pi * t / (period / 4.0))
    train = base(t_train) + rng.normal(0.0, 0.05, size=train_len)
    test = base(t_test) + rng.normal(0.0, 0.05, size=test_len)
    a = spike_segment * segment_len + segment_len // 4
    b = a + segment_len // 2 - 1
    test[a : b + 1] += rng.uniform(4.0, 6.0) * rng.choice([-1.0, 1.0])
    return train, test, (a, b)


def write_anomaly_task(root: str | Path, cfg: RunConfig) -> Path:
    """Writes an anomaly task directory: train.csv, test.csv, label.csv."""
    root = Path(root)
    task_dir = root / "anomaly_task"
    task_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(cfg.seed, "synth-anomaly")
    train, test, (a, b) = anomaly_series(rng, segment_len=cfg.segment_len)
    _write_record(task_dir / "train.csv", train)
    _write_record(task_dir / "test.csv", test)
    (task_dir / "label.csv").write_text(f"a,b\n{a},{b}\n", encoding="utf-8")
    return task_dir
