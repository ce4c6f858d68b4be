"""Corpus ingestion and curation statistics.

Loads per-dataset directories of univariate CSV series, repairs gaps by
linear interpolation, and computes the length-weighted stationarity and
spectral-predictability statistics used to sort datasets into Easy /
Medium / Hard complexity tiers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NumericError

TIER_EASY = "Easy"
TIER_MEDIUM = "Medium"
TIER_HARD = "Hard"

# Weighted-statistic thresholds separating the three tiers.
_TIER_EASY_BELOW = -15.00
_TIER_MEDIUM_BELOW = -5.00


@dataclass(frozen=True)
class SeriesRecord:
    """One univariate series, fully repaired (no NaN/Inf)."""

    id: str
    values: np.ndarray
    timestamps: np.ndarray | None
    source_dataset: str
    frequency_label: str

    def __post_init__(self) -> None:
        if self.values.ndim != 1 or len(self.values) < 1:
            raise DataError(f"record {self.id}: values must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"record {self.id}: non-finite values after ingestion")
        if self.timestamps is not None:
            if len(self.timestamps) != len(self.values):
                raise DataError(f"record {self.id}: timestamp/value length mismatch")
            if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
                raise DataError(f"record {self.id}: timestamps not strictly increasing")


@dataclass
class DatasetMeta:
    """Bookkeeping for one dataset: its member record ids and totals."""

    name: str
    domain_tag: str = ""
    records: list[str] = field(default_factory=list)
    total_points: int = 0
    variate_count: int = 0


@dataclass(frozen=True)
class CorpusStats:
    adf_weighted: float
    forecastability_weighted: float
    tier: str


@dataclass
class Corpus:
    datasets: list[DatasetMeta]
    records: dict[str, SeriesRecord]
    diagnostics: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class LagPolicy:
    """Lag-order selection for the augmented unit-root regression.

    The default (fixed=None) is the deterministic length-based rule
    p = min(floor(12 * (T/100)^(1/4)), floor((T-3)/2)). A fixed order
    can be forced for short series where the automatic rule saturates.
    """

    fixed: int | None = None

    def order(self, t: int) -> int:
        if self.fixed is not None:
            if self.fixed < 0:
                raise NumericError(f"lag order must be >= 0, got {self.fixed}")
            return self.fixed
        if t < 3:
            raise NumericError(f"series too short for unit-root regression: minimum length 3, got {t}")
        return min(int(12 * (t / 100.0) ** 0.25), (t - 3) // 2)


DEFAULT_LAG_POLICY = LagPolicy()


# ---------------------------------------------------------------------------
# gap repair


def repair_gaps(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Fills gaps (NaN/Inf/None entries) by linear interpolation.

    Interior gap runs are interpolated between their bounding observed
    points; leading and trailing gaps copy the nearest observed value.
    """
    if isinstance(values, np.ndarray):
        arr = values.astype(np.float64, copy=True)
    else:
        arr = np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"expected a 1-D sequence, got shape {arr.shape}")
    observed = np.isfinite(arr)
    n_obs = int(observed.sum())
    if n_obs == 0:
        raise DataError("gap repair needs at least one observed point")
    if n_obs == len(arr):
        return arr
    idx = np.arange(len(arr), dtype=np.float64)
    return np.interp(idx, idx[observed], arr[observed])


# ---------------------------------------------------------------------------
# stationarity statistic


def _min_length(p: int) -> int:
    # n = T - 1 - p regression rows against p + 2 coefficients; one
    # residual degree of freedom is required for a defined t-statistic.
    return 2 * p + 4


def adf_statistic(values: Sequence[float] | np.ndarray, lag_policy: LagPolicy = DEFAULT_LAG_POLICY) -> float:
    """t-statistic of the level coefficient in the augmented unit-root regression.

    Regresses dy_t on [1, y_{t-1}, dy_{t-1} ... dy_{t-p}] (constant, no
    trend) and returns the OLS t-statistic of the y_{t-1} coefficient.
    More negative means more stationary.
    """
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1:
        raise NumericError(f"expected a 1-D sequence, got shape {y.shape}")
    t_len = len(y)
    if t_len >= 1 and np.ptp(y) == 0.0:
        raise NumericError("degenerate series: zero variance")
    p = lag_policy.order(t_len)
    if t_len < _min_length(p):
        raise NumericError(
            f"series too short for lag order {p}: minimum length {_min_length(p)}, got {t_len}"
        )
    dy = np.diff(y)
    # rows are t = p+1 .. T-1 in level indexing; n = T - 1 - p of them
    n = t_len - 1 - p
    response = dy[p:]
    columns = [np.ones(n), y[p:-1]]
    for i in range(1, p + 1):
        columns.append(dy[p - i : p - i + n])
    design = np.column_stack(columns)
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    k = design.shape[1]
    if rank < k:
        raise NumericError("degenerate series: collinear unit-root regression")
    resid = response - design @ coef
    dof = n - k
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.pinv(design.T @ design)
    se = math.sqrt(cov[1, 1])
    if se == 0.0:
        raise NumericError("degenerate series: zero standard error")
    return float(coef[1] / se)


# ---------------------------------------------------------------------------
# spectral predictability


def forecastability(values: Sequence[float] | np.ndarray) -> float:
    """Spectral-entropy predictability score in [0, 1].

    One minus the normalized Shannon entropy of the positive-frequency
    power spectrum (DC excluded) of the z-normalized series. Flat
    spectra (noise) score near 0; concentrated spectra score near 1.
    Constant series are defined as perfectly predictable (1).
    """
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1:
        raise NumericError(f"expected a 1-D sequence, got shape {y.shape}")
    t_len = len(y)
    if t_len < 8:
        raise NumericError(f"series too short for spectral estimate: minimum length 8, got {t_len}")
    std = float(y.std())
    if std == 0.0:
        return 1.0
    z = (y - y.mean()) / std
    spectrum = np.abs(np.fft.rfft(z)) ** 2
    power = spectrum[1:]  # positive frequencies only, DC excluded
    k = len(power)
    total = float(power.sum())
    q = power / total
    nonzero = q[q > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())
    score = 1.0 - entropy / math.log(k)
    return float(min(1.0, max(0.0, score)))


# ---------------------------------------------------------------------------
# length-weighted dataset statistics


def _weighted_stat(dataset: DatasetMeta, records: Mapping[str, SeriesRecord], stat_fn) -> float:
    if not dataset.records:
        raise DataError(f"dataset {dataset.name}: no records")
    lengths = []
    stats = []
    for rid in dataset.records:
        record = records.get(rid)
        if record is None:
            raise DataError(f"dataset {dataset.name}: unknown record id {rid}")
        try:
            stats.append(stat_fn(record.values))
        except NumericError as exc:
            raise NumericError(f"record {rid}: {exc}") from None
        lengths.append(len(record.values))
    weights = np.asarray(lengths, dtype=np.float64)
    weights /= weights.sum()
    return float(np.dot(weights, np.asarray(stats)))


def weighted_adf(
    dataset: DatasetMeta,
    records: Mapping[str, SeriesRecord],
    lag_policy: LagPolicy = DEFAULT_LAG_POLICY,
) -> float:
    """Length-weighted mean of per-record unit-root t-statistics."""
    return _weighted_stat(dataset, records, lambda v: adf_statistic(v, lag_policy))


def weighted_forecastability(dataset: DatasetMeta, records: Mapping[str, SeriesRecord]) -> float:
    """Length-weighted mean of per-record predictability scores."""
    return _weighted_stat(dataset, records, forecastability)


def assign_tier(adf_weighted: float) -> str:
    if not math.isfinite(adf_weighted):
        raise NumericError(f"tier assignment needs a finite statistic, got {adf_weighted}")
    if adf_weighted < _TIER_EASY_BELOW:
        return TIER_EASY
    if adf_weighted < _TIER_MEDIUM_BELOW:
        return TIER_MEDIUM
    return TIER_HARD


def dataset_stats(
    dataset: DatasetMeta,
    records: Mapping[str, SeriesRecord],
    lag_policy: LagPolicy = DEFAULT_LAG_POLICY,
) -> CorpusStats:
    adf = weighted_adf(dataset, records, lag_policy)
    fore = weighted_forecastability(dataset, records)
    return CorpusStats(adf_weighted=adf, forecastability_weighted=fore, tier=assign_tier(adf))


# ---------------------------------------------------------------------------
# ingestion


def _parse_cell(text: str, where: str) -> float:
    stripped = text.strip()
    if stripped == "":
        return math.nan
    try:
        value = float(stripped)
    except ValueError:
        raise DataError(f"{where}: unparseable value {stripped!r}") from None
    return value  # non-finite values count as gaps downstream


def _load_record_csv(path: Path, record_id: str, dataset: str, frequency_label: str) -> SeriesRecord:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path.name}: empty file") from None
        header = [h.strip().lower() for h in header]
        if header == ["timestamp", "value"]:
            has_timestamps = True
        elif header == ["value"]:
            has_timestamps = False
        else:
            raise DataError(f"{path.name}: header must be 'timestamp,value' or 'value', got {header}")
        values: list[float] = []
        timestamps: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path.name}:{lineno}"
            if has_timestamps:
                if len(row) != 2:
                    raise DataError(f"{where}: expected 2 columns, got {len(row)}")
                try:
                    timestamps.append(int(row[0].strip()))
                except ValueError:
                    raise DataError(f"{where}: unparseable timestamp {row[0]!r}") from None
                values.append(_parse_cell(row[1], where))
            else:
                if len(row) != 1:
                    raise DataError(f"{where}: expected 1 column, got {len(row)}")
                values.append(_parse_cell(row[0], where))
    repaired = repair_gaps(values)
    ts_arr = np.asarray(timestamps, dtype=np.int64) if has_timestamps else None
    return SeriesRecord(
        id=record_id,
        values=repaired,
        timestamps=ts_arr,
        source_dataset=dataset,
        frequency_label=frequency_label,
    )


def load_corpus(root: str | Path) -> Corpus:
    """Loads every dataset directory under a corpus root.

    A dataset directory holds manifest.csv (record_id, file,
    frequency_label) plus one CSV per record. Bad records are skipped
    and reported in the corpus diagnostics rather than failing the
    whole load; a missing or malformed manifest skips the directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    datasets: list[DatasetMeta] = []
    records: dict[str, SeriesRecord] = {}
    diagnostics: list[str] = []
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        manifest = entry / "manifest.csv"
        if not manifest.is_file():
            diagnostics.append(f"{entry.name}: no manifest.csv, skipped")
            continue
        meta = DatasetMeta(name=entry.name)
        try:
            rows = _read_manifest(manifest)
        except DataError as exc:
            diagnostics.append(f"{entry.name}: {exc}")
            continue
        for record_id, filename, frequency_label in rows:
            full_id = f"{entry.name}/{record_id}"
            try:
                record = _load_record_csv(entry / filename, full_id, entry.name, frequency_label)
            except (DataError, OSError) as exc:
                diagnostics.append(f"{full_id}: {exc}")
                continue
            if full_id in records:
                diagnostics.append(f"{full_id}: duplicate record id, later copy skipped")
                continue
            records[full_id] = record
            meta.records.append(full_id)
            meta.total_points += len(record.values)
            meta.variate_count += 1
        datasets.append(meta)
    return Corpus(datasets=datasets, records=records, diagnostics=diagnostics)


def _read_manifest(path: Path) -> list[tuple[str, str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("manifest.csv is empty") from None
        header = [h.strip().lower() for h in header]
        if header != ["record_id", "file", "frequency_label"]:
            raise DataError(f"manifest.csv header must be record_id,file,frequency_label, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"manifest.csv:{lineno}: expected 3 columns, got {len(row)}")
            rows.append((row[0].strip(), row[1].strip(), row[2].strip()))
    return rows


# ---------------------------------------------------------------------------
# reporting


_REPORT_HEADER = "name,points,variates,adf_weighted,forecastability_weighted,tier,status"


def corpus_report(corpus: Corpus, lag_policy: LagPolicy = DEFAULT_LAG_POLICY) -> str:
    """One CSV row per dataset, sorted by name; byte-deterministic."""
    lines = [_REPORT_HEADER]
    for dataset in sorted(corpus.datasets, key=lambda d: d.name):
        try:
            stats = dataset_stats(dataset, corpus.records, lag_policy)
        except (DataError, NumericError):
            lines.append(f"{dataset.name},{dataset.total_points},{dataset.variate_count},,,,incomplete")
            continue
        lines.append(
            f"{dataset.name},{dataset.total_points},{dataset.variate_count},"
            f"{stats.adf_weighted:.6f},{stats.forecastability_weighted:.6f},{stats.tier},ok"
        )
    return "\n".join(lines) + "\n"
