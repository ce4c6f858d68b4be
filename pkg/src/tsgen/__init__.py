"""Generative pre-training for univariate time series at desk scale.

The package covers the full loop: corpus curation with stationarity
and forecastability statistics, a single-series-sequence training
format, a small reverse-mode autodiff substrate with swappable
compiled kernels, a decoder-only patch transformer trained by
next-token prediction, and downstream forecasting, imputation, and
anomaly detection built on the same generative interface.
"""

from .config import RunConfig, config_text, load_config, parse_config_text, substream
from .corpus import (
    Corpus,
    LagPolicy,
    SeriesRecord,
    adf_statistic,
    assign_tier,
    corpus_report,
    forecastability,
    load_corpus,
    repair_gaps,
    weighted_adf,
    weighted_forecastability,
)
from .errors import DataError, NumericError, ShapeMismatch, TrainingAborted, TsgenError, UsageError
from .model import (
    ModelConfig,
    forecast_loss,
    forward,
    gpt_loss,
    impute_loss,
    init_params,
    model_config_from_run,
    param_count,
    predict,
    pretrain_loss,
    tokenize,
)
from .tasks import (
    AnomalySpec,
    ForecastSpec,
    ImputeSpec,
    anomaly_scores,
    autoregressive_forecast,
    flag_anomalies,
    hit_quantile,
    impute,
    make_mask,
    mae,
    mse,
    zero_shot_eval,
)
from .train import (
    Checkpoint,
    cosine_lr,
    exponential_lr,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .windows import batch_stream, normalize_and_split, pool_from_corpus, sample_window

__version__ = "0.1.0"

__all__ = [
    "AnomalySpec",
    "Checkpoint",
    "Corpus",
    "DataError",
    "ForecastSpec",
    "ImputeSpec",
    "LagPolicy",
    "ModelConfig",
    "NumericError",
    "RunConfig",
    "SeriesRecord",
    "ShapeMismatch",
    "TrainingAborted",
    "TsgenError",
    "UsageError",
    "adf_statistic",
    "anomaly_scores",
    "assign_tier",
    "autoregressive_forecast",
    "batch_stream",
    "config_text",
    "corpus_report",
    "cosine_lr",
    "exponential_lr",
    "finetune",
    "flag_anomalies",
    "forecast_loss",
    "forecastability",
    "forward",
    "gpt_loss",
    "hit_quantile",
    "impute",
    "impute_loss",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_corpus",
    "mae",
    "make_mask",
    "model_config_from_run",
    "mse",
    "normalize_and_split",
    "param_count",
    "parse_config_text",
    "pool_from_corpus",
    "predict",
    "pretrain",
    "pretrain_loss",
    "repair_gaps",
    "sample_window",
    "save_checkpoint",
    "substream",
    "tokenize",
    "weighted_adf",
    "weighted_forecastability",
    "zero_shot_eval",
]
