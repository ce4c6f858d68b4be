"""Command-line surface wiring curation, training, adaptation, and evaluation.

Every subcommand resolves one flat key=value run configuration
(defaults, then --config file, then --set overrides, then --seed),
writes it verbatim to <out-dir>/resolved.cfg, and exits 0 on success,
1 on usage errors, 2 on data errors, and 3 on numeric failures.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import synth
from .config import RunConfig, config_text, load_config, parse_config_text, substream
from .corpus import DEFAULT_LAG_POLICY, LagPolicy, corpus_report, load_corpus
from .errors import DataError, NumericError, TrainingAborted, UsageError
from .model import init_params, model_config_from_run, param_count, pretrain_loss
from .nn import backend, finite_diff_check
from .tasks import (
    AnomalyFinetuneTask,
    ForecastFinetuneTask,
    ImputeFinetuneTask,
    ImputeSpec,
    anomaly_scores,
    anomaly_task_from_dir,
    autoregressive_forecast,
    flag_anomalies,
    hit_quantile,
    impute,
    make_mask,
    task_data_from_corpus,
    zero_shot_eval,
)
from .train import finetune, load_checkpoint, metrics_csv, pretrain, save_checkpoint
from .windows import TRAIN_FRACTION, pool_from_corpus

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_PARAM_LIMIT = 50_000

# Finite differences walk every scalar twice, so the bare subcommand
# checks a one-layer model instead of the desk-scale default config.
# init_std 0.2 keeps gradient magnitudes well above the difference
# quotient's round-off floor; at 0.02 the query/key gradients shrink to
# ~1e-8 and the comparison measures noise instead of the chain rule.
TINY_GRADCHECK_CFG = """
segment_len=4
max_tokens=3
model_dim=8
layers=1
heads=2
ffn_dim=16
init_std=0.2
precision=f64
"""


@dataclass
class OutDirs:
    root: Path
    checkpoints: Path
    reports: Path
    predictions: Path


def _prepare_out(root: Path, cfg: RunConfig) -> OutDirs:
    out = OutDirs(
        root=root,
        checkpoints=root / "checkpoints",
        reports=root / "reports",
        predictions=root / "predictions",
    )
    for d in (out.root, out.checkpoints, out.reports, out.predictions):
        d.mkdir(parents=True, exist_ok=True)
    (out.root / "resolved.cfg").write_text(config_text(cfg), encoding="utf-8")
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is not None:
        return load_config(args.config, overrides)
    if args.command == "gradcheck":
        return parse_config_text(TINY_GRADCHECK_CFG, overrides)
    return parse_config_text("", overrides)


def _lag_policy(cfg: RunConfig) -> LagPolicy:
    return LagPolicy(fixed=cfg.adf_lags) if cfg.adf_lags > 0 else DEFAULT_LAG_POLICY


def _print_diagnostics(diagnostics: list[str]) -> None:
    for line in diagnostics:
        print(f"note: {line}", file=sys.stderr)


def _fmt(value: float) -> str:
    return f"{value:.8e}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_curate(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    report = corpus_report(corpus, _lag_policy(cfg))
    path = out.reports / "corpus_report.csv"
    path.write_text(report, encoding="utf-8")
    print(report, end="")
    print(f"report written to {path}", file=sys.stderr)
    return 0


def cmd_synth(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    corpus_root = out.root / "corpus"
    wanted = [args.family] if args.family else list(synth.FAMILIES) + ["anomaly"]
    written: list[Path] = []
    series_families = [f for f in wanted if f != "anomaly"]
    if series_families:
        written.extend(synth.write_corpus(corpus_root, cfg, families=series_families))
    if "anomaly" in wanted:
        written.append(synth.write_anomaly_task(corpus_root, cfg))
    for path in written:
        print(path)
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    pool = pool_from_corpus(corpus, cfg.max_tokens * cfg.segment_len)
    _print_diagnostics(pool.diagnostics)
    config = model_config_from_run(cfg)
    print(
        f"pre-training {param_count(config)} parameters on {len(pool.series)} series "
        f"({backend} kernels)",
        file=sys.stderr,
    )
    try:
        result = pretrain(pool, config, cfg)
    except TrainingAborted as exc:
        _rescue(exc, out)
        raise
    ckpt_path = out.checkpoints / "pretrain.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    metrics_path = out.reports / "pretrain_metrics.csv"
    metrics_path.write_text(metrics_csv(result.history), encoding="utf-8")
    if result.history:
        last = result.history[-1]
        print(f"final train loss {_fmt(last.train_loss)}, val loss {_fmt(last.val_loss)}")
    print(f"checkpoint written to {ckpt_path}")
    print(f"metrics written to {metrics_path}", file=sys.stderr)
    return 0


def _rescue(exc: TrainingAborted, out: OutDirs) -> None:
    if exc.checkpoint is not None:
        path = out.checkpoints / "aborted.ckpt"
        save_checkpoint(exc.checkpoint, path)
        print(f"training aborted; last good state saved to {path}", file=sys.stderr)


def _finetune_task(args: argparse.Namespace, cfg: RunConfig):
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    if args.task == "forecast":
        n_tokens = cfg.lookback_tokens if cfg.lookback_tokens > 0 else min(7, cfg.max_tokens)
        window_len = (n_tokens + 1) * cfg.segment_len
    else:
        window_len = cfg.impute_segments * cfg.segment_len
    min_len = math.ceil(window_len / TRAIN_FRACTION)
    data = task_data_from_corpus(corpus, min_len)
    _print_diagnostics(data.diagnostics)
    if args.task == "forecast":
        return ForecastFinetuneTask(data, cfg)
    return ImputeFinetuneTask(data, cfg)


def cmd_finetune(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    task = _finetune_task(args, cfg)
    try:
        result = finetune(checkpoint, task, cfg, from_scratch=args.from_scratch)
    except TrainingAborted as exc:
        _rescue(exc, out)
        raise
    ckpt_path = out.checkpoints / f"finetune_{args.task}.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    metrics_path = out.reports / f"finetune_{args.task}_metrics.csv"
    metrics_path.write_text(metrics_csv(result.history), encoding="utf-8")
    if result.history:
        print(f"final test MSE {_fmt(result.history[-1].val_loss)}")
    print(f"checkpoint written to {ckpt_path}")
    print(f"metrics written to {metrics_path}", file=sys.stderr)
    return 0


def cmd_forecast(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    config = checkpoint.config
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    n_tokens = cfg.lookback_tokens if cfg.lookback_tokens > 0 else config.max_tokens
    if n_tokens > config.max_tokens:
        raise UsageError(
            f"lookback_tokens {n_tokens} exceeds the checkpoint's context of {config.max_tokens}"
        )
    lookback = n_tokens * config.segment_len
    data = task_data_from_corpus(corpus, min_len=lookback + cfg.horizon)
    _print_diagnostics(data.diagnostics)
    lines = ["record_id,t,prediction,truth"]
    forecasted = 0
    for ts in data.series:
        if args.record and ts.record_id != args.record:
            continue
        if ts.boundary < lookback or len(ts.values) - ts.boundary < cfg.horizon:
            print(f"note: {ts.record_id}: too short for the requested window", file=sys.stderr)
            continue
        context = ts.values[ts.boundary - lookback : ts.boundary]
        truth = ts.values[ts.boundary : ts.boundary + cfg.horizon]
        prediction = autoregressive_forecast(params, config, context, cfg.horizon)
        for k in range(cfg.horizon):
            pred_orig = prediction[k] * ts.stats.std + ts.stats.mean
            truth_orig = truth[k] * ts.stats.std + ts.stats.mean
            lines.append(f"{ts.record_id},{ts.boundary + k},{_fmt(pred_orig)},{_fmt(truth_orig)}")
        forecasted += 1
    if forecasted == 0:
        raise DataError("no series could host the requested lookback and horizon")
    path = out.predictions / "forecast.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{forecasted} forecasts written to {path}")
    return 0


def cmd_impute(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    config = checkpoint.config
    if not config.use_mask_token:
        raise UsageError(
            "checkpoint has no mask embedding; produce one with finetune --task impute"
        )
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    spec = ImputeSpec(
        n_segments=cfg.impute_segments,
        segment_len=config.segment_len,
        mask_ratio=cfg.impute_ratio,
    )
    data = task_data_from_corpus(corpus, min_len=math.ceil(spec.window_len / (1 - TRAIN_FRACTION)))
    _print_diagnostics(data.diagnostics)
    rng = substream(cfg.seed, "mask-eval")
    lines = ["record_id,t,imputed,truth,masked"]
    imputed_count = 0
    for ts in data.series:
        if args.record and ts.record_id != args.record:
            continue
        window = ts.values[ts.boundary : ts.boundary + spec.window_len]
        mask = make_mask(spec, rng)
        completed = impute(params, config, window, mask, spec)
        point_mask = np.repeat(mask, spec.segment_len)
        for k in range(spec.window_len):
            imputed_orig = completed[k] * ts.stats.std + ts.stats.mean
            truth_orig = window[k] * ts.stats.std + ts.stats.mean
            lines.append(
                f"{ts.record_id},{ts.boundary + k},{_fmt(imputed_orig)},"
                f"{_fmt(truth_orig)},{int(point_mask[k])}"
            )
        imputed_count += 1
    if imputed_count == 0:
        raise DataError("no series matched the requested record filter")
    path = out.predictions / "impute.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{imputed_count} imputations written to {path}")
    return 0


def cmd_detect(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    data = anomaly_task_from_dir(args.task_dir, cfg)
    task = AnomalyFinetuneTask(data, cfg)
    if cfg.ft_epochs > 0:
        try:
            result = finetune(checkpoint, task, cfg)
        except TrainingAborted as exc:
            _rescue(exc, out)
            raise
        checkpoint = result.checkpoint
        save_checkpoint(checkpoint, out.checkpoints / "detect.ckpt")
    params = checkpoint.to_params()
    scores = anomaly_scores(params, checkpoint.config, data.test.values, data.spec)
    flagged = flag_anomalies(scores, cfg.detect_alpha)
    lines = ["segment,score,flagged"]
    for j, score in enumerate(scores):
        cell = _fmt(score) if np.isfinite(score) else ""
        lines.append(f"{j},{cell},{int(j in flagged)}")
    path = out.predictions / "anomaly_scores.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    quantile = hit_quantile(scores, data.spec.interval, data.spec.segment_len)
    report = "metric,value\n" + f"hit_quantile,{quantile:.6f}\n" + f"flagged_segments,{len(flagged)}\n"
    report_path = out.reports / "detect_report.csv"
    report_path.write_text(report, encoding="utf-8")
    print(f"hit quantile {quantile:.6f}; {len(flagged)} segments flagged")
    print(f"scores written to {path}", file=sys.stderr)
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    config = checkpoint.config
    corpus = load_corpus(args.corpus)
    _print_diagnostics(corpus.diagnostics)
    min_len = math.ceil((config.segment_len + cfg.horizon) / (1 - TRAIN_FRACTION))
    data = task_data_from_corpus(corpus, min_len)
    _print_diagnostics(data.diagnostics)
    per_dataset: dict[str, tuple[float, int]] = {}
    for ts in data.series:
        dataset = ts.record_id.split("/", 1)[0]
        try:
            result = zero_shot_eval(params, config, ts.values[ts.boundary :], cfg.horizon)
        except DataError as exc:
            print(f"note: {ts.record_id}: {exc}", file=sys.stderr)
            continue
        total, count = per_dataset.get(dataset, (0.0, 0))
        per_dataset[dataset] = (total + result.avg_mse * result.windows, count + result.windows)
    if not per_dataset:
        raise DataError("no series had a test split long enough for zero-shot evaluation")
    lines = ["task,dataset,ratio,metric,value"]
    grand_total, grand_count = 0.0, 0
    for dataset in sorted(per_dataset):
        total, count = per_dataset[dataset]
        lines.append(f"zero_shot,{dataset},1.0,mse,{_fmt(total / count)}")
        grand_total += total
        grand_count += count
    lines.append(f"zero_shot,all,1.0,mse,{_fmt(grand_total / grand_count)}")
    report = "\n".join(lines) + "\n"
    path = out.reports / "eval.csv"
    path.write_text(report, encoding="utf-8")
    print(report, end="")
    print(f"report written to {path}", file=sys.stderr)
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig, out: OutDirs) -> int:
    config = model_config_from_run(cfg)
    n_params = param_count(config)
    if n_params > GRADCHECK_PARAM_LIMIT:
        raise UsageError(
            f"finite differences over {n_params} parameters would take hours; "
            f"pass a config with at most {GRADCHECK_PARAM_LIMIT}"
        )
    params = init_params(config, cfg.seed, dtype=np.float64)
    rng = substream(cfg.seed, "gradcheck")
    tokens = rng.normal(size=(2, config.max_tokens, config.segment_len))
    error = finite_diff_check(
        lambda: pretrain_loss(params, config, tokens), list(params.values())
    )
    print(f"gradcheck: max relative error {error:.6e} over {n_params} parameters ({backend} kernels)")
    if not (error < GRADCHECK_TOLERANCE):
        raise NumericError(f"gradient check failed: {error:.6e} >= {GRADCHECK_TOLERANCE}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise UsageError(message)


def _config_key_help() -> str:
    defaults = RunConfig()
    lines = ["config keys and defaults (settable via --config file or --set key=value):"]
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(defaults, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"  {f.name}={value}")
    return "\n".join(lines)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="tsgen",
        description="Generative pre-training and adaptation for univariate time series.",
    )
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override one config key"
    )
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out-dir", default="tsgen-out", help="output directory (default: tsgen-out)")

    sub = parser.add_subparsers(dest="command", required=True)
    epilog = _config_key_help()

    def add(name: str, handler, help_text: str) -> _Parser:
        p = sub.add_parser(
            name,
            parents=[common],
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.set_defaults(handler=handler)
        return p

    p = add("curate", cmd_curate, "score a corpus and write the curation report")
    p.add_argument("--corpus", required=True, help="corpus root directory")

    p = add("synth", cmd_synth, "generate deterministic synthetic corpora")
    p.add_argument(
        "--family",
        choices=list(synth.FAMILIES) + ["anomaly"],
        help="generate one family (default: all families plus the anomaly task)",
    )

    p = add("pretrain", cmd_pretrain, "pre-train on every eligible corpus series")
    p.add_argument("--corpus", required=True, help="corpus root directory")

    p = add("finetune", cmd_finetune, "fine-tune a checkpoint on a downstream task")
    p.add_argument("--checkpoint", required=True, help="pre-trained checkpoint path")
    p.add_argument("--corpus", required=True, help="corpus root directory")
    p.add_argument("--task", choices=["forecast", "impute"], default="forecast")
    p.add_argument(
        "--from-scratch",
        action="store_true",
        help="reinitialize the checkpoint's architecture instead of loading its weights",
    )

    p = add("forecast", cmd_forecast, "forecast the first held-out window of each series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--record", help="restrict to one record id (dataset/record)")

    p = add("impute", cmd_impute, "fill masked segments in the first held-out window")
    p.add_argument("--checkpoint", required=True, help="mask-aware checkpoint from finetune --task impute")
    p.add_argument("--corpus", required=True)
    p.add_argument("--record", help="restrict to one record id (dataset/record)")

    p = add("detect", cmd_detect, "fine-tune on an anomaly task and score its test series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task-dir", required=True, help="directory with train.csv, test.csv, label.csv")

    p = add("eval", cmd_eval, "zero-shot forecast evaluation over corpus test splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)

    add(
        "gradcheck",
        cmd_gradcheck,
        "verify gradients by finite differences (tiny built-in model unless --config is given)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _resolve(args)
        out = _prepare_out(Path(args.out_dir), cfg)
        return args.handler(args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
