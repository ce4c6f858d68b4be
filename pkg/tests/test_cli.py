"""End-to-end command-line tests.

Every subcommand is driven through main() in process so exit codes and
file outputs can be asserted directly. A module-scoped fixture builds
one synthetic corpus and one tiny pre-trained checkpoint that the
downstream subcommands share.
"""

from __future__ import annotations

import math
import shutil
import subprocess
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from tsgen.cli import main
from tsgen.config import parse_config_text
from tsgen.synth import FAMILIES
from tsgen.train import load_checkpoint

CFG_TEXT = "\n".join(
    [
        "segment_len=4",
        "max_tokens=3",
        "model_dim=8",
        "layers=1",
        "heads=2",
        "ffn_dim=16",
        "epochs=1",
        "batches_per_epoch=3",
        "batch_size=4",
        "max_val_windows=4",
        "base_lr=1e-3",
        "final_lr=1e-4",
        "synth_records=2",
        "synth_len=140",
        "ft_epochs=1",
        "ft_batch_size=4",
        "ft_lr=1e-3",
        "horizon=4",
        "detect_context=2",
        "impute_segments=3",
        "seed=5",
    ]
)


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_rows(path: Path) -> list[list[str]]:
    return [line.split(",") for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_file = root / "tiny.cfg"
    cfg_file.write_text(CFG_TEXT + "\n")
    synth_out = root / "synth"
    assert main(["synth", "--config", str(cfg_file), "--out-dir", str(synth_out)]) == 0
    corpus = synth_out / "corpus"
    train_out = root / "train"
    code = main(
        ["pretrain", "--config", str(cfg_file), "--corpus", str(corpus), "--out-dir", str(train_out)]
    )
    assert code == 0
    return SimpleNamespace(
        cfg_file=cfg_file,
        corpus=corpus,
        task_dir=corpus / "anomaly_task",
        train_out=train_out,
        checkpoint=train_out / "checkpoints" / "pretrain.ckpt",
    )


@pytest.fixture(scope="module")
def impute_checkpoint(env, tmp_path_factory):
    out = tmp_path_factory.mktemp("ft-impute")
    code = main(
        [
            "finetune",
            "--config",
            str(env.cfg_file),
            "--checkpoint",
            str(env.checkpoint),
            "--corpus",
            str(env.corpus),
            "--task",
            "impute",
            "--out-dir",
            str(out),
        ]
    )
    assert code == 0
    return out / "checkpoints" / "finetune_impute.ckpt"


# ---------------------------------------------------------------------------
# argument handling


def test_bad_invocations_exit_with_usage_code(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["curate", "--out-dir", str(tmp_path)]) == 1  # missing --corpus
    assert main(["synth", "--set", "oops", "--out-dir", str(tmp_path)]) == 1
    assert main(["synth", "--set", "not_a_key=3", "--out-dir", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_out_dir_scaffold_and_resolved_config(tmp_path):
    out = tmp_path / "o"
    code = main(
        ["synth", "--family", "sinusoid", "--set", "synth_len=60", "--set", "synth_records=1", "--out-dir", str(out)]
    )
    assert code == 0
    for sub in ("checkpoints", "reports", "predictions"):
        assert (out / sub).is_dir()
    resolved = parse_config_text((out / "resolved.cfg").read_text())
    assert resolved.synth_len == 60
    assert resolved.synth_records == 1


def test_resolved_config_round_trips_the_config_file(env):
    resolved = parse_config_text((env.train_out / "resolved.cfg").read_text())
    assert resolved == parse_config_text(CFG_TEXT)


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_all_families_and_anomaly_task(tmp_path, capsys):
    out = tmp_path / "s"
    code = main(["synth", "--set", "synth_len=60", "--set", "synth_records=1", "--out-dir", str(out)])
    assert code == 0
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == len(FAMILIES) + 1
    for family in FAMILIES:
        assert (out / "corpus" / family / "manifest.csv").is_file()
    assert (out / "corpus" / "anomaly_task" / "label.csv").is_file()


def test_synth_family_filter(tmp_path):
    out = tmp_path / "one"
    code = main(
        ["synth", "--family", "anomaly", "--set", "synth_len=60", "--set", "synth_records=1", "--out-dir", str(out)]
    )
    assert code == 0
    assert (out / "corpus" / "anomaly_task").is_dir()
    assert not (out / "corpus" / "sinusoid").exists()


def test_synth_seed_flag_matches_set_override(tmp_path):
    args = ["synth", "--set", "synth_len=60", "--set", "synth_records=1"]
    assert main(args + ["--seed", "9", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--set", "seed=9", "--out-dir", str(tmp_path / "b")]) == 0
    assert main(args + ["--seed", "10", "--out-dir", str(tmp_path / "c")]) == 0
    assert tree_bytes(tmp_path / "a" / "corpus") == tree_bytes(tmp_path / "b" / "corpus")
    assert tree_bytes(tmp_path / "a" / "corpus") != tree_bytes(tmp_path / "c" / "corpus")


# ---------------------------------------------------------------------------
# curate


def test_curate_writes_and_prints_the_report(env, tmp_path, capsys):
    out = tmp_path / "report"
    assert main(["curate", "--corpus", str(env.corpus), "--out-dir", str(out)]) == 0
    captured = capsys.readouterr()
    report = (out / "reports" / "corpus_report.csv").read_text()
    assert captured.out == report
    lines = report.splitlines()
    assert lines[0] == "name,points,variates,adf_weighted,forecastability_weighted,tier,status"
    assert len(lines) == 1 + len(FAMILIES)
    assert all(line.endswith(",ok") for line in lines[1:])
    # the anomaly task directory has no manifest and is skipped, not fatal
    assert "anomaly_task: no manifest.csv, skipped" in captured.err


def test_curate_missing_corpus_exits_with_data_code(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["curate", "--corpus", str(missing), "--out-dir", str(tmp_path / "o")]) == 2
    assert "data error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_outputs(env):
    assert env.checkpoint.is_file()
    rows = read_rows(env.train_out / "reports" / "pretrain_metrics.csv")
    assert rows[0] == ["epoch", "step", "lr", "train_loss", "val_loss"]
    assert len(rows) == 2  # one epoch
    assert all(math.isfinite(float(cell)) for cell in rows[1][2:])
    checkpoint = load_checkpoint(env.checkpoint)
    assert checkpoint.config.segment_len == 4
    assert checkpoint.config.model_dim == 8
    assert checkpoint.opt_m is not None and checkpoint.opt_v is not None
    assert checkpoint.metadata["schedule_step"] == "3"
    assert checkpoint.metadata["schedule_total"] == "3"
    assert "rng_state" in checkpoint.metadata


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_pretrain_divergence_exits_with_numeric_code(env, tmp_path, capsys):
    out = tmp_path / "blowup"
    code = main(
        [
            "pretrain",
            "--config",
            str(env.cfg_file),
            "--set",
            "base_lr=1e20",
            "--set",
            "final_lr=1e20",
            "--corpus",
            str(env.corpus),
            "--out-dir",
            str(out),
        ]
    )
    assert code == 3
    err = capsys.readouterr().err
    assert "aborted" in err
    assert (out / "checkpoints" / "aborted.ckpt").is_file()


# ---------------------------------------------------------------------------
# forecast


def test_forecast_csv_layout(env, tmp_path, capsys):
    out = tmp_path / "fc"
    code = main(
        ["forecast", "--config", str(env.cfg_file), "--checkpoint", str(env.checkpoint), "--corpus", str(env.corpus), "--out-dir", str(out)]
    )
    assert code == 0
    assert "8 forecasts" in capsys.readouterr().out
    rows = read_rows(out / "predictions" / "forecast.csv")
    assert rows[0] == ["record_id", "t", "prediction", "truth"]
    assert len(rows) == 1 + 8 * 4  # eight records, horizon four
    sinusoid_rows = [r for r in rows[1:] if r[0] == "sinusoid/sinusoid_000"]
    assert [int(r[1]) for r in sinusoid_rows] == [126, 127, 128, 129]  # split of a 140-point series
    assert all(math.isfinite(float(r[2])) and math.isfinite(float(r[3])) for r in rows[1:])


def test_forecast_record_filter(env, tmp_path, capsys):
    out = tmp_path / "one"
    base = ["forecast", "--config", str(env.cfg_file), "--checkpoint", str(env.checkpoint), "--corpus", str(env.corpus)]
    code = main(base + ["--record", "ar1/ar1_001", "--out-dir", str(out)])
    assert code == 0
    rows = read_rows(out / "predictions" / "forecast.csv")
    assert len(rows) == 5
    assert {r[0] for r in rows[1:]} == {"ar1/ar1_001"}
    assert main(base + ["--record", "no/such", "--out-dir", str(tmp_path / "m")]) == 2
    assert "data error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# finetune and impute


def test_finetune_forecast_outputs(env, tmp_path, capsys):
    out = tmp_path / "ft"
    code = main(
        [
            "finetune",
            "--config",
            str(env.cfg_file),
            "--checkpoint",
            str(env.checkpoint),
            "--corpus",
            str(env.corpus),
            "--task",
            "forecast",
            "--out-dir",
            str(out),
        ]
    )
    assert code == 0
    assert "final test MSE" in capsys.readouterr().out
    assert (out / "checkpoints" / "finetune_forecast.ckpt").is_file()
    rows = read_rows(out / "reports" / "finetune_forecast_metrics.csv")
    assert rows[0] == ["epoch", "step", "lr", "train_loss", "val_loss"]
    assert len(rows) == 2


def test_finetune_impute_adds_the_mask_embedding(impute_checkpoint):
    checkpoint = load_checkpoint(impute_checkpoint)
    assert checkpoint.config.use_mask_token
    assert "mask.embedding" in checkpoint.arrays


def test_impute_rejects_checkpoints_without_mask_embedding(env, tmp_path, capsys):
    code = main(
        ["impute", "--config", str(env.cfg_file), "--checkpoint", str(env.checkpoint), "--corpus", str(env.corpus), "--out-dir", str(tmp_path / "o")]
    )
    assert code == 1
    assert "mask embedding" in capsys.readouterr().err


def test_impute_csv_layout(env, impute_checkpoint, tmp_path):
    out = tmp_path / "imp"
    code = main(
        ["impute", "--config", str(env.cfg_file), "--checkpoint", str(impute_checkpoint), "--corpus", str(env.corpus), "--out-dir", str(out)]
    )
    assert code == 0
    rows = read_rows(out / "predictions" / "impute.csv")
    assert rows[0] == ["record_id", "t", "imputed", "truth", "masked"]
    assert len(rows) == 1 + 8 * 12  # eight records, three 4-point segments each
    masked = np.array([int(r[4]) for r in rows[1:]])
    assert masked.sum() == 8 * 4  # one masked segment per series
    for r in rows[1:]:
        if r[4] == "0":
            assert r[2] == r[3]  # observed points pass through untouched
        else:
            assert r[2] != r[3]


# ---------------------------------------------------------------------------
# detect


def test_detect_without_adaptation(env, tmp_path, capsys):
    out = tmp_path / "det"
    code = main(
        [
            "detect",
            "--config",
            str(env.cfg_file),
            "--set",
            "ft_epochs=0",
            "--checkpoint",
            str(env.checkpoint),
            "--task-dir",
            str(env.task_dir),
            "--out-dir",
            str(out),
        ]
    )
    assert code == 0
    assert "hit quantile" in capsys.readouterr().out
    assert not (out / "checkpoints" / "detect.ckpt").exists()
    rows = read_rows(out / "predictions" / "anomaly_scores.csv")
    assert rows[0] == ["segment", "score", "flagged"]
    assert len(rows) == 1 + 480  # 1920 test points in 4-point segments
    assert rows[1][1] == "" and rows[2][1] == ""  # first detect_context segments unscored
    assert all(math.isfinite(float(r[1])) for r in rows[3:])
    flags = sum(int(r[2]) for r in rows[1:])
    report = dict(r for r in read_rows(out / "reports" / "detect_report.csv")[1:])
    assert int(report["flagged_segments"]) == flags == math.ceil(0.1 * 478)
    assert 0.0 < float(report["hit_quantile"]) <= 1.0


def test_detect_with_adaptation_saves_a_checkpoint(env, tmp_path):
    out = tmp_path / "det"
    code = main(
        ["detect", "--config", str(env.cfg_file), "--checkpoint", str(env.checkpoint), "--task-dir", str(env.task_dir), "--out-dir", str(out)]
    )
    assert code == 0
    adapted = load_checkpoint(out / "checkpoints" / "detect.ckpt")
    assert adapted.config.segment_len == 4


# ---------------------------------------------------------------------------
# eval


def test_eval_report_covers_every_dataset(env, tmp_path, capsys):
    out = tmp_path / "ev"
    code = main(
        ["eval", "--config", str(env.cfg_file), "--checkpoint", str(env.checkpoint), "--corpus", str(env.corpus), "--out-dir", str(out)]
    )
    assert code == 0
    report = (out / "reports" / "eval.csv").read_text()
    assert capsys.readouterr().out == report
    rows = [line.split(",") for line in report.splitlines()]
    assert rows[0] == ["task", "dataset", "ratio", "metric", "value"]
    assert [r[1] for r in rows[1:]] == sorted(FAMILIES) + ["all"]
    assert all(r[0] == "zero_shot" and r[3] == "mse" for r in rows[1:])
    assert all(math.isfinite(float(r[4])) for r in rows[1:])


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_on_the_builtin_model(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out-dir", str(out)]) == 0
    assert "max relative error" in capsys.readouterr().out
    resolved = parse_config_text((out / "resolved.cfg").read_text())
    assert resolved.model_dim == 8
    assert resolved.precision == "f64"
    assert resolved.init_std == pytest.approx(0.2)


def test_gradcheck_refuses_large_models(tmp_path, capsys):
    code = main(
        ["gradcheck", "--set", "model_dim=128", "--set", "layers=4", "--out-dir", str(tmp_path / "o")]
    )
    assert code == 1
    assert "finite differences over" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# console entry point


@pytest.mark.skipif(shutil.which("tsgen") is None, reason="console script not installed")
def test_console_script_runs(tmp_path):
    result = subprocess.run(
        [
            "tsgen",
            "synth",
            "--family",
            "sinusoid",
            "--set",
            "synth_len=50",
            "--set",
            "synth_records=1",
            "--out-dir",
            str(tmp_path / "o"),
        ],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0
    assert (tmp_path / "o" / "corpus" / "sinusoid" / "manifest.csv").is_file()
