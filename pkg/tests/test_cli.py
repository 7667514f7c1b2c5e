import json
from pathlib import Path

import numpy as np
import pytest

from esfp.cli import load_dataset, main
from esfp.experiment import (ExperimentConfig, emit_report, read_report_csv, read_report_json, run_experiment)
from esfp.metrics import METRIC_LABELS, MetricReport
from esfp.pipeline import load_pose_sequence, save_pose_sequence
from esfp.retarget import read_command_log

GOLDEN = Path(__file__).parent / "golden"
TABLE_ROWS = ["MPJPE (mm)", "PA-MPJPE (mm)", "RR-MPJPE (mm)", "MeanAccel", "MeanJerk", "BoneMAE (mm)",
              "BoneStdDev (mm)"]
SMALL = {"sequences": 3, "frames": 40}


def run(*argv):
    return main([str(a) for a in argv])


def run_record(out):
    return json.loads((Path(out) / "run.json").read_text())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen -> corrupt -> train (one epoch per stage) on a tiny dataset, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.json").write_text(json.dumps(SMALL))
    assert run("gen", "--seed", 4, "--config", root / "gen.json", "--out", root / "data") == 0
    assert run("corrupt", "--seed", 4, "--profile", "eval-hard", "--input", root / "data", "--out", root / "noisy") == 0
    (root / "train.json").write_text(json.dumps({"epochs": [1, 1, 1], "crops_per_sequence": 2, "batch_size": 4}))
    assert run("train", "--seed", 4, "--config", root / "train.json", "--input", root / "data",
               "--out", root / "train") == 0
    return root


def test_gen_and_corrupt_outputs(workdir):
    data = load_dataset(workdir / "data")
    assert data.positions.shape == (3, 40, 24, 3)
    noisy = load_dataset(workdir / "noisy")
    assert noisy.positions.shape == data.positions.shape
    assert np.abs(noisy.positions - data.positions).mean() > 0.01
    for sub in ("data", "noisy", "train"):
        rec = run_record(workdir / sub)
        assert rec["seed"] == 4
        assert all(Path(p).exists() for p in rec["artifacts"])
    assert json.loads((workdir / "data" / "seq_0000.json").read_text())["seed"] == 4


def test_gen_is_seeded(tmp_path, workdir):
    assert run("gen", "--seed", 4, "--config", workdir / "gen.json", "--out", tmp_path / "a") == 0
    assert (tmp_path / "a" / "seq_0001.bin").read_bytes() == (workdir / "data" / "seq_0001.bin").read_bytes()
    assert run("gen", "--seed", 5, "--config", workdir / "gen.json", "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "seq_0001.bin").read_bytes() != (workdir / "data" / "seq_0001.bin").read_bytes()


def test_train_writes_stage_checkpoints(workdir):
    for name in ("stage1", "stage2", "stage3", "model"):
        assert (workdir / "train" / f"{name}.json").exists()
    assert (workdir / "train" / "train_log.csv").exists()


@pytest.mark.parametrize("method", ["savgol", "particle_filter", "hpstm", "hpstm_cov"])
def test_smooth_each_method(tmp_path, workdir, method):
    args = ["smooth", "--seed", 2, "--method", method, "--input", workdir / "noisy" / "seq_0000",
            "--out", tmp_path]
    if method.startswith("hpstm"):
        args += ["--checkpoint", workdir / "train" / "model"]
    assert run(*args) == 0
    out = load_pose_sequence(tmp_path / "smoothed")
    assert out.shape == (40, 24, 3) and np.isfinite(out).all()
    assert json.loads((tmp_path / "smoothed.json").read_text())["seed"] == 2


def test_eval_and_retarget(tmp_path, workdir, capsys):
    assert run("eval", "--input", workdir / "noisy" / "seq_0000", "--reference", workdir / "data" / "seq_0000",
               "--out", tmp_path / "e") == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert metrics["seed"] == 0 and metrics["mpjpe_mm"] > 0
    assert run("retarget", "--seed", 9, "--input", workdir / "data" / "seq_0000", "--out", tmp_path / "r") == 0
    commands = read_command_log(tmp_path / "r" / "commands.jsonl")
    assert len(commands) == 27  # 40 frames at 30 Hz -> ticks at 0, 50, ..., 1300 ms
    assert run_record(tmp_path / "r")["seed"] == 9


@pytest.mark.parametrize("threads", ["1", "0"])
def test_pipeline_command(tmp_path, workdir, monkeypatch, threads):
    monkeypatch.setenv("ESFP_THREADS", threads)
    assert run("pipeline", "--seed", 1, "--checkpoint", workdir / "train" / "model",
               "--input", workdir / "noisy" / "seq_0000", "--out", tmp_path) == 0
    assert load_pose_sequence(tmp_path / "smoothed").shape == (40, 24, 3)
    assert len(read_command_log(tmp_path / "commands.jsonl")) == 27
    assert run_record(tmp_path)["deterministic"] is (threads == "1")


def test_pipeline_modes_agree(tmp_path, workdir, monkeypatch):
    outs = []
    for threads in ("1", "0"):
        monkeypatch.setenv("ESFP_THREADS", threads)
        assert run("pipeline", "--checkpoint", workdir / "train" / "model", "--input",
                   workdir / "noisy" / "seq_0001", "--out", tmp_path / threads) == 0
        outs.append((tmp_path / threads / "smoothed.bin").read_bytes())
    assert outs[0] == outs[1]


def test_exit_codes(tmp_path, workdir, capsys):
    assert run("smooth", "--out", tmp_path) == 2
    assert run("smooth", "--method", "hpstm", "--input", workdir / "noisy" / "seq_0000",
               "--checkpoint", tmp_path / "nope", "--out", tmp_path) == 1
    assert run("smooth", "--method", "median", "--input", workdir / "noisy" / "seq_0000", "--out", tmp_path) == 1
    assert run("experiment", "--method", "hpstm", "--out", tmp_path / "x") == 1
    assert "checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "x" / "report.csv").exists()
    with pytest.raises(SystemExit):
        run("gen", "--preset", "huge", "--out", tmp_path)


# --------------------------------------------------------------------------
# experiment and reports


def small_experiment(**kw):
    cfg = {"methods": ["noisy"], "seed": 1, "dataset": SMALL, "split": "all", "max_sequences": 2}
    cfg.update(kw)
    return cfg


def test_zero_noise_noisy_method_is_exact(tmp_path):
    results = run_experiment(small_experiment(profile="none"), tmp_path)
    r = results["noisy"]
    assert r.mpjpe_mm == r.rr_mpjpe_mm == 0.0
    # Procrustes goes through an SVD, so identity alignment is exact only to round-off
    assert r.pa_mpjpe_mm < 1e-9
    assert r.bone_mae_mm < 1e-9


def test_report_rows_match_metric_table(tmp_path):
    run_experiment(small_experiment(methods=["noisy", "savgol"]), tmp_path)
    md = (tmp_path / "report.md").read_text().splitlines()
    assert md[0] == "| Metric | noisy | savgol |"
    assert [line.split(" | ")[0].lstrip("| ") for line in md[2:9]] == TABLE_ROWS
    assert [row.split(",")[0] for row in (tmp_path / "report.csv").read_text().splitlines()[1:]] == TABLE_ROWS
    assert json.loads((tmp_path / "report.json").read_text())["metrics"] == TABLE_ROWS
    assert list(METRIC_LABELS.values()) == TABLE_ROWS


def test_same_seed_gives_byte_identical_reports(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(small_experiment(methods=["noisy", "savgol", "pf"])))
    for name in ("a", "b"):
        assert run("experiment", "--seed", 6, "--config", cfg, "--out", tmp_path / name) == 0
    for f in ("report.csv", "report.json", "report.md"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["seed"] == 6
    assert run("experiment", "--seed", 7, "--config", cfg, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "c" / "report.csv").read_bytes()


def test_experiment_with_models(tmp_path, workdir):
    ckpt = str(workdir / "train" / "model")
    results = run_experiment(small_experiment(methods=["noisy", "hpstm", "hpstm+cov"], checkpoint=ckpt), tmp_path)
    assert list(results) == ["noisy", "hpstm", "hpstm_cov"]
    assert all(np.isfinite(list(r.to_dict().values())).all() for r in results.values())


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"methods": ["noisy"], "colour": 1})
    with pytest.raises(ValueError, match="method"):
        ExperimentConfig.from_dict({"methods": ["kalman"]})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"methods": []})


def fixed_results():
    return {
        "noisy": MetricReport(54.4312, 40.12346, 61.0, 0.15, 0.2294, 12.0, 21.124),
        "hpstm": MetricReport(37.5, 29.99994, 35.25, 0.001, 0.0005, 10 / 3, 1.675),
    }


def test_markdown_matches_golden(tmp_path):
    emit_report(fixed_results(), tmp_path, seed=3)
    assert (tmp_path / "report.md").read_text() == (GOLDEN / "report.md").read_text()


def test_single_method_table(tmp_path):
    emit_report({"savgol": fixed_results()["noisy"]}, tmp_path)
    lines = (tmp_path / "report.md").read_text().splitlines()
    assert lines[0] == "| Metric | savgol |"
    assert all(line.count("|") == 3 for line in lines if line)
    assert (tmp_path / "report.csv").read_text().splitlines()[0] == "metric,savgol"


def test_json_and_csv_round_trip(tmp_path, rng):
    values = {m: MetricReport(*rng.uniform(0, 100, 7)) for m in ("noisy", "hpstm_cov")}
    emit_report(values, tmp_path)
    assert read_report_csv(tmp_path / "report.csv") == values
    assert read_report_json(tmp_path / "report.json") == values


def test_emit_report_needs_a_method(tmp_path):
    with pytest.raises(ValueError):
        emit_report({}, tmp_path)


def test_pose_sequence_extra_is_kept(tmp_path):
    save_pose_sequence(np.zeros((2, 24, 3)), tmp_path / "z", extra={"seed": 11})
    assert json.loads((tmp_path / "z.json").read_text())["seed"] == 11
