import json

import numpy as np
import pytest

from flowmapbg.cli import (
    ConfigError,
    config_hash,
    load_config,
    main,
    validate_config,
    verify_model,
)
from flowmapbg.targets import gmm2d

from helpers import FoldMap


def tiny_run_config(tmp_path, **overrides):
    cfg = {
        "target": {"kind": "gmm2d"},
        "model": {"dim": 2, "hidden_width": 16, "depth": 1, "time_embed_dim": 4},
        "train": {"steps": 60, "batch_size": 32, "lr": 1e-3, "loss": {"lambda_r": 1.0}},
        "grid": {"kind": "linear", "steps": 4},
        "eval": {"k_samples": 200, "reference_k": 200},
        "verify": {
            "aux_steps": 20,
            "aux_pairs": 128,
            "aux_eval_k": 64,
            "round_trip_k": 128,
            "logdet_k": 16,
        },
        "seed": 11,
        "out_dir": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path, cfg = tiny_run_config(tmp)
    rc = main(["train", "--config", str(cfg_path)])
    assert rc == 0
    return tmp, cfg_path, cfg


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_missing_field_names_it(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"target": {"kind": "gmm2d"}, "model": {"dim": 2}, "seed": 0}))
    rc = main(["train", "--config", str(path)])
    assert rc == 2
    with pytest.raises(ConfigError, match="train.steps"):
        load_config(path)


def test_unknown_target_kind_rejected():
    with pytest.raises(ConfigError, match="target.kind"):
        validate_config(
            {"target": {"kind": "lattice"}, "model": {"dim": 2}, "train": {"steps": 1}, "seed": 0}
        )


def test_config_hash_stable_and_sensitive():
    a = {"seed": 1, "target": {"kind": "gmm2d"}}
    b = {"target": {"kind": "gmm2d"}, "seed": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({"seed": 2, "target": {"kind": "gmm2d"}})


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_produces_artifacts(trained_dir):
    tmp, _, cfg = trained_dir
    out = tmp / "run"
    assert (out / "model.ckpt").exists()
    assert (out / "train_log.csv").exists()
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["healthy"] is True
    assert summary["config_hash"] == config_hash(cfg)


def test_train_resume_appends_log(trained_dir, tmp_path):
    tmp, cfg_path, cfg = trained_dir
    out = tmp / "run"
    n_rows = len((out / "train_log.csv").read_text().splitlines())
    longer = json.loads(cfg_path.read_text())
    longer["train"]["steps"] = 80
    new_path = tmp_path / "longer.json"
    new_path.write_text(json.dumps(longer))
    rc = main(
        ["train", "--config", str(new_path), "--resume", str(out / "model.ckpt")]
    )
    assert rc == 0
    body = (out / "train_log.csv").read_text().splitlines()
    assert len(body) == n_rows + 20
    steps = [int(line.split(",")[0]) for line in body[1:]]
    assert steps == sorted(steps)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_outputs_and_determinism(trained_dir, tmp_path):
    tmp, cfg_path, cfg = trained_dir
    ckpt = tmp / "run" / "model.ckpt"
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        rc = main(
            ["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--out", str(out)]
        )
        assert rc == 0
    metrics_a = json.loads((out_a / "metrics.json").read_text())
    metrics_b = json.loads((out_b / "metrics.json").read_text())
    metrics_a.pop("wall_ms")
    metrics_b.pop("wall_ms")
    assert metrics_a == metrics_b
    assert (out_a / "samples.csv").read_bytes() == (out_b / "samples.csv").read_bytes()
    assert (out_a / "reference.csv").exists()
    assert np.isfinite(metrics_a["ess"])
    assert metrics_a["config_hash"] == config_hash(cfg)


def test_eval_sampler_override(trained_dir, tmp_path):
    tmp, cfg_path, _ = trained_dir
    ckpt = tmp / "run" / "model.ckpt"
    out = tmp_path / "euler"
    rc = main(
        [
            "eval",
            "--config", str(cfg_path),
            "--checkpoint", str(ckpt),
            "--out", str(out),
            "--sampler", "euler",
            "--steps", "8",
            "--k-samples", "100",
        ]
    )
    assert rc == 0
    meta = json.loads((out / "samples.json").read_text())
    assert meta["integrator"] == "euler"
    assert meta["nfe_per_sample"] == 8 * 3


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def test_sample_writes_csv_only(trained_dir, tmp_path):
    tmp, cfg_path, _ = trained_dir
    ckpt = tmp / "run" / "model.ckpt"
    out = tmp_path / "s"
    rc = main(
        ["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--out", str(out), "--k-samples", "50"]
    )
    assert rc == 0
    assert (out / "samples.csv").exists()
    assert not (out / "metrics.json").exists()


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_single_cell(trained_dir, tmp_path):
    tmp, cfg_path, cfg = trained_dir
    ckpt = tmp / "run" / "model.ckpt"
    local = json.loads(cfg_path.read_text())
    local["sweep"] = {"values": [4], "seeds": [11]}
    local["out_dir"] = str(tmp_path / "sweep")
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(local))
    rc = main(["sweep", "--config", str(path), "--axis", "steps", "--checkpoint", str(ckpt), "--k-samples", "100"])
    assert rc == 0
    body = (tmp_path / "sweep" / "sweep_steps.csv").read_text().splitlines()
    assert len(body) == 2
    header = body[0].split(",")
    row = dict(zip(header, body[1].split(",")))
    assert float(row["nfe_per_sample"]) == 4 * 3  # N * (d + 1)
    assert row["sampler"] == "flowmap"


def test_sweep_steps_nfe_accounting(trained_dir, tmp_path):
    tmp, cfg_path, _ = trained_dir
    ckpt = tmp / "run" / "model.ckpt"
    local = json.loads(cfg_path.read_text())
    local["sweep"] = {"values": [1, 2, 4], "seeds": [3]}
    local["out_dir"] = str(tmp_path / "sweep2")
    path = tmp_path / "sweep2.json"
    path.write_text(json.dumps(local))
    rc = main(["sweep", "--config", str(path), "--axis", "steps", "--checkpoint", str(ckpt), "--k-samples", "64"])
    assert rc == 0
    body = (tmp_path / "sweep2" / "sweep_steps.csv").read_text().splitlines()
    rows = [dict(zip(body[0].split(","), line.split(","))) for line in body[1:]]
    for row in rows:
        assert float(row["nfe_per_sample"]) == int(row["value"]) * 3


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def test_verify_identity_model_passes(tmp_path):
    cfg_path, cfg = tiny_run_config(tmp_path)
    zero = json.loads(cfg_path.read_text())
    zero["train"]["steps"] = 0
    zero["out_dir"] = str(tmp_path / "zero")
    zpath = tmp_path / "zero.json"
    zpath.write_text(json.dumps(zero))
    assert main(["train", "--config", str(zpath)]) == 0
    rc = main(
        [
            "verify",
            "--config", str(zpath),
            "--checkpoint", str(tmp_path / "zero" / "model.ckpt"),
            "--out", str(tmp_path / "verify"),
        ]
    )
    assert rc == 0
    report = json.loads((tmp_path / "verify" / "verification.json").read_text())
    by_name = {c["name"]: c for c in report["checks"]}
    assert by_name["round_trip"]["measured"] == 0.0
    assert by_name["auxiliary_reverse_reconstruction"]["measured"] == pytest.approx(0.0, abs=1e-12)
    assert report["passed"]


def test_verify_fold_map_fails_loudly(tmp_path):
    cfg = {
        "target": {"kind": "gmm2d"},
        "model": {"dim": 2},
        "train": {"steps": 1},
        "grid": {"kind": "linear", "steps": 2},
        "verify": {"aux_steps": 0, "aux_pairs": 64, "aux_eval_k": 32, "round_trip_k": 64, "logdet_k": 16},
        "seed": 5,
    }
    report = verify_model(FoldMap(dim=2), gmm2d(), cfg, seed=5)
    by_name = {c["name"]: c for c in report["checks"]}
    assert by_name["logdet_vs_finite_difference"]["n_non_invertible_rows"] > 0
    assert not by_name["logdet_vs_finite_difference"]["passed"]
    assert not report["passed"]
