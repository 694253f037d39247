import hashlib
import json
import math

import numpy as np
import pytest

from mrsquant import harness
from mrsquant.cli import main
from mrsquant.harness import (ConfigError, CurvePoint, ExperimentConfig, FingerprintMismatchError,
                              MissingArtifactError, Run, check_sizes, cmd_eval, cmd_fit,
                              cmd_gen_basis, cmd_gen_data, cmd_learning_curve, cmd_run,
                              cmd_train, gap_non_increasing)
from mrsquant.metrics import smape_columns
from mrsquant.datagen import load

SMOKE = {"train_size": 180, "test_size": 20, "snr_list": [10],
         "train": {"max_iters": 8, "eval_every": 4, "batch_size": 16},
         "network": {"widths": [4, 8, 8], "hidden": 16},
         "learning_curve": {"sizes": [20, 60, 120], "max_iters": 4}}


def smoke_cfg(**over):
    doc = json.loads(json.dumps(SMOKE))
    doc.update(over)
    return ExperimentConfig.from_json(doc)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def artifacts(root):
    return {p.relative_to(root).as_posix(): digest(p)
            for sub in ("data", "weights", "reports", "fits", "curves")
            for p in sorted((root / sub).glob("*"))}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    run = Run(tmp_path_factory.mktemp("smoke"), smoke_cfg())
    reports = cmd_run(run)
    return run, reports


def test_smoke_report_layout(smoke_run):
    run, reports = smoke_run
    rows = run.table(10.0).read_text().strip().split("\n")
    assert rows[0] == "metabolite,CNN,VARPRO-LM"
    names = [r.split(",")[0] for r in rows[1:]]
    assert names == ["NAA", "Cr", "Cho", "Ins", "Glu", "Gln", "MM", "wins", "avg_rank"]
    report = reports[10.0]
    assert sum(report.wins.values()) <= 7
    assert abs(sum(report.avg_rank.values()) - 3.0) < 1e-3


def test_scatter_holds_every_pair(smoke_run):
    run, _ = smoke_run
    lines = run.scatter(10.0).read_text().strip().split("\n")
    assert lines[0] == "method,metabolite,sample,truth,estimate"
    assert len(lines) - 1 == 2 * 7 * 20


def test_manifest_traces_every_output(smoke_run):
    run, _ = smoke_run
    man = json.loads(run.manifest_path.read_text())
    assert man["config_hash"] == run.cfg.config_hash()
    assert man["basis_fingerprint"] == run.basis().fingerprint
    assert man["version"]
    for rel, sha in artifacts(run.root).items():
        assert man["outputs"][rel] == sha
    assert set(man["stages"]) >= {"gen-basis", "train_snr10", "fit_snr10", "eval_snr10"}
    ds = load(run.dataset("test", 10.0))
    assert ds.extra["role"] == "test"


def test_rerun_skips_every_stage(smoke_run):
    run, _ = smoke_run
    before = artifacts(run.root)
    again = Run(run.root, run.cfg)
    cmd_run(again)
    assert all(line.endswith("up to date") for line in again.log)
    assert artifacts(run.root) == before


def test_changed_setting_reruns_only_downstream(smoke_run, tmp_path):
    run, _ = smoke_run
    cfg = smoke_cfg(fit={"max_iter": 7})
    other = Run(run.root, cfg)
    cmd_run(other)
    status = dict(line.split(": ") for line in other.log)
    assert status["train_snr10"] == "up to date"
    assert status["fit_snr10"] == "done"
    assert status["eval_snr10"] == "done"
    cmd_run(Run(run.root, run.cfg))


def test_end_to_end_determinism(tmp_path):
    cfg = smoke_cfg(test_size=4)
    a, b = Run(tmp_path / "a", cfg), Run(tmp_path / "b", cfg)
    cmd_run(a)
    cmd_run(b)
    assert artifacts(a.root) == artifacts(b.root)


def test_seed_changes_the_data(tmp_path):
    a = Run(tmp_path / "a", smoke_cfg(seed=1))
    b = Run(tmp_path / "b", smoke_cfg(seed=2))
    for r in (a, b):
        cmd_gen_basis(r)
        cmd_gen_data(r)
    assert digest(a.dataset("test", 10.0)) != digest(b.dataset("test", 10.0))


def test_missing_upstream_artifact(tmp_path):
    run = Run(tmp_path, smoke_cfg())
    with pytest.raises(MissingArtifactError):
        cmd_gen_data(run)
    cmd_gen_basis(run)
    for cmd in (cmd_train, cmd_fit, cmd_eval):
        with pytest.raises(MissingArtifactError):
            cmd(run)


def test_fingerprint_mismatch(tmp_path):
    run = Run(tmp_path, smoke_cfg())
    cmd_gen_basis(run)
    cmd_gen_data(run)
    doc = json.loads(run.basis_file.read_text())
    doc["metabolites"][0]["lines"][0]["amp"] += 1.0
    run.basis_file.write_text(json.dumps(doc))
    with pytest.raises(FingerprintMismatchError):
        cmd_fit(run)


def test_config_schema_violations():
    for bad in ({"snr_list": []}, {"train_size": 0}, {"unknown": 1}, {"snr_list": [-1]},
                {"train": {"nope": 1}}, {"train_fraction": 1.5}, {"train": {"gamma": 2.0}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(bad)


def test_config_defaults_and_roundtrip():
    cfg = ExperimentConfig()
    assert cfg.train_size == 20_000 and cfg.test_size == 2_000
    assert math.isinf(cfg.snr_list[0]) and cfg.snr_list[1] == 10.0
    assert cfg.train_fraction == 0.8
    doc = json.loads(json.dumps(cfg.to_json()))
    assert doc["snr_list"] == ["inf", 10.0]
    assert ExperimentConfig.from_json(doc) == cfg
    assert ExperimentConfig.from_json(doc).config_hash() == cfg.config_hash()


def test_learning_curve_csv(smoke_run):
    run, _ = smoke_run
    points = cmd_learning_curve(run)
    assert [p.size for p in points] == [20, 60, 120]
    lines = run.learning_curve_file.read_text().strip().split("\n")
    assert lines[0] == "size,train_loss,val_loss,gap,status"
    assert len(lines) == 4


def test_learning_curve_size_rules(smoke_run):
    run, _ = smoke_run
    with pytest.raises(ConfigError):
        check_sizes([1000, 1000, 4000])
    with pytest.raises(ConfigError):
        check_sizes([4000, 1000])
    with pytest.raises(ConfigError):
        cmd_learning_curve(run, sizes=[20, 20])
    with pytest.raises(ConfigError):
        cmd_learning_curve(run, sizes=[20, 10_000])


def test_learning_curve_marks_diverged_point(smoke_run, monkeypatch):
    run, _ = smoke_run
    real_train = harness.train

    def flaky(spec, data, val, cfg, progress=None):
        if len(data[0]) == 60:
            raise harness.TrainingDivergedError("boom")
        return real_train(spec, data, val, cfg, progress)

    monkeypatch.setattr(harness, "train", flaky)
    points = cmd_learning_curve(run, sizes=[20, 60, 100])
    assert [p.status for p in points] == ["ok", "diverged", "ok"]
    assert math.isnan(points[1].val_loss)
    assert "diverged" in run.learning_curve_file.read_text()


def test_gap_rule():
    pts = [CurvePoint(1000, 0.01, 0.05), CurvePoint(4000, 0.02, 0.05), CurvePoint(16000, 0.03, 0.07)]
    assert gap_non_increasing(pts)
    pts.append(CurvePoint(32000, 0.0, 0.05))
    assert not gap_non_increasing(pts)
    assert gap_non_increasing([CurvePoint(10, 0.0, 1.0), CurvePoint(20, 0.0, 1.1)])
    assert not gap_non_increasing([CurvePoint(10, 0.0, 1.0), CurvePoint(20, 0.0, 1.11)])


def test_noiseless_fit_column_is_near_exact(tmp_path):
    cfg = smoke_cfg(snr_list=["inf"], test_size=8, fit={"n_starts": 16})
    run = Run(tmp_path, cfg)
    reports = cmd_run(run)
    ds = load(run.dataset("test", math.inf))
    fits = harness.read_fit_estimates(run.fits(math.inf), harness.output_names(run.basis()))
    assert np.all(smape_columns(ds.labels.astype(float), np.maximum(fits, 0)) < 1.0)
    assert all(v < 1.0 for v in reports[math.inf].per_metabolite_smape["VARPRO-LM"].values())


def test_cli(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(smoke_cfg(test_size=3).to_json()))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 2
    assert "missing" in capsys.readouterr().err
    for cmd in ("gen-basis", "gen-data", "train", "fit", "eval"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(out), "--seed", "5"]) == 0
    assert (out / "reports" / "table_snr10.csv").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["seed"] == 5
    assert main(["learning-curve", "--config", str(cfg_path), "--out", str(out),
                 "--seed", "5", "--sizes", "30", "30"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"snr_list": []}')
    assert main(["gen-basis", "--config", str(bad), "--out", str(out)]) == 2
