import json

import numpy as np
import pytest

from mmsn.cli import RunConfig, main, parse_grid
from mmsn.errors import ConfigError

FAST = {"generator": {"n_patients": 9, "n_regions": 3, "nodes_per_region": 3, "d_mri": 6, "d_hist": 8},
        "train": {"epochs": 4, "model": {"latent_nodes": 6, "dim": 4}}}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(FAST))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "cohort"), "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "cohort" / "manifest.json"), "--config", str(cfg),
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_defaults_and_repeatability(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a" / "patients").glob("*.json"))) == 30
    assert (tmp_path / "a" / "manifest.json").exists()
    assert main(["synth", "--out", str(tmp_path / "b")]) == 0
    for f in (tmp_path / "a").rglob("*.json"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub")]) == 3


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 3}, "extra": 1}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"generator": {"n_patients": 0}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"model": {"width": 3}}})


def test_validate_command(run_dir, capsys):
    assert main(["validate", "--data", str(run_dir / "cohort" / "manifest.json")]) == 0
    assert "9/9 valid" in capsys.readouterr().out


def test_train_artifacts(run_dir):
    run = run_dir / "run"
    assert sorted(p.parent.name for p in run.glob("fold*/params.bin")) == ["fold0", "fold1", "fold2"]
    doc = json.loads((run / "metrics.json").read_text())
    keys = {"accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1"}
    for fold in doc["folds"]:
        assert set(fold["validation"]) == keys
        assert set(fold["training"]) == keys
    assert doc["mean"]["aggregation"] == "per-fold mean"
    header = (run / "fold0" / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,lr"
    assert (run / "run.log").exists()


def test_config_snapshot_reproduces_run(run_dir, tmp_path):
    snap = json.loads((run_dir / "run" / "config.json").read_text())
    assert snap["train"]["patience"] == 25 and snap["train"]["model"]["tau"] == 0.2
    snap["output_dir"] = str(tmp_path / "again")
    cfg = tmp_path / "snap.json"
    cfg.write_text(json.dumps(snap))
    assert main(["train", "--data", str(run_dir / "cohort" / "manifest.json"), "--config", str(cfg)]) == 0
    assert (tmp_path / "again" / "metrics.json").read_bytes() == (run_dir / "run" / "metrics.json").read_bytes()


def test_reconstruct_eval_grid(run_dir, tmp_path):
    data, params = str(run_dir / "cohort" / "manifest.json"), str(run_dir / "run" / "fold0" / "params.bin")
    out = tmp_path / "grid.csv"
    assert main(["reconstruct-eval", "--data", data, "--params", params, "--p-grid", "0,1", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "p,accuracy,sensitivity,specificity,macro_f1,micro_f1"
    assert len(rows) == 3
    ev = tmp_path / "eval.json"
    assert main(["eval", "--data", data, "--params", params, "--out", str(ev)]) == 0
    metrics = json.loads(ev.read_text())
    p0 = [float(x) for x in rows[1].split(",")]
    for value, key in zip(p0[1:], ["accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1"]):
        assert value == pytest.approx(metrics[key], abs=1e-9)
    assert main(["reconstruct-eval", "--data", data, "--params", params, "--p-grid", "0,2"]) == 2
    assert main(["reconstruct-eval", "--data", data, "--params", params, "--p-grid", "a"]) == 2


def test_full_dropout_row_never_reads_targets(run_dir, tmp_path, monkeypatch):
    from mmsn.model import MMSN

    def forbidden(self, *a, **k):
        raise AssertionError("target read")

    monkeypatch.setattr(MMSN, "recon_targets", forbidden)
    out = tmp_path / "p1.csv"
    assert main(["reconstruct-eval", "--data", str(run_dir / "cohort" / "manifest.json"),
                 "--params", str(run_dir / "run" / "fold0" / "params.bin"), "--p-grid", "1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_parse_grid():
    assert parse_grid("0,0.25,0.5,0.75,1") == [0, 0.25, 0.5, 0.75, 1]
    for bad in ("", "0,,", "-0.1", "1.01"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_failure_exit_code():
    # a step this coarse cannot meet the tolerance
    assert main(["gradcheck", "--h", "0.5", "--tol", "1e-12"]) == 5


def test_spectrum_range(run_dir, tmp_path):
    out = tmp_path / "spectrum.csv"
    assert main(["spectrum", "--params", str(run_dir / "run" / "fold1" / "params.bin"), "--out", str(out)]) == 0
    vals = np.array([float(x) for x in out.read_text().splitlines()[1:]])
    assert len(vals) == 6 * 4
    assert vals.min() >= -1e-8 and vals.max() <= 2 + 1e-8


def test_export_embeddings_shape(run_dir, tmp_path):
    out = tmp_path / "emb.csv"
    assert main(["export-embeddings", "--data", str(run_dir / "cohort" / "manifest.json"),
                 "--params", str(run_dir / "run" / "fold0" / "params.bin"), "--out", str(out)]) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()]
    assert len(rows) == 1 + 9
    assert all(len(r) == 1 + 2 * 4 for r in rows)


def test_missing_data_exit_3(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "none.json"), "--params", str(tmp_path / "p.bin")]) == 3
