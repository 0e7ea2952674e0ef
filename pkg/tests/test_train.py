import numpy as np
import pytest

from mmsn.data import GeneratorConfig, generate_synthetic_cohort, stream
from mmsn.errors import ConfigError
from mmsn.model import ModelConfig, PreparedPatient
from mmsn.train import (TrainConfig, build_model, compute_metrics, evaluate, history_csv, kfold_split, mean_metrics,
                        train)


def test_metrics_perfect_and_all_negative():
    y = np.array([[1, 0, 1, 0], [0, 1, 0, 1]])
    assert compute_metrics(y, y) == {k: 100.0 for k in ("accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1")}
    m = compute_metrics(y, np.zeros_like(y))
    assert m["sensitivity"] == 0.0
    assert m["specificity"] == 100.0
    assert m["accuracy"] == 50.0
    assert m["micro_f1"] == 0.0


def test_metrics_match_confusion_tally():
    rng = np.random.default_rng(7)
    t = rng.integers(0, 2, (6, 4))
    p = rng.integers(0, 2, (6, 4))
    tallies = []
    for j in range(4):
        c = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
        for i in range(6):
            key = {(1, 1): "tp", (0, 1): "fp", (1, 0): "fn", (0, 0): "tn"}[(t[i, j], p[i, j])]
            c[key] += 1
        tallies.append(c)

    def div(a, b):
        return a / b if b else 0.0

    expected = {
        "accuracy": 100 * sum(c["tp"] + c["tn"] for c in tallies) / 24,
        "sensitivity": 100 * sum(div(c["tp"], c["tp"] + c["fn"]) for c in tallies) / 4,
        "specificity": 100 * sum(div(c["tn"], c["tn"] + c["fp"]) for c in tallies) / 4,
        "macro_f1": 100 * sum(div(2 * c["tp"], 2 * c["tp"] + c["fp"] + c["fn"]) for c in tallies) / 4,
    }
    TP, FP, FN = (sum(c[k] for c in tallies) for k in ("tp", "fp", "fn"))
    expected["micro_f1"] = 100 * div(2 * TP, 2 * TP + FP + FN)
    got = compute_metrics(t, p)
    for k, v in expected.items():
        assert got[k] == pytest.approx(v, abs=1e-12), k
        assert 0 <= got[k] <= 100


def test_micro_f1_is_100_only_for_exact_match():
    rng = np.random.default_rng(8)
    t = rng.integers(0, 2, (5, 4))
    t[0, 0] = 1
    for _ in range(20):
        p = t.copy()
        i, j = rng.integers(0, 5), rng.integers(0, 4)
        p[i, j] ^= 1
        assert compute_metrics(t, p)["micro_f1"] < 100


def test_mean_metrics():
    a = dict.fromkeys(("accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1"), 50.0)
    b = dict.fromkeys(a, 100.0)
    assert mean_metrics([a, b]) == dict.fromkeys(a, 75.0)


def test_kfold_sizes_and_partition():
    ids = [f"P{i}" for i in range(30)]
    folds = kfold_split(ids, 3, np.random.default_rng(0))
    assert [len(f) for f in folds] == [10, 10, 10]
    assert sorted(sum(folds, [])) == sorted(ids)
    folds31 = kfold_split(range(31), 3, np.random.default_rng(0))
    assert sorted(len(f) for f in folds31) == [10, 10, 11]
    for a in range(3):
        for b in range(a + 1, 3):
            assert not set(folds31[a]) & set(folds31[b])
    with pytest.raises(ConfigError):
        kfold_split(range(2), 3, np.random.default_rng(0))


def test_train_config_validation_and_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(1) == cfg.lr_at(40) == cfg.lr
    assert cfg.lr_at(41) == cfg.lr * 0.5
    assert cfg.lr_at(81) == cfg.lr * 0.25
    for bad in ({"epochs": 0}, {"folds": 1}, {"patience": 0}, {"dropout": 1.5}, {"lambdas": [0, 0, 0]}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg


GEN = GeneratorConfig(n_patients=6, n_regions=3, nodes_per_region=3, d_mri=6, d_hist=8)
SMALL = ModelConfig(latent_nodes=6, dim=8, tau=0.1)


@pytest.fixture(scope="module")
def patients():
    return [PreparedPatient.from_sample(p) for p in generate_synthetic_cohort(GEN, 3)]


def _model(seed=0):
    return build_model(TrainConfig(seed=seed, model=SMALL), GEN.d_mri, GEN.d_hist, 0)


def test_patience_one_with_constant_loss_stops_at_epoch_two(patients):
    cfg = TrainConfig(epochs=50, lr=1e-15, patience=1, model=SMALL)
    res = train(_model(), patients[:4], patients[4:], cfg, np.random.default_rng(0))
    assert res.stopped_epoch == 2
    assert len(res.history) == 2
    assert res.best_epoch == 1


def test_separable_toy_set_is_fit(patients):
    four = patients[:4]
    cfg = TrainConfig(epochs=200, lr=0.01, patience=200, lambdas=(1.0, 0.0, 0.0), model=SMALL)
    model = _model()
    train(model, four, [], cfg, np.random.default_rng(0))
    metrics, _ = evaluate(model, four)
    assert metrics["micro_f1"] == 100.0


def test_training_is_bit_identical_under_seed(patients):
    cfg = TrainConfig(epochs=15, dropout=0.5, model=SMALL)
    runs = []
    for _ in range(2):
        res = train(_model(), patients[:4], patients[4:], cfg, stream(0, "masking", 0, 0))
        runs.append(history_csv(res.history))
    assert runs[0] == runs[1]


def test_best_snapshot_is_restored(patients):
    cfg = TrainConfig(epochs=60, lr=0.05, patience=5, model=SMALL)
    model = _model()
    res = train(model, patients[:4], patients[4:], cfg, np.random.default_rng(0))
    seen = [h["val_loss"] for h in res.history]
    assert res.best_val_loss == min(seen[: res.best_epoch])
    assert res.best_val_loss <= min(seen) + cfg.min_delta
    parts, _ = model.loss(patients[4:], None, cfg.weights)
    assert parts.total.item() == pytest.approx(res.best_val_loss, abs=1e-12)


def test_parallel_folds_match_serial(monkeypatch):
    from mmsn.train import cross_validate, metrics_document
    samples = generate_synthetic_cohort(GEN, 5)
    cfg = TrainConfig(epochs=3, dropout=0.5, model=SMALL)
    monkeypatch.setenv("MMSN_THREADS", "1")
    serial = metrics_document(cross_validate(samples, cfg))
    monkeypatch.setenv("MMSN_THREADS", "2")
    assert metrics_document(cross_validate(samples, cfg)) == serial
