"""Training loop, k-fold cross-validation, multi-label metrics and run artifacts."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import atomic_write, dumps, stream
from .errors import ConfigError, NumericError
from .model import MMSN, LossWeights, ModelConfig, PreparedPatient
from .reconstruction import MaskState, mask_modality

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1")


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.005
    patience: int = 25
    min_delta: float = 1e-4
    dropout: float = 0.0
    eval_dropout: float | None = None
    folds: int = 3
    seed: int = 0
    lambdas: tuple = (1.0, 0.05, 0.1)
    lr_decay_every: int = 40
    lr_decay: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        for p in (self.dropout, self.eval_dropout):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ConfigError("dropout rates must lie in [0, 1]")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("invalid learning-rate schedule")
        LossWeights.from_seq(self.lambdas)
        self.model.validate()
        return self

    @property
    def weights(self):
        return LossWeights.from_seq(self.lambdas)

    @property
    def evaluation_dropout(self):
        return self.dropout if self.eval_dropout is None else self.eval_dropout

    def lr_at(self, epoch):
        """Step decay: lr * decay^((epoch - 1) // every), epochs counted from 1."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)

    def to_dict(self):
        out = asdict(self)
        out["lambdas"] = list(self.lambdas)
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(obj.pop("model", {}))
        if "lambdas" in obj:
            obj["lambdas"] = tuple(obj["lambdas"])
        return cls(model=model, **obj).validate()


# -- metrics -----------------------------------------------------------------
def _ratio(num, den):
    return num / den if den > 0 else 0.0


def compute_metrics(y_true, y_pred):
    """Five multi-label scores in percent.

    accuracy: fraction of correct entries; sensitivity/specificity: mean
    per-label recall of positives / negatives; macro-F1: mean per-label F1;
    micro-F1: F1 of pooled counts. Every 0/0 ratio counts as 0.
    """
    t = np.asarray(y_true, dtype=bool)
    p = np.asarray(y_pred, dtype=bool)
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    tn = (~t & ~p).sum(axis=0)
    labels = range(t.shape[1])
    sens = np.mean([_ratio(tp[j], tp[j] + fn[j]) for j in labels])
    specif = np.mean([_ratio(tn[j], tn[j] + fp[j]) for j in labels])
    f1 = np.mean([_ratio(2 * tp[j], 2 * tp[j] + fp[j] + fn[j]) for j in labels])
    micro = _ratio(2 * tp.sum(), 2 * tp.sum() + fp.sum() + fn.sum())
    return {
        "accuracy": 100.0 * float((t == p).mean()),
        "sensitivity": 100.0 * float(sens),
        "specificity": 100.0 * float(specif),
        "macro_f1": 100.0 * float(f1),
        "micro_f1": 100.0 * float(micro),
    }


def mean_metrics(reports):
    return {k: float(np.mean([r[k] for r in reports])) for k in METRIC_NAMES}


# -- folds -------------------------------------------------------------------
def kfold_split(ids, k, rng):
    """Shuffle ``ids`` and cut them into ``k`` near-equal validation folds."""
    ids = list(ids)
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if len(ids) < k:
        raise ConfigError(f"cannot split {len(ids)} patients into {k} folds")
    order = rng.permutation(len(ids))
    return [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]


# -- training ------------------------------------------------------------------
@dataclass
class TrainResult:
    state: dict
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int


def masks_for(patients, state):
    return [state.is_masked(p.patient_id) for p in patients]


def train(model, train_set, val_set, cfg, mask_rng, val_mask=None):
    """Full-batch Adam with step-decayed learning rate and early stopping.

    Histopathology is re-masked each epoch with probability ``cfg.dropout``.
    Early stopping watches the validation total loss (the training loss when
    ``val_set`` is empty) and the best snapshot is restored before returning.
    """
    cfg.validate()
    weights = cfg.weights
    val_set = list(val_set or [])
    if val_mask is None:
        val_mask = MaskState.none([p.patient_id for p in val_set])
    history = []
    best, best_epoch, best_state, wait = np.inf, 0, model.snapshot(), 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        state = mask_modality([p.patient_id for p in train_set], cfg.dropout, mask_rng)
        try:
            parts, _ = model.loss(train_set, masks_for(train_set, state), weights)
            ad.backward(parts.total, model.params)
            ad.adam_step(model.params, lr)
            if val_set:
                with ad.no_grad():
                    val_parts, _ = model.loss(val_set, masks_for(val_set, val_mask), weights)
                val_loss = val_parts.total.item()
            else:
                val_loss = parts.total.item()
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}", epoch=epoch) from None
        train_loss = parts.total.item()
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if val_loss < best - cfg.min_delta:
            best, best_epoch, best_state, wait = val_loss, epoch, model.snapshot(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.restore(best_state)
    return TrainResult(best_state, history, best_epoch, float(best), epoch)


def evaluate(model, patients, mask=None):
    """Predict with withheld histopathology where ``mask`` says so; returns (metrics, predictions)."""
    views = [p.without_histo() if mask is not None and mask.is_masked(p.patient_id) else p for p in patients]
    preds, _ = model.predict(views)
    labels = np.stack([p.labels for p in patients]).astype(np.int64)
    return compute_metrics(labels, preds), preds


def embeddings(model, patients, mask=None):
    views = [p.without_histo() if mask is not None and mask.is_masked(p.patient_id) else p for p in patients]
    _, out = model.predict(views)
    return out.embeddings.data


# -- cross-validation -------------------------------------------------------------
@dataclass
class FoldResult:
    fold: int
    train_ids: list
    val_ids: list
    train_metrics: dict
    val_metrics: dict
    result: TrainResult
    model: MMSN


def build_model(cfg, d_mri, d_hist, fold):
    return MMSN(cfg.model, d_mri, d_hist, stream(cfg.seed, "init", fold))


def run_fold(fold, prepared, val_ids, cfg, d_mri, d_hist):
    val_set = [p for p in prepared if p.patient_id in set(val_ids)]
    train_set = [p for p in prepared if p.patient_id not in set(val_ids)]
    model = build_model(cfg, d_mri, d_hist, fold)
    val_mask = mask_modality([p.patient_id for p in val_set], cfg.evaluation_dropout,
                             stream(cfg.seed, "masking", 1, fold))
    res = train(model, train_set, val_set, cfg, stream(cfg.seed, "masking", 0, fold), val_mask)
    train_metrics, _ = evaluate(model, train_set)
    val_metrics, _ = evaluate(model, val_set, val_mask)
    log.info("fold %d: best epoch %d, val micro-F1 %.2f", fold, res.best_epoch, val_metrics["micro_f1"])
    return FoldResult(fold, [p.patient_id for p in train_set], list(val_ids), train_metrics, val_metrics, res, model)


def _run_fold_star(args):
    return run_fold(*args)


def worker_count():
    try:
        return max(1, int(os.environ.get("MMSN_THREADS", "1")))
    except ValueError:
        raise ConfigError("MMSN_THREADS must be an integer") from None


def cross_validate(patients, cfg):
    """k-fold CV over PatientSample objects; deterministic in ``cfg.seed``."""
    cfg.validate()
    prepared = [PreparedPatient.from_sample(p) for p in patients]
    d_mri, d_hist = patients[0].mri.dim, patients[0].histo.dim
    folds = kfold_split([p.patient_id for p in patients], cfg.folds, stream(cfg.seed, "folds"))
    jobs = [(i, prepared, f, cfg, d_mri, d_hist) for i, f in enumerate(folds)]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_fold_star, jobs))
    return [run_fold(*job) for job in jobs]


def metrics_document(folds):
    return {
        "folds": [
            {
                "fold": f.fold,
                "n_train": len(f.train_ids),
                "n_val": len(f.val_ids),
                "val_ids": f.val_ids,
                "best_epoch": f.result.best_epoch,
                "stopped_epoch": f.result.stopped_epoch,
                "training": f.train_metrics,
                "validation": f.val_metrics,
            }
            for f in folds
        ],
        "mean": {
            "aggregation": "per-fold mean",
            "training": mean_metrics([f.train_metrics for f in folds]),
            "validation": mean_metrics([f.val_metrics for f in folds]),
        },
    }


def history_csv(history):
    lines = ["epoch,train_loss,val_loss,lr"]
    lines += [f"{h['epoch']},{h['train_loss']:.17g},{h['val_loss']:.17g},{h['lr']:.17g}" for h in history]
    return "\n".join(lines) + "\n"


def write_artifacts(out_dir, folds, cfg, config_doc=None):
    """history.csv and params.bin per fold, metrics.json and config.json at the top."""
    os.makedirs(out_dir, exist_ok=True)
    for f in folds:
        fold_dir = os.path.join(out_dir, f"fold{f.fold}")
        os.makedirs(fold_dir, exist_ok=True)
        atomic_write(os.path.join(fold_dir, "history.csv"), history_csv(f.result.history))
        f.model.save(os.path.join(fold_dir, "params.bin"))
    doc = metrics_document(folds)
    atomic_write(os.path.join(out_dir, "metrics.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    atomic_write(os.path.join(out_dir, "config.json"), dumps(config_doc if config_doc is not None else cfg.to_dict()))
    return doc
