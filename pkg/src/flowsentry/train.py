"""Mini-batch Adam training with validation early stopping and a small grid search."""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import EmptySplit, SingleClassTrainSplit
from .evaluate import compute_metrics, confusion_matrix

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-2, 1e-3, 1e-4)
DEFAULT_BATCH_GRID = (32, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 0
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must all be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stop_reason: str = ""

    @property
    def epochs(self):
        return len(self.val_loss)

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("epoch", "train_loss", "val_loss", "val_acc", "val_f1"))
            for i in range(self.epochs):
                w.writerow((i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                            repr(self.val_acc[i]), repr(self.val_f1[i])))


def weighted_loss(p, y, weights):
    """Mean class-weighted BCE of probabilities ``p`` against labels ``y``."""
    y = np.asarray(y, dtype=np.int64)
    return float(np.mean(nn.bce_loss(p, y, np.asarray(weights)[y])))


def _split_arrays(d, which):
    x, y = d.arrays(which)
    if len(x) == 0:
        raise EmptySplit(f"{which} split is empty")
    return x.astype(np.float64), y.astype(np.int64)


def train(d, cfg, n_filters=nn.N_FILTERS):
    """Train on ``d.split.train``; returns (best-epoch params, history)."""
    x_tr, y_tr = _split_arrays(d, "train")
    x_val, y_val = _split_arrays(d, "val")
    if np.unique(y_tr).size < 2:
        raise SingleClassTrainSplit("training split holds a single class")
    weights = np.asarray(d.class_weights, dtype=np.float64)

    rng = np.random.default_rng(cfg.seed)
    params = nn.ModelParams.init(rng, n_filters)
    params.trained_with = nn.trained_with(d.t, d.n, d.stats, cfg.seed)
    state = nn.AdamState.zeros_like(params)

    hist = TrainHistory()
    best_params, best_loss, since_best = params, np.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yb = y_tr[idx]
            p, cache = nn.forward(x_tr[idx], params, "train", rng)
            loss_sum += float(np.sum(nn.bce_loss(p, yb, weights[yb])))
            grads = nn.backward(cache, yb, weights[yb])
            params, state = nn.adam_step(params, grads, state, cfg.lr)

        p_val = nn.predict_proba(params, x_val)
        val_loss = weighted_loss(p_val, y_val, weights)
        m = compute_metrics(confusion_matrix(nn.classify(p_val), y_val))
        hist.train_loss.append(loss_sum / len(x_tr))
        hist.val_loss.append(val_loss)
        hist.val_acc.append(m.accuracy)
        hist.val_f1.append(m.f1)
        log.debug("epoch %d train %.5f val %.5f acc %.4f f1 %.4f", epoch,
                  hist.train_loss[-1], val_loss, m.accuracy, m.f1)

        if val_loss < best_loss - cfg.min_delta:
            best_params, best_loss, since_best = params, val_loss, 0
            hist.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                hist.stop_reason = "patience"
                break
    else:
        hist.stop_reason = "max_epochs"
    log.info("lr=%g batch=%d: stopped at epoch %d (%s), best epoch %d val loss %.5f",
             cfg.lr, cfg.batch_size, hist.epochs, hist.stop_reason, hist.best_epoch, best_loss)
    return best_params, hist


def grid_search(d, lrs=DEFAULT_LR_GRID, batch_sizes=DEFAULT_BATCH_GRID, base=TrainConfig(),
                n_filters=nn.N_FILTERS):
    """Train every (lr, batch) point; the best validation F1 wins.

    Ties go to the lower validation loss, then the smaller learning rate.
    Returns (best config, best params, best history, summaries).
    """
    points = [(lr, bs) for lr in lrs for bs in batch_sizes]
    if not points:
        raise ValueError("empty hyperparameter grid")
    summaries, results = [], []
    for i, (lr, bs) in enumerate(points):
        cfg = replace(base, lr=lr, batch_size=bs, seed=base.seed + i)
        params, hist = train(d, cfg, n_filters)
        best = hist.best_epoch - 1
        summaries.append({
            "index": i,
            "lr": lr,
            "batch_size": bs,
            "seed": cfg.seed,
            "epochs": hist.epochs,
            "best_epoch": hist.best_epoch,
            "stop_reason": hist.stop_reason,
            "val_loss": hist.val_loss[best],
            "val_acc": hist.val_acc[best],
            "val_f1": hist.val_f1[best],
        })
        results.append((cfg, params, hist))
    chosen = min(range(len(points)),
                 key=lambda i: (-summaries[i]["val_f1"], summaries[i]["val_loss"],
                                summaries[i]["lr"], i))
    for s in summaries:
        s["chosen"] = s["index"] == chosen
    cfg, params, hist = results[chosen]
    return cfg, params, hist, summaries


def write_grid_summary(cfg, summaries, path):
    with open(path, "w") as f:
        json.dump({"chosen": asdict(cfg), "points": summaries}, f, indent=1)
        f.write("\n")


def evaluate_split(params, d, which="test"):
    """Infer-mode probabilities for one split plus the wall time of the inference loop."""
    nn.check_config(params, d.t, d.n, d.stats.fingerprint())
    x, y = d.arrays(which)
    if len(x) == 0:
        raise EmptySplit(f"{which} split is empty")
    x = np.ascontiguousarray(x, dtype=np.float64)
    start = time.perf_counter()
    p = nn.predict_proba(params, x)
    elapsed = time.perf_counter() - start
    return p, y, elapsed
