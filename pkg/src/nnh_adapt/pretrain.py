"""Source-model training with label-smoothed cross-entropy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .model import SGD, TargetModel, backward, forward, init_model, predict_proba
from .numeric import LOG_EPS, derive_seed, make_rng
from .synthdata import DomainDataset

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    gamma: float = 0.1
    d_h: int = 64
    d_b: int = 16
    seed: int = 2020

    def validate(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.batch < 2:
            raise ConfigError("batch must be at least 2")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")
        return self


def smooth_labels(y, K: int, gamma: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    out = np.full((y.size, K), gamma / K)
    out[np.arange(y.size), y] += 1.0 - gamma
    return out


def source_ce_loss(p, lbar) -> float:
    p = np.asarray(p, dtype=np.float64)
    lbar = np.asarray(lbar, dtype=np.float64)
    if p.shape != lbar.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {lbar.shape}")
    return float(-(lbar * np.log(np.maximum(p, LOG_EPS))).sum(axis=1).mean())


def source_ce_grad(p, lbar) -> np.ndarray:
    """dL/dp of :func:`source_ce_loss`; zero where the log clamp is active."""
    n = p.shape[0]
    return np.where(p >= LOG_EPS, -lbar / (n * np.maximum(p, LOG_EPS)), 0.0)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


def evaluate_source(m: TargetModel, ds: DomainDataset, gamma: float) -> tuple[float, float]:
    p = predict_proba(m, ds.features)
    loss = source_ce_loss(p, smooth_labels(ds.labels, ds.K, gamma))
    acc = float((p.argmax(axis=1) == ds.labels).mean())
    return loss, acc


def iterate_batches(n: int, batch: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of size 1 is merged into the previous one."""
    order = rng.permutation(n)
    starts = list(range(0, n, batch))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


def train_source(ds: DomainDataset, cfg: PretrainConfig, history: list | None = None) -> TargetModel:
    cfg.validate()
    m = init_model(ds.d, cfg.d_h, cfg.d_b, ds.K, make_rng(derive_seed(cfg.seed, "init")))
    lbar_all = smooth_labels(ds.labels, ds.K, cfg.gamma)
    opt = SGD(cfg.lr, cfg.momentum)
    for epoch in range(1, cfg.epochs + 1):
        rng = make_rng(derive_seed(cfg.seed, "shuffle", epoch))
        m.train()
        for idx in iterate_batches(ds.n, cfg.batch, rng):
            trace = forward(m, ds.features[idx])
            loss = source_ce_loss(trace.p, lbar_all[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite source loss at epoch {epoch}")
            grads = backward(m, trace, dp=source_ce_grad(trace.p, lbar_all[idx]))
            opt.step(m, grads)
        m.eval()
        loss, acc = evaluate_source(m, ds, cfg.gamma)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite source loss at epoch {epoch}")
        log.debug("pretrain epoch %d loss %.5f acc %.4f", epoch, loss, acc)
        if history is not None:
            history.append(EpochLog(epoch, loss, acc))
    m.classifier_frozen = False
    return m.eval()


def write_log(history: list[EpochLog], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            w.writerow([row.epoch, repr(row.loss), repr(row.accuracy)])
