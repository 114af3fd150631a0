"""Adaptation phase: neighborhood-fused information maximization plus
pseudo-label self-supervision, trained epoch by epoch with a frozen classifier."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .geometry import chain_search_all, dynamical_nnh_batch, nearest_confident
from .model import SGD, TargetModel, extractor_backward, extractor_forward, head_backward, head_forward
from .model import predict  # noqa: F401  (re-exported: inference needs no neighborhood)
from .model import save_checkpoint
from .numeric import LOG_EPS, derive_seed, make_rng, xlogx_clamped
from .pretrain import iterate_batches
from .selflabel import AuxiliaryCache, build_epoch_cache

log = logging.getLogger(__name__)

MODES = ("nnh", "shnnh")
CONFIDENT_RULES = ("intersection", "entropy", "distance")


@dataclass
class AdaptConfig:
    beta: float = 0.2
    alpha: float = 0.85
    delta: float | None = None  # std of lambda; None means 1 - alpha
    fix_lambda: bool = False
    omega_i: float = 0.5
    omega_in: float = 0.5
    eta_i: float = 0.5
    eta_in: float = 0.5
    use_im: bool = True
    epochs: int = 15
    iters: int | None = None  # per epoch; None means ceil(n_t / batch)
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    lr_schedule: str = "constant"
    mode: str = "nnh"
    seed: int = 2020
    eq5_literal_min: bool = False
    eq11_literal_min: bool = False
    kmeans_rounds: int = 1
    confident_rule: str = "intersection"
    chain: bool = True

    def validate(self) -> "AdaptConfig":
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.omega_i < 0 or self.omega_in < 0 or self.omega_i + self.omega_in <= 0:
            raise ConfigError("omega weights must be non-negative with a positive sum")
        if self.eta_i < 0 or self.eta_in < 0:
            raise ConfigError("eta weights must be non-negative")
        if self.batch < 2:
            raise ConfigError("batch must be at least 2")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.confident_rule not in CONFIDENT_RULES:
            raise ConfigError(f"confident_rule must be one of {CONFIDENT_RULES}")
        if not 0 <= self.kmeans_rounds <= 5:
            raise ConfigError("kmeans_rounds must lie in 0..5")
        if self.lr_schedule not in ("constant", "inverse"):
            raise ConfigError("lr_schedule must be 'constant' or 'inverse'")
        return self

    def lambda_params(self) -> tuple[float, float]:
        if self.fix_lambda:
            return 1.0, 0.0
        return self.alpha, (1.0 - self.alpha) if self.delta is None else self.delta

    def as_dict(self) -> dict:
        return asdict(self)


def fuse_probs(P_i, P_in, omega_i: float, omega_in: float) -> np.ndarray:
    P_i = np.asarray(P_i, dtype=np.float64)
    P_in = np.asarray(P_in, dtype=np.float64)
    if P_i.shape != P_in.shape:
        raise ValueError(f"shape mismatch: {P_i.shape} vs {P_in.shape}")
    return omega_i * P_i + omega_in * P_in


def im_loss_and_grad(fused) -> tuple[float, np.ndarray]:
    """Mean per-row entropy plus sum of marginal * log(marginal), and dL/dfused."""
    fused = np.asarray(fused, dtype=np.float64)
    n = fused.shape[0]
    xl, dxl = xlogx_clamped(fused)
    rho = fused.mean(axis=0)
    rl, drl = xlogx_clamped(rho)
    loss = -xl.sum(axis=1).mean() + rl.sum()
    grad = (-dxl + drl[None, :]) / n
    return float(loss), grad


def im_loss(fused) -> float:
    return im_loss_and_grad(fused)[0]


def _check_labels(y, K):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"pseudo-labels must lie in [0, {K})")
    return y


def ss_loss_and_grad(P_i, P_in, pseudo, eta_i: float, eta_in: float):
    """Both members of each pair are supervised by the anchor's pseudo-label."""
    P_i = np.asarray(P_i, dtype=np.float64)
    P_in = np.asarray(P_in, dtype=np.float64)
    n, K = P_i.shape
    y = _check_labels(pseudo, K)
    rows = np.arange(n)
    out = []
    total = 0.0
    for P, eta in ((P_i, eta_i), (P_in, eta_in)):
        py = P[rows, y]
        total += eta * float(-np.log(np.maximum(py, LOG_EPS)).mean())
        g = np.zeros_like(P)
        g[rows, y] = np.where(py >= LOG_EPS, -eta / (n * np.maximum(py, LOG_EPS)), 0.0)
        out.append(g)
    return total, out[0], out[1]


def ss_loss(P_i, P_in, pseudo, eta_i: float, eta_in: float) -> float:
    return ss_loss_and_grad(P_i, P_in, pseudo, eta_i, eta_in)[0]


@dataclass
class ObjectiveResult:
    loss: float
    im: float
    ss: float
    grads: dict
    neighbors: np.ndarray
    P_i: np.ndarray
    P_in: np.ndarray


def find_neighbors(h, idx, cache: AuxiliaryCache, cfg: AdaptConfig) -> np.ndarray:
    """Dynamical neighbor (or home sample) for each anchor's current feature."""
    if cache.geometry == "shnnh" and cache.confident is not None:
        if cfg.chain:
            return chain_search_all(cache.Hbar, cache.confident, cache.index, queries=h, starts=idx, fallback=True)
        return nearest_confident(cache.Hbar, cache.confident, cache.index, queries=h, starts=idx, fallback=True)
    return dynamical_nnh_batch(h, idx, cache.index)


def objective(idx, cache: AuxiliaryCache, m: TargetModel, cfg: AdaptConfig, Xt,
              update_stats: bool = True) -> ObjectiveResult:
    """Joint loss on one batch of anchors and its gradients w.r.t. extractor
    and bottleneck (classifier gradients are zero while frozen)."""
    if not m.classifier_frozen:
        raise ValueError("objective expects a frozen classifier")
    idx = np.asarray(idx)
    m.train()
    h, ext_cache = extractor_forward(m, np.asarray(Xt, dtype=np.float64)[idx])
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite features in adaptation batch")
    nbrs = find_neighbors(h, idx, cache, cfg)
    # anchors and neighbors are normalized with their own batch statistics;
    # only the anchor pass moves the running statistics
    _, _, P_i, anchor_cache = head_forward(m, h, update_stats)
    _, _, P_in, nbr_cache = head_forward(m, cache.Hbar[nbrs], update_stats=False)

    fused = fuse_probs(P_i, P_in, cfg.omega_i, cfg.omega_in)
    l_im, d_fused = im_loss_and_grad(fused)
    l_ss, d_pi, d_pin = ss_loss_and_grad(P_i, P_in, cache.pseudo[idx], cfg.eta_i, cfg.eta_in)
    w_im = 1.0 if cfg.use_im else 0.0
    total = w_im * l_im + cfg.beta * l_ss

    grads, dh = head_backward(m, anchor_cache, P_i, dp=w_im * cfg.omega_i * d_fused + cfg.beta * d_pi)
    nbr_grads, _ = head_backward(m, nbr_cache, P_in, dp=w_im * cfg.omega_in * d_fused + cfg.beta * d_pin)
    for name, g in nbr_grads.items():
        grads[name] = grads[name] + g
    grads.update(extractor_backward(m, ext_cache, dh))
    return ObjectiveResult(total, l_im, l_ss, grads, nbrs, P_i, P_in)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    im: float
    ss: float
    pseudo_acc: float
    target_acc: float
    geometry: str = "nnh"


@dataclass
class AdaptResult:
    model: TargetModel
    history: list[EpochRecord] = field(default_factory=list)


def init_target(source: TargetModel) -> TargetModel:
    m = source.copy()
    m.classifier_frozen = True
    return m


def _lr_at(cfg: AdaptConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "inverse" and total > 0:
        return cfg.lr * (1 + 10 * step / total) ** -0.75
    return cfg.lr


def adapt_loop(source: TargetModel, Xt, cfg: AdaptConfig, yt=None, checkpoint_path=None,
               on_epoch=None) -> AdaptResult:
    """Adapt a copy of ``source`` to target features ``Xt``.

    ``yt`` is only used to report accuracies in the history.  If training
    diverges, the last finite model is written to ``checkpoint_path`` (when
    given) before :class:`NumericError` propagates.
    """
    cfg.validate()
    Xt = np.asarray(Xt, dtype=np.float64)
    if Xt.ndim != 2 or Xt.shape[1] != source.d:
        raise ValueError(f"target features must be (n, {source.d}), got {Xt.shape}")
    m = init_target(source)
    n = Xt.shape[0]
    iters = cfg.iters if cfg.iters is not None else math.ceil(n / cfg.batch)
    opt = SGD(cfg.lr, cfg.momentum)
    result = AdaptResult(m)
    total_steps = cfg.epochs * iters
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        try:
            cache = build_epoch_cache(m, Xt, cfg, make_rng(derive_seed(cfg.seed, "lambda", epoch)))
        except NumericError:
            if checkpoint_path is not None:
                save_checkpoint(m, checkpoint_path)
            raise
        batch_rng = make_rng(derive_seed(cfg.seed, "batches", epoch))
        batches = []
        sums = np.zeros(3)
        for _ in range(iters):
            if not batches:
                batches = list(iterate_batches(n, cfg.batch, batch_rng))[::-1]
            idx = batches.pop()
            last_good = {k: v.copy() for k, v in m.params.items()}
            try:
                res = objective(idx, cache, m, cfg, Xt)
                if not np.isfinite(res.loss):
                    raise NumericError(f"non-finite adaptation loss at epoch {epoch}")
                opt.lr = _lr_at(cfg, step, total_steps)
                opt.step(m, res.grads)
                if not all(np.all(np.isfinite(v)) for v in m.params.values()):
                    raise NumericError(f"non-finite parameters at epoch {epoch}")
            except NumericError:
                m.params.update(last_good)
                if checkpoint_path is not None:
                    save_checkpoint(m, checkpoint_path)
                raise
            step += 1
            sums += (res.loss, res.im, res.ss)
        means = sums / max(iters, 1)
        pseudo_acc = target_acc = float("nan")
        if yt is not None:
            yt = np.asarray(yt)
            pseudo_acc = float((cache.pseudo == yt).mean())
            target_acc = float((predict(m, Xt) == yt).mean())
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]),
                          pseudo_acc, target_acc, cache.geometry)
        log.debug("adapt epoch %d %s", epoch, rec)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, cache)
    m.eval()
    return result


HISTORY_COLUMNS = ("epoch", "L_total", "L_im", "L_ss", "pseudo_label_accuracy", "target_accuracy")


def write_history(history: list[EpochRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.im), repr(r.ss), repr(r.pseudo_acc), repr(r.target_acc)])
