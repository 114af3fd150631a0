"""Per-epoch initialization stage: frozen auxiliary features, weighted
k-means centroids, similarity logits and fused pseudo-labels."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NoConfidentSamples, NumericError
from .geometry import (
    ConfidentSet,
    CosineIndex,
    chain_search_all,
    confident_split,
    nearest_confident,
    static_nnh,
)
from .model import TargetModel, forward
from .numeric import sample_normal_clamped

log = logging.getLogger(__name__)


@dataclass
class AuxiliaryCache:
    Hbar: np.ndarray
    Bbar: np.ndarray
    Vbar: np.ndarray
    Pbar: np.ndarray
    Qbar: np.ndarray | None = None
    centroids: np.ndarray | None = None
    pseudo: np.ndarray | None = None
    neighbors: np.ndarray | None = None
    confident: ConfidentSet | None = None
    geometry: str = "nnh"
    index: CosineIndex | None = None

    @property
    def n(self) -> int:
        return self.Hbar.shape[0]

    def freeze(self) -> "AuxiliaryCache":
        for name in ("Hbar", "Bbar", "Vbar", "Pbar", "Qbar", "centroids", "pseudo", "neighbors"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        return self

    def dump_csv(self, directory) -> None:
        """One CSV per array field, for debugging."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("Hbar", "Bbar", "Vbar", "Pbar", "Qbar", "centroids", "pseudo", "neighbors"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.atleast_2d(arr.T).T if arr.ndim == 1 else arr
            with (directory / f"{name}.csv").open("w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for row in arr:
                    w.writerow([repr(x.item()) for x in row])
        if self.confident is not None:
            np.savetxt(directory / "confident.csv", self.confident.members.astype(int), fmt="%d")


def compute_aux(m: TargetModel, Xt) -> AuxiliaryCache:
    Xt = np.asarray(Xt, dtype=np.float64)
    if Xt.ndim != 2 or Xt.shape[1] != m.d:
        raise ValueError(f"target features must be (n, {m.d}), got {Xt.shape}")
    mode = m.mode
    m.eval()
    try:
        tr = forward(m, Xt)
    finally:
        m.mode = mode
    if not np.all(np.isfinite(tr.p)) or not np.all(np.isfinite(tr.h)):
        raise NumericError("non-finite auxiliary features")
    return AuxiliaryCache(tr.h, tr.b, tr.v, tr.p)


def weighted_centroids(Bbar, Pbar, rounds: int = 1) -> np.ndarray:
    """Probability-weighted class means of ``Bbar``, refined by hard rounds.

    Each refinement round reassigns every row to its cosine-nearest centroid
    and recomputes plain means; a class left empty keeps its previous centroid.
    """
    Bbar = np.asarray(Bbar, dtype=np.float64)
    W = np.asarray(Pbar, dtype=np.float64)
    mass = W.sum(axis=0)
    if np.any(mass <= 0):
        raise ValueError(f"classes with zero total weight: {np.flatnonzero(mass <= 0).tolist()}")
    centroids = (W.T @ Bbar) / mass[:, None]
    K = W.shape[1]
    for _ in range(rounds):
        assign = np.argmax(_cosine_matrix(Bbar, centroids), axis=1)
        onehot = np.eye(K)[assign]
        counts = onehot.sum(axis=0)
        empty = counts == 0
        if empty.any():
            log.warning("k-means round left classes %s empty; keeping previous centroids",
                        np.flatnonzero(empty).tolist())
        new = (onehot.T @ Bbar) / np.maximum(counts, 1)[:, None]
        centroids = np.where(empty[:, None], centroids, new)
    return centroids


def _cosine_matrix(A, B) -> np.ndarray:
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    if np.any(na == 0):
        raise ValueError("zero-norm feature row")
    if np.any(nb == 0):
        raise ValueError("zero-norm centroid")
    return np.clip((A / na) @ (B / nb).T, -1.0, 1.0)


def similarity_logits(Bbar, centroids) -> np.ndarray:
    return 0.5 * (1.0 + _cosine_matrix(np.asarray(Bbar, float), np.asarray(centroids, float)))


def fused_pseudo_labels(Qbar, neighbors, rng: np.random.Generator, alpha: float = 0.85,
                        delta: float = 0.15, literal_min: bool = False) -> np.ndarray:
    """Pick the class with the highest fused similarity per anchor.

    ``neighbors[i]`` is the neighbor index of anchor ``i``.  One clamped
    lambda vector of length K is drawn per anchor.
    """
    Qbar = np.asarray(Qbar, dtype=np.float64)
    neighbors = np.asarray(neighbors)
    if neighbors.shape != (Qbar.shape[0],):
        raise ValueError("need exactly one neighbor per anchor")
    lam = sample_normal_clamped(rng, alpha, delta, Qbar.shape)
    fused = fuse_similarity(Qbar, neighbors, lam)
    return np.argmin(fused, axis=1) if literal_min else np.argmax(fused, axis=1)


def fuse_similarity(Qbar, neighbors, lam) -> np.ndarray:
    """Per-class blend ``lam * q_anchor + (1 - lam) * q_neighbor``."""
    Qbar = np.asarray(Qbar, dtype=np.float64)
    return lam * Qbar + (1.0 - lam) * Qbar[np.asarray(neighbors)]


def build_geometry(cache: AuxiliaryCache, cfg) -> None:
    """Fill ``cache.neighbors`` (and ``confident`` for shnnh) in place."""
    cache.index = CosineIndex(cache.Hbar)
    cache.geometry = "nnh"
    if cfg.mode == "shnnh":
        try:
            conf = confident_split(cache.Pbar, cache.Qbar, cfg.confident_rule, cfg.eq11_literal_min)
            if cfg.chain:
                cache.neighbors = chain_search_all(cache.Hbar, conf, cache.index, fallback=True)
            else:
                cache.neighbors = nearest_confident(cache.Hbar, conf, cache.index, fallback=True)
            cache.confident = conf
            cache.geometry = "shnnh"
            return
        except NoConfidentSamples as exc:
            log.warning("shnnh geometry unavailable this epoch (%s); using nnh", exc)
            cache.confident = None
    cache.neighbors = static_nnh(cache.Hbar, cache.index)


def build_epoch_cache(m: TargetModel, Xt, cfg, rng: np.random.Generator) -> AuxiliaryCache:
    cache = compute_aux(m, Xt)
    cache.centroids = weighted_centroids(cache.Bbar, cache.Pbar, cfg.kmeans_rounds)
    cache.Qbar = similarity_logits(cache.Bbar, cache.centroids)
    build_geometry(cache, cfg)
    alpha, delta = cfg.lambda_params()
    cache.pseudo = fused_pseudo_labels(cache.Qbar, cache.neighbors, rng, alpha, delta, cfg.eq5_literal_min)
    return cache.freeze()
