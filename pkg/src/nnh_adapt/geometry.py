"""Neighborhood construction over cached deep features.

Everything here is brute force on cosine distance ``1 - cos(a, b)``; argmin
ties resolve to the lowest index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NoConfidentSamples
from .numeric import row_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Neighborhood:
    anchor: int
    neighbor: int
    mode: str = "nnh"

    def __post_init__(self):
        if self.anchor == self.neighbor:
            raise ValueError("anchor and neighbor must differ")


class CosineIndex:
    """Exhaustive cosine-distance search over a fixed pool of rows.

    Zero-norm rows can never be returned; ``skipped`` counts them.
    """

    def __init__(self, pool):
        pool = np.asarray(pool, dtype=np.float64)
        if pool.ndim != 2:
            raise ValueError("pool must be a matrix")
        norms = np.linalg.norm(pool, axis=1)
        self.valid = norms > 0
        self.skipped = int((~self.valid).sum())
        if self.skipped:
            log.warning("cosine search: %d zero-norm pool rows skipped", self.skipped)
        self.unit = np.zeros_like(pool)
        self.unit[self.valid] = pool[self.valid] / norms[self.valid, None]
        self.n = pool.shape[0]
        self._sim = None

    def distances(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        qn = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(qn == 0):
            raise ValueError("query has zero norm")
        dist = 1.0 - (q / qn) @ self.unit.T
        dist[..., ~self.valid] = np.inf
        return dist

    def pairwise(self) -> np.ndarray:
        """Pool-vs-pool distance matrix (cached); invalid rows/cols are +inf."""
        if self._sim is None:
            d = 1.0 - self.unit @ self.unit.T
            d[:, ~self.valid] = np.inf
            d[~self.valid, :] = np.inf
            self._sim = d
        return self._sim

    def nearest(self, query, exclude=()) -> int:
        dist = self.distances(query)
        return _argmin_excluding(dist, exclude)


def _argmin_excluding(dist: np.ndarray, exclude) -> int:
    dist = dist.copy()
    excl = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude)
    if excl.size:
        dist[excl] = np.inf
    j = int(np.argmin(dist))
    if not np.isfinite(dist[j]):
        raise ValueError("no eligible pool row (all excluded or zero-norm)")
    return j


def nearest_neighbor(query, pool, exclude=()) -> int:
    return CosineIndex(pool).nearest(query, exclude)


def static_nnh(Hbar, index: CosineIndex | None = None) -> np.ndarray:
    """Neighbor index for every cached row, excluding the row itself."""
    Hbar = np.asarray(Hbar, dtype=np.float64)
    n = Hbar.shape[0]
    if n < 2:
        raise ValueError("static NNH needs at least 2 samples")
    index = index or CosineIndex(Hbar)
    if np.any(~index.valid):
        raise ValueError("static NNH anchors must have non-zero features")
    dist = index.pairwise().copy()
    np.fill_diagonal(dist, np.inf)
    nbrs = np.argmin(dist, axis=1)
    if not np.all(np.isfinite(dist[np.arange(n), nbrs])):
        raise ValueError("no eligible neighbor for some anchor")
    return nbrs


def dynamical_nnh(h_current, anchor: int, Hbar, index: CosineIndex | None = None) -> Neighborhood:
    index = index or CosineIndex(Hbar)
    return Neighborhood(anchor, index.nearest(h_current, (anchor,)), "nnh")


def dynamical_nnh_batch(H_current, anchors, index: CosineIndex) -> np.ndarray:
    """Vectorized :func:`dynamical_nnh` for a batch of anchors."""
    dist = index.distances(H_current)
    anchors = np.asarray(anchors)
    dist[np.arange(anchors.size), anchors] = np.inf
    nbrs = np.argmin(dist, axis=1)
    if not np.all(np.isfinite(dist[np.arange(anchors.size), nbrs])):
        raise ValueError("no eligible neighbor for some anchor")
    return nbrs


@dataclass(frozen=True)
class ConfidentSet:
    members: np.ndarray  # bool flags over target indices
    gamma_e: float
    gamma_d: float
    entropy_members: np.ndarray
    distance_members: np.ndarray

    def __contains__(self, i) -> bool:
        return bool(self.members[i])

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.members)

    def __len__(self) -> int:
        return int(self.members.sum())


def centroid_distance_scores(Qbar, literal_min: bool = False) -> np.ndarray:
    """Per-sample distance to the nearest centroid, ``1 - max_k q``.

    ``literal_min`` switches to the raw ``min_k q`` score.
    """
    Qbar = np.asarray(Qbar, dtype=np.float64)
    return Qbar.min(axis=1) if literal_min else 1.0 - Qbar.max(axis=1)


def confident_split(Pbar, Qbar, combine: str = "intersection", literal_min: bool = False) -> ConfidentSet:
    """Below-median entropy AND below-median centroid distance.

    ``combine`` may be ``"intersection"``, ``"entropy"`` or ``"distance"`` to
    keep only one of the two criteria.
    """
    ent = row_entropy(Pbar)
    dist = centroid_distance_scores(Qbar, literal_min)
    gamma_e = float(np.median(ent))
    gamma_d = float(np.median(dist))
    ce = ent < gamma_e
    cd = dist < gamma_d
    if combine == "intersection":
        members = ce & cd
    elif combine == "entropy":
        members = ce
    elif combine == "distance":
        members = cd
    else:
        raise ValueError(f"unknown combine rule {combine!r}")
    if not members.any():
        raise NoConfidentSamples("no confident samples")
    return ConfidentSet(members, gamma_e, gamma_d, ce, cd)


def chain_search(start: int, Hbar, C, query=None, index: CosineIndex | None = None,
                 return_path: bool = False):
    """Follow nearest unvisited neighbors from ``start`` until a confident one.

    The first hop is taken from ``query`` (defaults to the cached row of
    ``start``); ``start`` joins the visited set up front so it is never
    returned.  ``C`` is a :class:`ConfidentSet` or a boolean member mask.
    """
    index = index or CosineIndex(Hbar)
    members = C.members if isinstance(C, ConfidentSet) else np.asarray(C, dtype=bool)
    if not members.any():
        raise NoConfidentSamples("no confident samples")
    n = index.n
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    dist = index.pairwise()[start] if query is None else index.distances(query)
    path = []
    for _ in range(n):
        dist = np.where(visited, np.inf, dist)
        g = int(np.argmin(dist))
        if not np.isfinite(dist[g]):
            break
        visited[g] = True
        path.append(g)
        if members[g]:
            return (g, path) if return_path else g
        dist = index.pairwise()[g]
    raise RuntimeError("chain search exhausted the pool without reaching a confident sample")


def _stranded(members, index: CosineIndex, starts) -> np.ndarray:
    """Starts that cannot reach any confident sample other than themselves."""
    reachable = members & index.valid
    total = int(reachable.sum())
    return total - reachable[starts].astype(int) == 0


def _first_hop(index: CosineIndex, starts, queries) -> np.ndarray:
    dist = (index.pairwise()[starts] if queries is None else index.distances(queries)).copy()
    dist[np.arange(starts.size), starts] = np.inf
    out = np.argmin(dist, axis=1)
    if not np.all(np.isfinite(dist[np.arange(starts.size), out])):
        raise ValueError("no eligible neighbor for some anchor")
    return out


def chain_search_all(Hbar, C, index: CosineIndex | None = None, queries=None, starts=None,
                     fallback: bool = False) -> np.ndarray:
    """Home sample for every start index (all rows of ``Hbar`` by default).

    Runs the chains in lock-step so each hop is one vectorized argmin.  With
    ``fallback``, a start that is itself the only reachable confident sample
    gets its plain nearest neighbor instead of an error.
    """
    index = index or CosineIndex(Hbar)
    members = C.members if isinstance(C, ConfidentSet) else np.asarray(C, dtype=bool)
    if not members.any():
        raise NoConfidentSamples("no confident samples")
    n = index.n
    starts = np.arange(n) if starts is None else np.asarray(starts)
    m = starts.size
    rows = np.arange(m)
    home = np.full(m, -1)
    active = np.ones(m, dtype=bool)
    if fallback:
        stuck = _stranded(members, index, starts)
        if stuck.any():
            log.warning("chain search: %d start(s) cannot reach another confident sample; "
                        "using nearest neighbors", int(stuck.sum()))
            home[stuck] = _first_hop(index, starts[stuck], None if queries is None else np.asarray(queries)[stuck])
            active[stuck] = False
    visited = np.zeros((m, n), dtype=bool)
    visited[rows, starts] = True
    dist = index.pairwise()[starts] if queries is None else index.distances(queries)
    pair = index.pairwise()
    for _ in range(n):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        dsub = np.where(visited[act], np.inf, dist[act])
        g = np.argmin(dsub, axis=1)
        ok = np.isfinite(dsub[np.arange(act.size), g])
        if not ok.all():
            raise RuntimeError("chain search exhausted the pool without reaching a confident sample")
        visited[act, g] = True
        hit = members[g]
        home[act[hit]] = g[hit]
        active[act[hit]] = False
        cont = act[~hit]
        dist[cont] = pair[g[~hit]]
    if np.any(home < 0):
        raise RuntimeError("chain search did not terminate")
    return home


def nearest_confident(Hbar, C, index: CosineIndex | None = None, queries=None, starts=None,
                      fallback: bool = False) -> np.ndarray:
    """Nearest confident sample (no chaining), never the start itself.

    ``fallback`` behaves as in :func:`chain_search_all`.
    """
    index = index or CosineIndex(Hbar)
    members = C.members if isinstance(C, ConfidentSet) else np.asarray(C, dtype=bool)
    n = index.n
    starts = np.arange(n) if starts is None else np.asarray(starts)
    dist = (index.pairwise()[starts] if queries is None else index.distances(queries)).copy()
    dist[:, ~members] = np.inf
    dist[np.arange(starts.size), starts] = np.inf
    out = np.argmin(dist, axis=1)
    bad = ~np.isfinite(dist[np.arange(starts.size), out])
    if bad.any():
        if not fallback:
            raise NoConfidentSamples("no confident sample other than the anchor")
        log.warning("nearest confident: %d start(s) stranded; using nearest neighbors", int(bad.sum()))
        out[bad] = _first_hop(index, starts[bad], None if queries is None else np.asarray(queries)[bad])
    return out
