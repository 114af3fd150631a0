"""Synthetic source/target domain pairs and their CSV format.

Each class is an isotropic Gaussian blob.  The target domain applies a rigid
rotation in the leading 2-D plane plus a translation to the source blobs and
re-samples them with independent noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .numeric import derive_seed, make_rng


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    K: int
    domain_tag: str = "source"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"labels must lie in [0, {self.K})")
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise ValueError(f"classes without samples: {missing.tolist()}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass
class ShiftSpec:
    rotation: float = 0.0
    translation: list[float] | None = None
    noise_std: float = 1.0
    class_sep: float = 4.0
    seed: int = 0

    def translation_vector(self, d: int) -> np.ndarray:
        if self.translation is None:
            return np.zeros(d)
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (d,):
            raise ConfigError(f"translation has length {t.size}, expected {d}")
        return t


def class_centers(K: int, d: int, class_sep: float, seed: int) -> np.ndarray:
    """Blob centers at pairwise distance ``class_sep``.

    With K <= d the centers sit on the coordinate axes (a scaled simplex);
    otherwise they are seeded random directions at the same radius.
    """
    radius = class_sep / math.sqrt(2.0)
    if K <= d:
        centers = np.zeros((K, d))
        centers[np.arange(K), np.arange(K)] = radius
        return centers
    dirs = make_rng(derive_seed(seed, "centers")).standard_normal((K, d))
    return radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def _balanced_labels(n: int, K: int) -> np.ndarray:
    return np.arange(n) % K


def generate_pair(n_per_domain: int, K: int, d: int, spec: ShiftSpec):
    if K < 2:
        raise ConfigError("K must be at least 2")
    if n_per_domain < K:
        raise ConfigError("n_per_domain must be at least K")
    if d < 2:
        raise ConfigError("d must be at least 2")
    if spec.noise_std < 0:
        raise ConfigError("noise_std must be non-negative")
    if spec.class_sep <= 0:
        raise ConfigError("class_sep must be positive")

    centers = class_centers(K, d, spec.class_sep, spec.seed)
    R = rotation_matrix(d, spec.rotation)
    shift = spec.translation_vector(d)

    def sample(tag):
        rng = make_rng(derive_seed(spec.seed, tag))
        labels = rng.permutation(_balanced_labels(n_per_domain, K))
        noise = rng.standard_normal((n_per_domain, d)) * spec.noise_std
        return centers[labels] + noise, labels

    xs, ys = sample("source")
    xt, yt = sample("target")
    xt = xt @ R.T + shift
    return (
        DomainDataset(xs, ys, K, "source"),
        DomainDataset(xt, yt, K, "target"),
    )


def save_csv(ds: DomainDataset, path) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(ds.d)] + ["label"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path, K: int | None = None, domain_tag: str = "source") -> DomainDataset:
    """Read a dataset written by :func:`save_csv`.

    ``K`` defaults to ``max(label) + 1``; pass it explicitly to range-check
    labels against a known class count.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("no rows", path=path)
    header = rows[0]
    if not header or header[-1] != "label" or any(
        h != f"f{j}" for j, h in enumerate(header[:-1])
    ):
        raise DataFormatError("bad header, expected f0,...,f{d-1},label", line=1, path=path)
    d = len(header) - 1
    if len(rows) == 1:
        raise DataFormatError("no rows", path=path)

    feats = np.empty((len(rows) - 1, d))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 1:
            raise DataFormatError(f"expected {d + 1} columns, got {len(row)}", line=lineno, path=path)
        try:
            feats[i] = [float(v) for v in row[:-1]]
        except ValueError:
            raise DataFormatError("non-numeric feature", line=lineno, path=path) from None
        if not np.all(np.isfinite(feats[i])):
            raise DataFormatError("non-finite feature", line=lineno, path=path)
        try:
            labels[i] = int(row[-1])
        except ValueError:
            raise DataFormatError("label is not an integer", line=lineno, path=path) from None
        if labels[i] < 0 or (K is not None and labels[i] >= K):
            raise DataFormatError(f"label {labels[i]} out of range", line=lineno, path=path)
    if K is None:
        K = int(labels.max()) + 1
    try:
        return DomainDataset(feats, labels, K, domain_tag)
    except ValueError as exc:
        raise DataFormatError(str(exc), path=path) from None
