"""Accuracy/confusion reports, PCA projection export and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adapt_loop
from .model import TargetModel, predict
from .pretrain import PretrainConfig, train_source
from .synthdata import DomainDataset, ShiftSpec, generate_pair

log = logging.getLogger(__name__)


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    seed: int | None = None
    fingerprint: str | None = None


def evaluate(pred, truth, K: int, seed=None, fingerprint=None) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} labels must lie in [0, {K})")
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / np.maximum(counts, 1), np.nan)
    acc = float(np.trace(conf) / max(truth.size, 1))
    return EvalReport(acc, per_class, conf, seed, fingerprint)


def write_report(rep: EvalReport, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["accuracy", repr(rep.accuracy)])
        for k, a in enumerate(rep.per_class):
            w.writerow([f"class_{k}_accuracy", repr(float(a))])
        w.writerow(["seed", "" if rep.seed is None else rep.seed])
        w.writerow(["config_fingerprint", rep.fingerprint or ""])


def write_confusion(rep: EvalReport, path) -> None:
    np.savetxt(path, rep.confusion, fmt="%d", delimiter=",")


def project2d(features) -> np.ndarray:
    """Scores on the top-2 principal components.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], X.shape[1]))])
    for i in range(2):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return Xc @ comps.T


def write_projection(points, labels, domains, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label", "domain"])
        for (x, y), lab, dom in zip(points, labels, domains):
            w.writerow([repr(float(x)), repr(float(y)), int(lab), dom])


# --- ablation harness -----------------------------------------------------

@dataclass
class TaskSpec:
    n: int = 1000
    K: int = 4
    d: int = 10
    shift: ShiftSpec = field(default_factory=lambda: ShiftSpec(
        rotation=math.pi / 4, translation=[0.6] * 10, noise_std=1.0, class_sep=4.0, seed=2020))

    def make(self) -> tuple[DomainDataset, DomainDataset]:
        return generate_pair(self.n, self.K, self.d, self.shift)


def standard_task() -> TaskSpec:
    return TaskSpec()


# name -> overrides applied on top of the base adaptation config
N2DC_VARIANTS = {
    "full": {},
    "no-im": {"use_im": False},
    "no-ss": {"beta": 0.0},
    "no-nnh-in-im": {"omega_in": 0.0},
    "no-nnh-in-ss": {"eta_in": 0.0},
    "no-fused-pl": {"fix_lambda": True},
}
EX_VARIANTS = {
    **N2DC_VARIANTS,
    "no-chain": {"chain": False},
    "Ce": {"confident_rule": "entropy"},
    "Cd": {"confident_rule": "distance"},
}


def variant_grid(mode: str = "nnh") -> dict[str, dict]:
    return EX_VARIANTS if mode == "shnnh" else N2DC_VARIANTS


@dataclass
class AblationRow:
    variant: str
    mode: str
    mean_accuracy: float
    accuracies: list[float]
    fingerprint: str
    status: str = "ok"


def source_models(task: TaskSpec, seeds, pre: PretrainConfig):
    """One source model per seed, shared by every variant so comparisons are paired."""
    S, T = task.make()
    models = [train_source(S, replace(pre, seed=s)) for s in seeds]
    return S, T, models


def run_variant(models, T: DomainDataset, base: AdaptConfig, overrides: dict, seeds) -> list[float]:
    accs = []
    for model, seed in zip(models, seeds):
        cfg = replace(base, seed=seed, **overrides)
        res = adapt_loop(model, T.features, cfg)
        accs.append(float((predict(res.model, T.features) == T.labels).mean()))
    return accs


def run_ablation_suite(task: TaskSpec, base: AdaptConfig, seeds=range(10),
                       pre: PretrainConfig | None = None, variants: dict | None = None,
                       source=None) -> list[AblationRow]:
    """Mean target accuracy per ablation variant; a failed variant is marked, not fatal."""
    seeds = list(seeds)
    pre = pre or PretrainConfig()
    variants = variants if variants is not None else variant_grid(base.mode)
    if source is None:
        _, T, models = source_models(task, seeds, pre)
    else:
        T, models = source
    rows = [AblationRow("source-only", base.mode,
                        float(np.mean([(predict(m, T.features) == T.labels).mean() for m in models])),
                        [float((predict(m, T.features) == T.labels).mean()) for m in models],
                        config_fingerprint({"pretrain": pre.__dict__, "task": _task_dict(task), "seeds": seeds}))]
    for name, overrides in variants.items():
        cfg_doc = {"adapt": replace(base, **overrides).as_dict(), "pretrain": pre.__dict__,
                   "task": _task_dict(task), "seeds": seeds}
        fp = config_fingerprint(cfg_doc)
        try:
            accs = run_variant(models, T, base, overrides, seeds)
            rows.append(AblationRow(name, base.mode, float(np.mean(accs)), accs, fp))
        except Exception as exc:  # keep the suite going
            log.error("variant %s failed: %s", name, exc)
            rows.append(AblationRow(name, base.mode, float("nan"), [], fp, status=f"failed: {exc}"))
    return rows


def _task_dict(task: TaskSpec) -> dict:
    return {"n": task.n, "K": task.K, "d": task.d, "shift": task.shift.__dict__}


def write_ablation(rows: list[AblationRow], path) -> None:
    full = next((r.mean_accuracy for r in rows if r.variant == "full"), float("nan"))
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mode", "mean_accuracy", "delta_vs_full", "n_seeds", "fingerprint", "status"])
        for r in rows:
            w.writerow([r.variant, r.mode, repr(r.mean_accuracy), repr(r.mean_accuracy - full),
                        len(r.accuracies), r.fingerprint, r.status])
