"""Extractor / bottleneck / classifier network with hand-written backprop.

Layout (all float64, rows are samples)::

    h = relu(relu(x @ W1 + b1) @ W2 + b2)          extractor
    b = batchnorm(h @ Wb + bb)                      bottleneck
    v = b @ W_eff.T + cbias,  W_eff[k] = gvec[k] * V[k] / |V[k]|   classifier
    p = softmax(v)
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, NumericError
from .numeric import softmax

EXTRACTOR = ("W1", "b1", "W2", "b2")
BOTTLENECK = ("Wb", "bb", "bn_gamma", "bn_beta")
CLASSIFIER = ("V", "gvec", "cbias")
PARAMS = EXTRACTOR + BOTTLENECK + CLASSIFIER
BUFFERS = ("bn_mean", "bn_var")

CHECKPOINT_FORMAT = "nnh_adapt.checkpoint"


@dataclass
class TargetModel:
    d: int
    d_h: int
    d_b: int
    K: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    classifier_frozen: bool = False
    mode: str = "train"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def shapes(self) -> dict[str, tuple]:
        d, dh, db, K = self.d, self.d_h, self.d_b, self.K
        return {
            "W1": (d, dh), "b1": (dh,), "W2": (dh, dh), "b2": (dh,),
            "Wb": (dh, db), "bb": (db,), "bn_gamma": (db,), "bn_beta": (db,),
            "V": (K, db), "gvec": (K,), "cbias": (K,),
            "bn_mean": (db,), "bn_var": (db,),
        }

    def copy(self) -> "TargetModel":
        return copy.deepcopy(self)

    def train(self) -> "TargetModel":
        self.mode = "train"
        return self

    def eval(self) -> "TargetModel":
        self.mode = "eval"
        return self

    def effective_classifier_weight(self) -> np.ndarray:
        V = self.params["V"]
        return self.params["gvec"][:, None] * V / np.linalg.norm(V, axis=1, keepdims=True)


def init_model(d: int, d_h: int, d_b: int, K: int, rng: np.random.Generator) -> TargetModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for affine weights and biases."""

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    V = uni(d_b, (K, d_b))
    params = {
        "W1": uni(d, (d, d_h)), "b1": uni(d, (d_h,)),
        "W2": uni(d_h, (d_h, d_h)), "b2": uni(d_h, (d_h,)),
        "Wb": uni(d_h, (d_h, d_b)), "bb": uni(d_h, (d_b,)),
        "bn_gamma": np.ones(d_b), "bn_beta": np.zeros(d_b),
        "V": V, "gvec": np.linalg.norm(V, axis=1), "cbias": uni(d_b, (K,)),
    }
    buffers = {"bn_mean": np.zeros(d_b), "bn_var": np.ones(d_b)}
    return TargetModel(d, d_h, d_b, K, params, buffers)


@dataclass
class ForwardTrace:
    mode: str
    h: np.ndarray
    b: np.ndarray | None = None
    v: np.ndarray | None = None
    p: np.ndarray | None = None
    cache: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.h.shape[0]


def extractor_forward(m: TargetModel, x: np.ndarray) -> tuple[np.ndarray, dict]:
    P = m.params
    a1 = x @ P["W1"] + P["b1"]
    r1 = np.maximum(a1, 0.0)
    a2 = r1 @ P["W2"] + P["b2"]
    h = np.maximum(a2, 0.0)
    return h, {"x": x, "a1": a1, "r1": r1, "a2": a2}


def head_forward(m: TargetModel, h: np.ndarray, update_stats: bool = True):
    """Bottleneck + classifier on deep features ``h``.

    In train mode the batch statistics normalize ``h`` and, when
    ``update_stats`` is set, the running statistics are updated in place.
    """
    P = m.params
    z = h @ P["Wb"] + P["bb"]
    if m.mode == "train":
        n = z.shape[0]
        if n < 2:
            raise ValueError("train-mode batch norm needs a batch of at least 2")
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        if update_stats:
            mom = m.bn_momentum
            m.buffers["bn_mean"] = (1 - mom) * m.buffers["bn_mean"] + mom * mu
            m.buffers["bn_var"] = (1 - mom) * m.buffers["bn_var"] + mom * var * n / (n - 1)
    else:
        mu = m.buffers["bn_mean"]
        var = m.buffers["bn_var"]
    inv_std = 1.0 / np.sqrt(var + m.bn_eps)
    xhat = (z - mu) * inv_std
    b = xhat * P["bn_gamma"] + P["bn_beta"]

    V = P["V"]
    vnorm = np.linalg.norm(V, axis=1)
    Vhat = V / vnorm[:, None]
    W_eff = P["gvec"][:, None] * Vhat
    v = b @ W_eff.T + P["cbias"]
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite logits")
    p = softmax(v)
    cache = {"h": h, "xhat": xhat, "inv_std": inv_std, "b": b, "vnorm": vnorm, "Vhat": Vhat, "W_eff": W_eff}
    return b, v, p, cache


def forward(m: TargetModel, x, stage: str = "full", update_stats: bool = True) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.d:
        raise ValueError(f"input must be (n, {m.d}), got {x.shape}")
    if m.mode == "train" and x.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 (batch norm)")
    h, ext = extractor_forward(m, x)
    trace = ForwardTrace(m.mode, h, cache={"extractor": ext})
    if stage == "up_to_h":
        return trace
    if stage != "full":
        raise ValueError(f"unknown stage {stage!r}")
    trace.b, trace.v, trace.p, trace.cache["head"] = head_forward(m, h, update_stats)
    return trace


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def head_backward(m: TargetModel, cache: dict, p: np.ndarray, dv=None, dp=None):
    """Gradients of bottleneck/classifier params and of the input features."""
    if dv is None:
        dv = softmax_backward(p, dp)
    P = m.params
    b, xhat, inv_std = cache["b"], cache["xhat"], cache["inv_std"]
    grads = {}

    # classifier with weight normalization
    dW = dv.T @ b
    grads["cbias"] = dv.sum(axis=0)
    Vhat, vnorm = cache["Vhat"], cache["vnorm"]
    proj = (dW * Vhat).sum(axis=1)
    grads["gvec"] = proj
    grads["V"] = (P["gvec"] / vnorm)[:, None] * (dW - proj[:, None] * Vhat)
    db = dv @ cache["W_eff"]

    # batch norm, batch-statistics path
    grads["bn_gamma"] = (db * xhat).sum(axis=0)
    grads["bn_beta"] = db.sum(axis=0)
    dxhat = db * P["bn_gamma"]
    n = dxhat.shape[0]
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    grads["Wb"] = cache["h"].T @ dz
    grads["bb"] = dz.sum(axis=0)
    dh = dz @ P["Wb"].T
    if m.classifier_frozen:
        for name in CLASSIFIER:
            grads[name] = np.zeros_like(P[name])
    return grads, dh


def extractor_backward(m: TargetModel, cache: dict, dh: np.ndarray) -> dict:
    P = m.params
    da2 = dh * (cache["a2"] > 0)
    grads = {"W2": cache["r1"].T @ da2, "b2": da2.sum(axis=0)}
    dr1 = da2 @ P["W2"].T
    da1 = dr1 * (cache["a1"] > 0)
    grads["W1"] = cache["x"].T @ da1
    grads["b1"] = da1.sum(axis=0)
    return grads


def backward(m: TargetModel, trace: ForwardTrace, dv=None, dp=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter given dL/dv or dL/dp."""
    if trace.mode != "train" or m.mode != "train":
        raise ValueError("backward requires a train-mode model and trace")
    if "head" not in trace.cache:
        raise ValueError("backward requires a full-stage trace")
    if (dv is None) == (dp is None):
        raise ValueError("pass exactly one of dv or dp")
    grads, dh = head_backward(m, trace.cache["head"], trace.p, dv=dv, dp=dp)
    grads.update(extractor_backward(m, trace.cache["extractor"], dh))
    return grads


def zero_grads(m: TargetModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(m.params[k]) for k in PARAMS}


class SGD:
    """Plain SGD with optional heavy-ball momentum; skips a frozen classifier."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, m: TargetModel, grads: dict[str, np.ndarray]) -> TargetModel:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        for name in PARAMS:
            if m.classifier_frozen and name in CLASSIFIER:
                continue
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * m.params[name]
            if self.momentum:
                buf = self.velocity.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.velocity[name] = buf
                g = buf
            m.params[name] = m.params[name] - self.lr * g
        return m


def sgd_step(m: TargetModel, grads: dict[str, np.ndarray], lr: float) -> TargetModel:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return SGD(lr).step(m, grads)


def predict_proba(m: TargetModel, x) -> np.ndarray:
    mode = m.mode
    m.eval()
    try:
        return forward(m, x).p
    finally:
        m.mode = mode


def predict(m: TargetModel, x) -> np.ndarray:
    """Hard labels from eval-mode forward; argmax ties go to the lowest class."""
    return np.argmax(predict_proba(m, x), axis=1)


def save_checkpoint(m: TargetModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dims": {"d": m.d, "d_h": m.d_h, "d_b": m.d_b, "K": m.K},
        "classifier_frozen": m.classifier_frozen,
        "batch_norm": {"momentum": m.bn_momentum, "eps": m.bn_eps},
        "params": {k: m.params[k].ravel().tolist() for k in PARAMS},
        "buffers": {k: m.buffers[k].ravel().tolist() for k in BUFFERS},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> TargetModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"unreadable checkpoint ({exc.msg})", path=path) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError("not a checkpoint file", path=path)
    try:
        dims = doc["dims"]
        m = TargetModel(
            int(dims["d"]), int(dims["d_h"]), int(dims["d_b"]), int(dims["K"]),
            params={}, buffers={},
            classifier_frozen=bool(doc["classifier_frozen"]),
            bn_momentum=float(doc["batch_norm"]["momentum"]),
            bn_eps=float(doc["batch_norm"]["eps"]),
        )
        shapes = m.shapes()
        for group, names in (("params", PARAMS), ("buffers", BUFFERS)):
            target = getattr(m, group)
            for name in names:
                flat = np.asarray(doc[group][name], dtype=np.float64)
                if flat.size != int(np.prod(shapes[name])):
                    raise DataFormatError(
                        f"{name} has {flat.size} values, header implies shape {shapes[name]}", path=path
                    )
                target[name] = flat.reshape(shapes[name])
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"missing or malformed checkpoint field {exc}", path=path) from None
    return m
