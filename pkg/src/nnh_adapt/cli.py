"""Command-line entry point.

Subcommands ``gen-data``, ``pretrain``, ``adapt``, ``eval`` and ``ablate``
share one JSON config layout::

    {"seed": 2020, "out": "runs/demo", "mode": "nnh",
     "data": {"n": 1000, "K": 4, "d": 10, "rotation": 0.785, ...},
     "pretrain": {...PretrainConfig fields...},
     "adapt": {...AdaptConfig fields...},
     "paths": {"source": ..., "target": ..., "source_checkpoint": ..., ...},
     "ablation": {"seeds": 10}}

Flags override the file.  Every run writes ``<out>/<command>.config.json``;
feeding that file back through ``--config`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import AdaptConfig, adapt_loop, write_history
from .errors import ConfigError, DataFormatError, DimensionMismatch, NumericError
from .evalreport import (
    TaskSpec,
    config_fingerprint,
    evaluate,
    project2d,
    run_ablation_suite,
    write_ablation,
    write_confusion,
    write_projection,
    write_report,
)
from .model import forward, load_checkpoint, predict, save_checkpoint
from .pretrain import PretrainConfig, train_source, write_log
from .synthdata import ShiftSpec, load_csv, save_csv

log = logging.getLogger("nnh_adapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_DIMENSION = 0, 2, 3, 4, 5

# seed and mode live at the top level; the phase sections never carry them
_PHASE_EXCLUDE = {"seed", "mode"}
# written into snapshots for the record, ignored when a snapshot is read back
SNAPSHOT_META = ("command", "fingerprint", "version")
PATH_KEYS = ("source", "target", "source_checkpoint", "checkpoint", "predictions")
DEFAULT_PATHS = {
    "source": "source.csv",
    "target": "target.csv",
    "source_checkpoint": "source_model.json",
    "checkpoint": "adapted_model.json",
}


class PathError(OSError):
    def __init__(self, message, path):
        super().__init__(message)
        self.path = str(path)


def default_config() -> dict:
    task = TaskSpec()
    data = {"n": task.n, "K": task.K, "d": task.d}
    data.update({k: v for k, v in asdict(task.shift).items() if k != "seed"})
    return {
        "seed": 2020,
        "out": "runs",
        "mode": "nnh",
        "data": data,
        "pretrain": {k: v for k, v in asdict(PretrainConfig()).items() if k not in _PHASE_EXCLUDE},
        "adapt": {k: v for k, v in asdict(AdaptConfig()).items() if k not in _PHASE_EXCLUDE},
        "paths": {},
        "ablation": {"seeds": 10},
    }


# optional numeric fields whose default is None
_OPTIONAL_NUMBERS = {"delta", "iters"}


def _check_type(section: str, key: str, value, default):
    if value is None and (default is None or key in _OPTIONAL_NUMBERS or key == "translation"):
        return value
    if default is None:
        if key in _OPTIONAL_NUMBERS and isinstance(value, (int, float)) and not isinstance(value, bool):
            return int(value) if key == "iters" and float(value).is_integer() else value
        if key == "translation" and isinstance(value, list):
            return value
        raise ConfigError(f"{section}.{key}: unexpected value {value!r}")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
    return value


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects unknown keys and wrong value types."""
    out = dict(base)
    for key, value in override.items():
        name = f"{where}.{key}" if where else key
        if key not in base and where != "paths":
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be an object")
            out[key] = merge_config(base[key], value, name)
        elif where == "paths":
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown path key {name!r}")
            out[key] = None if value is None else str(value)
        else:
            out[key] = _check_type(where or "config", key, value, base[key])
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise PathError(f"config file not found: {path}", path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key in SNAPSHOT_META:
            doc.pop(key, None)
        cfg = merge_config(cfg, doc)
    flags = {}
    for key in ("seed", "out", "mode"):
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    for key in PATH_KEYS:
        if getattr(args, key, None) is not None:
            flags.setdefault("paths", {})[key] = getattr(args, key)
    if getattr(args, "seeds", None) is not None:
        flags["ablation"] = {"seeds": args.seeds}
    cfg = merge_config(cfg, flags)
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    if cfg["mode"] not in ("nnh", "shnnh"):
        raise ConfigError("mode must be 'nnh' or 'shnnh'")
    if cfg["ablation"]["seeds"] < 1:
        raise ConfigError("ablation.seeds must be positive")
    # fail on bad phase settings before any output is written
    pretrain_config(cfg)
    adapt_config(cfg)
    task_spec(cfg)
    return cfg


def _out_path(cfg: dict, key: str) -> Path:
    given = cfg["paths"].get(key)
    return Path(given) if given else Path(cfg["out"]) / DEFAULT_PATHS[key]


def _require(path: Path) -> Path:
    if not path.is_file():
        raise PathError(f"required input not found: {path}", path)
    return path


def pretrain_config(cfg: dict) -> PretrainConfig:
    return PretrainConfig(seed=cfg["seed"], **cfg["pretrain"]).validate()


def adapt_config(cfg: dict) -> AdaptConfig:
    return AdaptConfig(seed=cfg["seed"], mode=cfg["mode"], **cfg["adapt"]).validate()


def task_spec(cfg: dict) -> TaskSpec:
    data = dict(cfg["data"])
    n, K, d = data.pop("n"), data.pop("K"), data.pop("d")
    if K < 2 or d < 2 or n < K:
        raise ConfigError("data needs K >= 2, d >= 2 and n >= K")
    tr = data.get("translation")
    if tr is not None:
        if len(tr) != d or not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in tr):
            raise ConfigError(f"data.translation must be a list of {d} numbers")
    return TaskSpec(n, K, d, ShiftSpec(seed=cfg["seed"], **data))


def run_fingerprint(cfg: dict) -> str:
    """Hash of the settings that determine results; output locations are left out."""
    return config_fingerprint({k: v for k, v in cfg.items() if k not in ("out", "paths")})


def snapshot(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.config.json"
    doc = {**cfg, "command": command, "fingerprint": run_fingerprint(cfg), "version": __version__}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def cmd_gen_data(cfg: dict) -> dict:
    S, T = task_spec(cfg).make()
    src, tgt = _out_path(cfg, "source"), _out_path(cfg, "target")
    for path in (src, tgt):
        path.parent.mkdir(parents=True, exist_ok=True)
    save_csv(S, src)
    save_csv(T, tgt)
    return {"source": str(src), "target": str(tgt)}


def cmd_pretrain(cfg: dict) -> dict:
    pre = pretrain_config(cfg)
    S = load_csv(_require(_out_path(cfg, "source")), domain_tag="source")
    history = []
    model = train_source(S, pre, history)
    ckpt = _out_path(cfg, "source_checkpoint")
    save_checkpoint(model, ckpt)
    log_path = Path(cfg["out"]) / "pretrain_log.csv"
    write_log(history, log_path)
    return {"checkpoint": str(ckpt), "log": str(log_path), "source_accuracy": history[-1].accuracy if history else None}


def _check_dims(model, ds, path):
    if ds.d != model.d:
        raise DimensionMismatch(f"{path}: dataset has {ds.d} features, model expects {model.d}")
    if ds.K > model.K:
        raise DimensionMismatch(f"{path}: dataset has labels up to {ds.K - 1}, model has {model.K} classes")


def cmd_adapt(cfg: dict) -> dict:
    acfg = adapt_config(cfg)
    src_path = _require(_out_path(cfg, "source_checkpoint"))
    tgt_path = _require(_out_path(cfg, "target"))
    source = load_checkpoint(src_path)
    T = load_csv(tgt_path, domain_tag="target")
    _check_dims(source, T, tgt_path)
    out = Path(cfg["out"])
    ckpt = _out_path(cfg, "checkpoint")
    res = adapt_loop(source, T.features, acfg, yt=T.labels, checkpoint_path=out / "last_finite_model.json")
    save_checkpoint(res.model, ckpt)
    hist = out / "history.csv"
    write_history(res.history, hist)
    final = res.history[-1].target_acc if res.history else None
    return {"checkpoint": str(ckpt), "history": str(hist), "target_accuracy": final}


def _read_predictions(path: Path):
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or "pred" not in rows[0]:
        raise DataFormatError("expected a header with a 'pred' column", line=1, path=path)
    header = rows[0]
    cols = {name: [] for name in header}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} columns, got {len(row)}", line=i, path=path)
        for name, value in zip(header, row):
            try:
                cols[name].append(int(value))
            except ValueError:
                raise DataFormatError(f"non-integer label {value!r}", line=i, path=path) from None
    if len(rows) < 2:
        raise DataFormatError("no rows", path=path)
    return np.array(cols["pred"]), (np.array(cols["truth"]) if "truth" in cols else None)


def cmd_eval(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fp = run_fingerprint(cfg)
    pred_path = cfg["paths"].get("predictions")
    if pred_path:
        pred, truth = _read_predictions(_require(Path(pred_path)))
        if truth is None:
            T = load_csv(_require(_out_path(cfg, "target")), domain_tag="target")
            truth = T.labels
        if pred.shape != truth.shape:
            raise DimensionMismatch(f"{pred_path}: {pred.size} predictions for {truth.size} labels")
        K = int(max(pred.max(), truth.max())) + 1
        feats = None
    else:
        ckpt = _require(_out_path(cfg, "checkpoint"))
        tgt_path = _require(_out_path(cfg, "target"))
        model = load_checkpoint(ckpt)
        T = load_csv(tgt_path, domain_tag="target")
        _check_dims(model, T, tgt_path)
        pred, truth, K = predict(model, T.features), T.labels, model.K
        feats = [(forward(model.eval(), T.features).b, T.labels, "target")]
        src_path = _out_path(cfg, "source")
        if src_path.is_file():
            S = load_csv(src_path, domain_tag="source")
            _check_dims(model, S, src_path)
            feats.insert(0, (forward(model, S.features).b, S.labels, "source"))
    rep = evaluate(pred, truth, K, seed=cfg["seed"], fingerprint=fp)
    write_report(rep, out / "report.csv")
    write_confusion(rep, out / "confusion.csv")
    result = {"accuracy": rep.accuracy, "report": str(out / "report.csv")}
    if feats is not None:
        pts = project2d(np.vstack([f for f, _, _ in feats]))
        labels = np.concatenate([lab for _, lab, _ in feats])
        domains = [dom for f, _, dom in feats for _ in range(f.shape[0])]
        write_projection(pts, labels, domains, out / "projection.csv")
        result["projection"] = str(out / "projection.csv")
    return result


def cmd_ablate(cfg: dict) -> dict:
    base = adapt_config(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["ablation"]["seeds"])]
    rows = run_ablation_suite(task_spec(cfg), base, seeds, PretrainConfig(**cfg["pretrain"]).validate())
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{base.mode}.csv"
    write_ablation(rows, path)
    return {"table": str(path), "rows": {r.variant: r.mean_accuracy for r in rows}}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file; flags override it")
    shared.add_argument("--seed", type=int, help="master seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--mode", choices=("nnh", "shnnh"), help="neighborhood type")
    shared.add_argument("--source", help="source dataset CSV")
    shared.add_argument("--target", help="target dataset CSV")
    shared.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="nnh-adapt", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[shared], help="write a synthetic source/target pair")
    sp = sub.add_parser("pretrain", parents=[shared], help="train the source model")
    sp.add_argument("--source-checkpoint", dest="source_checkpoint", help="where to write the source model")
    sp = sub.add_parser("adapt", parents=[shared], help="adapt the source model to the target set")
    sp.add_argument("--source-checkpoint", dest="source_checkpoint", help="source model to start from")
    sp.add_argument("--checkpoint", help="where to write the adapted model")
    sp = sub.add_parser("eval", parents=[shared], help="accuracy, confusion and projection reports")
    sp.add_argument("--checkpoint", help="model to evaluate")
    sp.add_argument("--predictions", help="CSV with a 'pred' (and optional 'truth') column")
    sp = sub.add_parser("ablate", parents=[shared], help="run the ablation grid for --mode")
    sp.add_argument("--seeds", type=int, help="number of seeds (counting up from --seed)")
    return p


def _emit_error(kind: str, code: int, message: str, path=None) -> int:
    doc = {"error": kind, "exit_code": code, "message": message}
    if path is not None:
        doc["path"] = str(path)
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        snapshot(cfg, args.command)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _emit_error("config", EXIT_CONFIG, str(exc))
    except DimensionMismatch as exc:
        return _emit_error("dimension", EXIT_DIMENSION, str(exc))
    except DataFormatError as exc:
        return _emit_error("io", EXIT_IO, str(exc), exc.path)
    except PathError as exc:
        return _emit_error("io", EXIT_IO, str(exc), exc.path)
    except OSError as exc:
        return _emit_error("io", EXIT_IO, str(exc), getattr(exc, "filename", None))
    except NumericError as exc:
        return _emit_error("numeric", EXIT_NUMERIC, str(exc))
    print(json.dumps(_finite({"command": args.command, **result})))
    return EXIT_OK


def _finite(obj):
    """Replace NaN/inf by null so stdout stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


if __name__ == "__main__":
    sys.exit(main())
