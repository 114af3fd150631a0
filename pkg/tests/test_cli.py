import json
import subprocess
import sys

import pytest

from nnh_adapt.cli import EXIT_CONFIG, EXIT_DIMENSION, EXIT_IO, EXIT_NUMERIC, main
from nnh_adapt.synthdata import load_csv

SMALL = {
    "data": {"n": 160, "K": 3, "d": 4, "translation": [0.3] * 4},
    "pretrain": {"epochs": 4, "d_h": 12, "d_b": 6},
    "adapt": {"epochs": 2},
}


def write_config(tmp_path, doc=SMALL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


@pytest.fixture
def pipeline(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    for cmd in ("gen-data", "pretrain", "adapt", "eval"):
        assert run(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


def test_pipeline_artifacts(pipeline):
    _, out = pipeline
    for name in ("source.csv", "target.csv", "source_model.json", "pretrain_log.csv", "adapted_model.json",
                 "history.csv", "report.csv", "confusion.csv", "projection.csv"):
        assert (out / name).is_file(), name
    for cmd in ("gen-data", "pretrain", "adapt", "eval"):
        snap = json.loads((out / f"{cmd}.config.json").read_text())
        assert snap["command"] == cmd and snap["data"]["K"] == 3
    assert len((out / "history.csv").read_text().splitlines()) == 3
    assert len((out / "confusion.csv").read_text().splitlines()) == 3
    proj = (out / "projection.csv").read_text().splitlines()
    assert proj[0] == "x,y,label,domain" and len(proj) == 1 + 2 * 160


def test_snapshot_rerun_is_bit_identical(pipeline, tmp_path):
    _, out = pipeline
    first = (out / "history.csv").read_bytes()
    assert run("adapt", "--config", out / "adapt.config.json") == 0
    assert (out / "history.csv").read_bytes() == first


@pytest.mark.parametrize("cmd,artifact", [("pretrain", "pretrain_log.csv"), ("adapt", "history.csv")])
def test_determinism_across_runs(pipeline, tmp_path, cmd, artifact):
    cfg, out = pipeline
    extra = ["--source", out / "source.csv", "--target", out / "target.csv"]
    if cmd == "adapt":
        extra += ["--source-checkpoint", out / "source_model.json"]
    for name in ("a", "b"):
        assert run(cmd, "--config", cfg, "--out", tmp_path / name, *extra) == 0
    assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_gen_data_deterministic_and_seeded(tmp_path):
    cfg = write_config(tmp_path)
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        assert run("gen-data", "--config", cfg, "--out", tmp_path / name, "--seed", seed) == 0
    assert (tmp_path / "a/target.csv").read_bytes() == (tmp_path / "b/target.csv").read_bytes()
    assert (tmp_path / "a/target.csv").read_bytes() != (tmp_path / "c/target.csv").read_bytes()
    assert load_csv(tmp_path / "a/source.csv").class_counts().tolist() == [54, 53, 53]


def test_flags_override_file(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "seed": 5, "mode": "nnh"})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o", "--seed", 9, "--mode", "shnnh") == 0
    snap = json.loads((tmp_path / "o/gen-data.config.json").read_text())
    assert snap["seed"] == 9 and snap["mode"] == "shnnh" and snap["adapt"]["epochs"] == 2


def test_eval_predictions_fixture(tmp_path, capsys):
    fixture = tmp_path / "pred.csv"
    fixture.write_text("pred,truth\n0,0\n1,1\n2,2\n1,1\n")
    assert run("eval", "--predictions", fixture, "--out", tmp_path / "ev") == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 1.0
    assert "accuracy,1.0" in (tmp_path / "ev/report.csv").read_text().splitlines()


def test_adapt_missing_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == 0
    missing = tmp_path / "nowhere" / "model.json"
    code = run("adapt", "--config", cfg, "--out", tmp_path, "--source-checkpoint", missing)
    assert code == EXIT_IO
    err = last_error(capsys)
    assert err["path"] == str(missing) and str(missing) in err["message"]


@pytest.mark.parametrize("doc,needle", [
    ({"adapt": {"lr": "fast"}}, "adapt.lr"),
    ({"adapt": {"beta": -1}}, "beta"),
    ({"colour": 1}, "colour"),
    ({"data": {"translation": [0.1]}}, "translation"),
    ({"paths": {"weights": "x"}}, "weights"),
])
def test_config_errors(tmp_path, capsys, doc, needle):
    assert run("adapt", "--config", write_config(tmp_path, doc)) == EXIT_CONFIG
    err = last_error(capsys)
    assert err["error"] == "config" and needle in err["message"]


def test_invalid_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("pretrain", "--config", bad) == EXIT_CONFIG


def test_missing_config_file(tmp_path, capsys):
    assert run("pretrain", "--config", tmp_path / "none.json") == EXIT_IO
    assert last_error(capsys)["path"].endswith("none.json")


def test_dimension_mismatch(pipeline, tmp_path, capsys):
    cfg, out = pipeline
    rows = (out / "target.csv").read_text().splitlines()
    narrow = tmp_path / "narrow.csv"
    narrow.write_text("\n".join(["f0,f1,f2,label"] + [",".join(r.split(",")[:3] + r.split(",")[-1:]) for r in rows[1:]]) + "\n")
    code = run("adapt", "--config", cfg, "--out", out, "--target", narrow)
    assert code == EXIT_DIMENSION
    assert last_error(capsys)["error"] == "dimension"


def test_malformed_dataset_line(pipeline, tmp_path, capsys):
    cfg, out = pipeline
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,f1,f2,f3,label\n1,2,3,4,0\n1,2,x,4,1\n")
    assert run("adapt", "--config", cfg, "--out", out, "--target", bad) == EXIT_IO
    assert ":3:" in last_error(capsys)["message"]


def test_numeric_failure_exit(pipeline, tmp_path, capsys):
    _, out = pipeline
    cfg = write_config(tmp_path, {**SMALL, "adapt": {"epochs": 2, "lr": 1e200}}, "diverge.json")
    with pytest.warns(RuntimeWarning):
        code = run("adapt", "--config", cfg, "--out", out)
    assert code == EXIT_NUMERIC
    assert (out / "last_finite_model.json").is_file()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nnh_adapt", "eval", "--predictions", tmp_path / "x.csv",
                           "--out", tmp_path], capture_output=True, text=True)
    assert proc.returncode == EXIT_IO
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "io"


def test_ablate_small(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "adapt": {"epochs": 1}})
    assert run("ablate", "--config", cfg, "--out", tmp_path, "--seeds", 2, "--mode", "shnnh") == 0
    lines = (tmp_path / "ablation_shnnh.csv").read_text().splitlines()
    assert len(lines) == 1 + 1 + 9
    assert all(line.endswith(",ok") for line in lines[1:])
