import json
import subprocess
import sys

import pytest

from sigmap import cli

SMALL = """name = "cli"
feature_set = "XY"
[synth]
n_samples = 300
sampler = "uniform"
default_ple = 3.05
shadow_sigma_db = 2.0
[forest]
n_trees = 5
[quality]
kind = "coverage"
[shapley]
corruption_fraction = 0.1
n_seeds = 1
convergence_window = 20
[eval]
n_splits = 2
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(d, name="manifest.json"):
    return json.loads((d / name).read_text())


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        run("eval", "--help")
    text = capsys.readouterr().out
    for flag in ("--config", "--scenario", "--out", "--seed", "--threads", "--granularity", "--quality", "--target"):
        assert flag in text
    for name in ("base", "quality", "reweight", "qw", "shapley"):
        assert name in text
    with pytest.raises(SystemExit):
        run("--help")
    top = capsys.readouterr().out
    for cmd in ("synth", "ingest", "train", "predict", "eval", "weights", "shapley", "minimize", "report"):
        assert cmd in top


def test_synth_ingest_train_predict(tmp_path, scenario):
    s, i, t, p = (tmp_path / x for x in ("s", "i", "t", "p"))
    assert run("synth", "--config", scenario, "--out", s) == 0
    m = manifest(s)
    assert m["command"] == "synth" and "data.geojson" in m["artifacts"]
    assert m["config_sha256"] and str(scenario) in m["inputs"]
    assert run("ingest", "--config", scenario, "--input", s / "data.geojson", "--out", i) == 0
    assert (i / "data.geojson").read_bytes() == (s / "data.geojson").read_bytes()
    rep = json.loads((i / "ingest_report.json").read_text())
    assert rep["n_parsed"] == 300
    assert run("train", "--config", scenario, "--input", s / "data.geojson", "--out", t) == 0
    index = json.loads((t / "models.json").read_text())
    assert index["granularity"] == "cell" and len(index["models"]) == 1
    assert run("predict", "--config", scenario, "--model", t / "models.json", "--input", s / "data.geojson",
               "--out", p) == 0
    lines = (p / "predictions.csv").read_text().splitlines()
    assert len(lines) == 301


def test_rerun_checksums_identical(tmp_path, scenario):
    for cmd in (["eval", "base"], ["eval", "quality"], ["weights"], ["shapley"], ["minimize"]):
        a, b = tmp_path / ("a" + cmd[-1]), tmp_path / ("b" + cmd[-1])
        assert run(*cmd, "--config", scenario, "--out", a) == 0
        assert run(*cmd, "--config", scenario, "--out", b) == 0
        assert manifest(a)["artifacts"] == manifest(b)["artifacts"]


def test_reweight_threads_identical(tmp_path, scenario):
    a, b = tmp_path / "t1", tmp_path / "t8"
    assert run("eval", "reweight", "--config", scenario, "--threads", 1, "--out", a) == 0
    assert run("eval", "reweight", "--config", scenario, "--threads", 8, "--out", b) == 0
    assert manifest(a)["artifacts"] == manifest(b)["artifacts"]
    assert manifest(a)["config_sha256"] == manifest(b)["config_sha256"]


def test_flags_override_the_scenario(tmp_path, scenario):
    out = tmp_path / "o"
    assert run("eval", "quality", "--config", scenario, "--seed", 7, "--quality", "bars", "--out", out) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["quality"]["kind"] == "bars"


def test_report_merges_summaries(tmp_path, scenario):
    out = tmp_path / "r"
    assert run("eval", "base", "--config", scenario, "--out", out) == 0
    assert run("eval", "qw", "--config", scenario, "--out", out) == 0
    assert run("report", "--out", out) == 0
    text = (out / "report.csv").read_text().splitlines()
    assert text[0] == "source,pipeline,group,method,metric,n,median,q25,q75,iqr,mean"
    assert {l.split(",")[1] for l in text[1:]} == {"base", "qw"}
    assert (out / "report_manifest.json").exists() and manifest(out)["command"] == "eval"


def test_errors_are_structured(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth]\ndefault_ple = 9.0\n")
    out = tmp_path / "e"
    assert run("synth", "--config", bad, "--out", out) == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "ConfigError" and rec["exit_code"] == 2
    assert json.loads((out / "error.json").read_text())["problems"]
    assert run("ingest", "--input", tmp_path / "missing.geojson", "--out", out) == 1
    assert run("eval") == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "sigmap.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("sigmap ")
