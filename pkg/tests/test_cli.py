import filecmp
import os
import re
import subprocess
import sys

import pytest

from jumplab import cli

SIM = ["--seed", "7", "--stocks", "20", "--sessions", "20", "--shock-rate", "0.3",
       "--shock-size", "100", "--nu", "0.5", "--vol-exponent", "0.7", "--sim-burn-in", "10000"]
FAST = ["--boot", "50", "--splits", "20", "--ari-boot", "20", "--knn-k", "1..5"]


def tables(d):
    return sorted(f for f in os.listdir(d) if f.endswith(".csv") or f == "report.txt")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    sim = str(base / "sim")
    assert cli.main(["simulate", "--out", sim] + SIM) == 0
    panel, news = os.path.join(sim, "panel.csv"), os.path.join(sim, "news.csv")
    out = {"sim": sim, "panel": panel, "news": news}
    for name in ("a", "b"):
        out[name] = str(base / name)
        code = cli.main(["run", "--out", out[name], "--seed", "7", "--panel", panel, "--news", news] + FAST)
        assert code == 0
    out["nonews"] = str(base / "nonews")
    assert cli.main(["run", "--out", out["nonews"], "--seed", "7", "--panel", panel] + FAST) == 0
    return out


# --- configuration -----------------------------------------------------------------

def test_config_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\neps = 0.01\nalpha = 0.02\nkappa = 0.3\n")
    env = {"JUMPLAB_ALPHA": "0.03", "JUMPLAB_KAPPA": "0.4", "OTHER": "x"}
    cfg = cli.resolve_config(str(f), {"kappa": "0.5", "seed": None}, env)
    assert cfg["eps"] == 0.01  # file over default
    assert cfg["alpha"] == 0.03  # environment over file
    assert cfg["kappa"] == 0.5  # flag over environment
    assert cfg["seed"] == 0 and cfg["k"] == 390  # defaults


@pytest.mark.parametrize("text", ["eps 0.1\n", "nokey = 1\n", "alpha = abc\n", "abs_a = maybe\n"])
def test_bad_config_file(tmp_path, text):
    f = tmp_path / "bad.cfg"
    f.write_text(text)
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(str(f), environ={})


@pytest.mark.parametrize("key,value", [("method", "spline"), ("news_window", "4:-1"), ("link", "tobit"),
                                       ("window", "7"), ("knn_k", "0..3"), ("test_frac", "1.0")])
def test_validation(key, value):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(flags={key: value}, environ={})


def test_parse_helpers():
    assert cli.parse_range("1..4") == [1, 2, 3, 4]
    assert cli.parse_range("5,10") == [5, 10]
    assert cli.parse_window("-1:4") == (-1, 4)


# --- exit codes -------------------------------------------------------------------------

def test_exit_config_error(tmp_path):
    assert cli.main(["detect", "--out", str(tmp_path), "--alpha", "x"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_exit_data_error(tmp_path):
    code = cli.main(["ingest", "--out", str(tmp_path), "--panel", str(tmp_path / "none.csv")])
    assert code == cli.EXIT_DATA
    assert os.path.exists(tmp_path / cli.FAILED_MARKER)


def test_exit_stage_failure_keeps_outputs(tmp_path, runs, monkeypatch):
    def boom(cfg):
        raise RuntimeError("injected")
    monkeypatch.setitem(cli.STAGE_FUNCS, "detect", boom)
    code = cli.main(["run", "--out", str(tmp_path), "--panel", runs["panel"], "--news", runs["news"]])
    assert code == cli.EXIT_STAGE
    marker = (tmp_path / cli.FAILED_MARKER).read_text()
    assert "stage = detect" in marker and "injected" in marker
    assert os.path.exists(tmp_path / "mids.csv") and not os.path.exists(tmp_path / "jumps.csv")


def test_marker_cleared_on_success(tmp_path, runs):
    out = str(tmp_path)
    open(os.path.join(out, cli.FAILED_MARKER), "w").close()
    for f in ("mids.csv", "calendar.csv", "jumps.csv", "clusters.csv"):
        os.link(os.path.join(runs["a"], f), os.path.join(out, f))
    assert cli.main(["report", "--out", out]) == 0
    assert not os.path.exists(os.path.join(out, cli.FAILED_MARKER))


# --- runs -------------------------------------------------------------------------------

def test_simulate_writes_inputs(runs):
    for f in ("panel.csv", "news.csv", "shocks.csv", "manifest.txt"):
        assert os.path.exists(os.path.join(runs["sim"], f))


def test_rerun_byte_identical(runs):
    names = tables(runs["a"])
    assert names == tables(runs["b"])
    assert {"jumps.csv", "clusters.csv", "fits.csv", "regression.csv", "ari.csv"} <= set(names)
    match, mismatch, errors = filecmp.cmpfiles(runs["a"], runs["b"], names, shallow=False)
    assert mismatch == [] and errors == []


def test_manifest_echoes_parameters(runs):
    text = open(os.path.join(runs["a"], "manifest.txt")).read()
    for key in cli.DEFAULTS:
        assert re.search(rf"^{key} = ", text, re.M), key
    assert "seed = 7" in text and "numpy = " in text


def test_report_sections(runs):
    text = open(os.path.join(runs["a"], "report.txt")).read()
    for sec in ("[census]", "[exponents]", "[regression]", "[ari]"):
        assert sec in text
    assert re.search(r"^\s+EXO\s+-?\d", text, re.M)
    auc = re.findall(r"^\s+AUC (\S+)$", text, re.M)
    assert auc and all(re.fullmatch(r"\d\.\d\d", a) for a in auc)


def test_run_without_news(runs):
    text = open(os.path.join(runs["nonews"], "report.txt")).read()
    assert "every kept cluster is ENDO" in text
    assert "regression skipped" in text
    assert re.search(r"^\s+EXO: 0$", text, re.M)


def test_report_marks_absent_sections(tmp_path):
    text, _ = cli.build_report(str(tmp_path))
    assert "ingest output absent" in text
    assert "fit output absent" in text and "classify output absent" in text


def test_stage_rerun_in_isolation(tmp_path, runs):
    out = str(tmp_path)
    for f in os.listdir(runs["a"]):
        if f not in ("fits.csv", "class_fits.csv"):
            os.link(os.path.join(runs["a"], f), os.path.join(out, f))
    assert cli.main(["fit", "--out", out, "--seed", "7"]) == 0
    assert filecmp.cmp(os.path.join(out, "fits.csv"), os.path.join(runs["a"], "fits.csv"), shallow=False)


def test_module_entry_point(runs, tmp_path):
    r = subprocess.run([sys.executable, "-m", "jumplab.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "jumplab" in r.stdout
