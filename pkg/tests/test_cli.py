# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.


"""Tests for configuration handling and the nkit command line."""

import csv
import json
import logging
from pathlib import Path

import pytest

from nkit import __version__
from nkit.cli import (EXIT_CONFIG, EXIT_OK, EXIT_VERDICT, PRESETS,
                      THREADS_VARIABLE, dump_matrix, load_config, main,
                      resolve_config, run)
from nkit.elliptic_op import assemble
from nkit.errors import ConfigError, SeriesHypothesisError
from nkit.grid_core import Constant, generate_coefficient, make_domain

DATA = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _no_threads_variable(monkeypatch):
    monkeypatch.delenv(THREADS_VARIABLE, raising=False)


def _write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_presets(capsys):
    assert main(["presets"]) == EXIT_OK
    names = capsys.readouterr().out.split()
    assert names == list(PRESETS)
    assert len(names) == 12
    assert "pat-invert-demo" in names


def test_preset_defaults():
    config = resolve_config({"experiment": "decay-study", "threads": 2,
                             "operator": {"mean": "arithmetic"}})
    assert config.domain.n == 65
    assert config.operator.k == 100.0
    assert config.operator.mean == "arithmetic"
    assert config.coefficient.kind == "constant"
    assert config.threads == 2
    assert config.output == "nkit-output"


def test_integers_become_floats():
    config = resolve_config({"experiment": "decay-study", "threads": 1,
                             "operator": {"k": 3}})
    assert isinstance(config.operator.k, float)
    assert config.operator.k == 3.0


@pytest.mark.parametrize(["raw", "message"], [
    ({"domain": {"n": 17}}, "does not name an experiment"),
    ({"experiment": "spectral-study"}, "Unknown experiment 'spectral-study'"),
    ({"experiment": "decay-study", "colour": 1}, "Unknown key 'colour'"),
    ({"experiment": "decay-study", "domain": {"nodes": 17}},
     r"Unknown key 'nodes' in \[domain\]"),
    ({"experiment": "decay-study", "domain": {"n": "17"}},
     "domain.n should be int"),
    ({"experiment": "decay-study", "operator": {"k": True}},
     "got a boolean"),
    ({"experiment": "decay-study", "solver": 1e-8},
     r"\[solver\] should be a table"),
    ({"experiment": "decay-study", "threads": 0}, "at least 1"),
    ({"experiment": 3}, "experiment should be str"),
])
def test_invalid_config(raw, message):
    with pytest.raises(ConfigError) as error:
        resolve_config(raw)
    error.match(message)


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_VARIABLE, "3")
    assert resolve_config({"experiment": "decay-study"}).threads == 3


def test_environment_overrides_configured_threads(monkeypatch):
    monkeypatch.setenv(THREADS_VARIABLE, "3")
    configured = resolve_config({"experiment": "decay-study", "threads": 5})
    assert configured.threads == 3


def test_configured_threads_without_environment():
    configured = resolve_config({"experiment": "decay-study", "threads": 5})
    assert configured.threads == 5


def test_threads_environment_not_an_integer(monkeypatch):
    monkeypatch.setenv(THREADS_VARIABLE, "many")
    with pytest.raises(ConfigError) as error:
        resolve_config({"experiment": "decay-study"})
    error.match(THREADS_VARIABLE)


def test_threads_default_to_cpu_count(monkeypatch):
    monkeypatch.delenv(THREADS_VARIABLE, raising=False)
    monkeypatch.setattr("os.cpu_count", lambda: 7)
    assert resolve_config({"experiment": "decay-study"}).threads == 7


def test_config_hash():
    base = {"experiment": "decay-study", "threads": 1}
    first = resolve_config(base)
    second = resolve_config(dict(base, threads=4, output="elsewhere"))
    third = resolve_config(dict(base, domain={"n": 33}))
    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != third.config_hash()
    assert len(first.config_hash()) == 64


def test_toml_and_json_agree(tmp_path):
    toml = load_config(DATA / "potentials.toml")
    converted = _write_config(tmp_path / "potentials.json", json.dumps(
        {"experiment": "potentials-check", "threads": 1,
         "study": {"resolution": 32}}))
    assert load_config(converted).config_hash() == toml.config_hash()


def test_load_malformed():
    with pytest.raises(ConfigError) as error:
        load_config(DATA / "malformed.toml")
    error.match("Cannot parse")


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError) as error:
        load_config(tmp_path / "absent.toml")
    error.match("Cannot read")


def test_run_unknown_key(caplog):
    assert run(DATA / "unknown_key.toml") == EXIT_CONFIG
    assert "Unknown key 'nodes' in [domain]" in caplog.text


def test_run_potentials(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code = run(DATA / "potentials.toml")
    output = tmp_path / "nkit-output"
    verdicts = json.loads((output / "verdicts.json").read_text())
    assert [verdict["name"] for verdict in verdicts] == ["potentials"]
    assert code == EXIT_OK
    assert verdicts[0]["status"] == "PASS"
    assert verdicts[0]["failed"] == []
    expected = ["newtonian_ball", "single_layer_ball"] + [
        "{}_{}".format(check, kind)
        for check in ("gauss_flux", "closed_surface")
        for kind in ("ball", "ellipsoid", "cube")]
    assert sorted(verdicts[0]["checks"]) == sorted(expected)
    manifest = json.loads((output / "manifest.json").read_text())
    assert manifest["version"] == __version__
    assert manifest["experiment"] == "potentials-check"
    assert manifest["verdicts"] == {"potentials": "PASS"}
    assert manifest["config_hash"] == load_config(
        DATA / "potentials.toml").config_hash()
    assert "quadrature" in manifest["stages"]
    assert manifest["outputs"] == ["potentials.csv", "verdicts.json"]
    with open(output / "potentials.csv", newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["shape", "quantity", "value [length^2 or 1]"]
    # Four quantities for each of the three reference shapes.
    assert len(rows) == 13


def test_run_is_deterministic(tmp_path):
    outputs = []
    for name in ("first", "second"):
        config = _write_config(tmp_path / (name + ".toml"), (
            'experiment = "potentials-check"\nthreads = 1\n'
            'output = "{}"\n[study]\nresolution = 6\n').format(
                (tmp_path / name).as_posix()))
        run(config)
        outputs.append((tmp_path / name / "potentials.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_run_reciprocity(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(DATA / "reciprocity.json") == EXIT_OK
    with open(tmp_path / "nkit-output" / "reciprocity.csv",
              newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["coefficient"] for row in rows] == [
        "constant", "hoelder_bump", "smooth_wave"]
    assert all(float(row["relative_error [1]"]) < 1e-6 for row in rows)


def test_run_source_too_close_to_boundary(tmp_path, caplog):
    config = _write_config(tmp_path / "close.toml", (
        'experiment = "reciprocity-check"\nthreads = 1\n'
        'output = "{}"\n[domain]\nn = 17\n[neumann]\neps_cells = 3.0\n'
        '[study]\nk_values = [1.0]\n').format(
            (tmp_path / "out").as_posix()))
    assert run(config) == EXIT_VERDICT
    assert "mollification radius" in caplog.text
    verdicts = json.loads((tmp_path / "out" / "verdicts.json").read_text())
    assert verdicts[0]["name"] == "reciprocity-check"
    assert verdicts[0]["status"] == "FAIL"
    assert "mollification radius" in verdicts[0]["error"]


def test_run_series_hypothesis_is_a_failed_verdict(tmp_path, monkeypatch,
                                                   caplog):
    def runner(config, stage):
        raise SeriesHypothesisError("|mu_a n| reaches 1.2 on D")

    monkeypatch.setitem(PRESETS, "pat-series",
                        PRESETS["pat-series"]._replace(runner=runner))
    config = _write_config(tmp_path / "series.toml", (
        'experiment = "pat-series"\nthreads = 1\noutput = "{}"\n').format(
            (tmp_path / "out").as_posix()))
    with caplog.at_level(logging.ERROR):
        assert run(config) == EXIT_VERDICT
    assert "reaches 1.2" in caplog.text
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["verdicts"] == {"pat-series": "FAIL"}
    verdicts = json.loads((tmp_path / "out" / "verdicts.json").read_text())
    assert verdicts[0]["error_type"] == "SeriesHypothesisError"


def test_run_config_error_in_runner(tmp_path, caplog):
    config = _write_config(tmp_path / "kind.toml", (
        'experiment = "decay-study"\nthreads = 1\noutput = "{}"\n'
        '[domain]\nn = 9\n[coefficient]\nkind = "striped"\n').format(
            (tmp_path / "out").as_posix()))
    assert run(config) == EXIT_CONFIG
    assert "Unknown coefficient kind" in caplog.text
    assert not (tmp_path / "out").exists()


def test_run_decay_study(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = _write_config(tmp_path / "decay.toml", (
        'experiment = "decay-study"\nthreads = 1\n[domain]\nn = 33\n'
        '[solver]\nmethod = "direct"\ntol = 1e-10\n'
        '[neumann]\neps_cells = 2.0\n'))
    assert run(config) == EXIT_OK
    output = tmp_path / "nkit-output"
    verdicts = json.loads((output / "verdicts.json").read_text())
    assert verdicts[0]["status"] == "PASS"
    assert verdicts[0]["expected"] == -1.0
    assert -1.15 <= verdicts[0]["slope"] <= -0.85
    with open(output / "decay.csv", newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["r [length]", "shell_statistic [field units]",
                       "nodes [count]"]
    assert len(rows) > 1
    radii = [float(row[0]) for row in rows[1:]]
    assert radii == sorted(radii)


@pytest.mark.filterwarnings("ignore:Smallness flag")
def test_run_pat_invert_demo(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = _write_config(tmp_path / "invert.toml", (
        'experiment = "pat-invert-demo"\nthreads = 1\n[domain]\nn = 41\n'
        '[anomaly]\neps = 0.12\n'))
    assert run(config) == EXIT_OK
    output = tmp_path / "nkit-output"
    manifest = json.loads((output / "manifest.json").read_text())
    assert manifest["verdicts"] == {"inversion": "PASS",
                                    "inversion_self_consistency": "PASS"}
    assert manifest["outputs"] == ["estimate.json", "verdicts.json"]
    estimate = json.loads((output / "estimate.json").read_text())
    assert estimate["mu_a_true"] == 0.2
    assert estimate["estimate"] == pytest.approx(0.2, rel=0.1)
    assert estimate["synthetic_estimate"] == pytest.approx(0.2, rel=1e-6)
    assert len(estimate["history"]) == estimate["iterations"] + 1


def test_pat_invert_demo_defaults():
    config = resolve_config({"experiment": "pat-invert-demo"})
    assert config.anomaly.eps == 0.06
    assert config.anomaly.mu_a == 0.2
    assert config.medium.mu_s == 10.0
    assert config.domain.n == 81


def test_dump_matrix(tmp_path):
    target = tmp_path / "matrix.txt"
    assert main(["-q", "dump-matrix", str(DATA / "matrix.toml"),
                 "-o", str(target)]) == EXIT_OK
    domain = make_domain(1.0, 9)
    op = assemble(generate_coefficient(domain, Constant(1.0)), 2.0)
    lines = target.read_text().splitlines()
    assert len(lines) == op.matrix.nnz
    assert all(len(line.split()) == 4 for line in lines)


def test_dump_matrix_default_location(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert dump_matrix(DATA / "matrix.toml") == EXIT_OK
    assert (tmp_path / "nkit-output" / "matrix.txt").exists()


def test_dump_matrix_bad_config(caplog):
    with caplog.at_level(logging.ERROR):
        assert dump_matrix(DATA / "malformed.toml") == EXIT_CONFIG
    assert "Cannot parse" in caplog.text


def test_main_run_quiet():
    assert main(["-q", "run", str(DATA / "malformed.toml")]) == EXIT_CONFIG


def test_main_requires_a_command():
    with pytest.raises(SystemExit):
        main([])
