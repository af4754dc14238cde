from __future__ import annotations

import csv
import json
import math

import pytest

from cube_localize.cli import VOLATILE_KEYS, main
from cube_localize.report import canonical_json


def run(argv, tmp_path=None):
    return main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_certify_exit_codes(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert run(["certify", "--family", "uniform", "--n", 4, "--condition", "semi-lc", "--threshold", 1.5, "--out", out]) == 0
    rep = load(out)["report"]
    assert rep["certified_value"] == pytest.approx(1.0)
    assert rep["verdict"] == "pass"
    assert run(["certify", "--family", "two-point", "--n", 3, "--condition", "semi-lc", "--threshold", 2, "--out", out]) == 2
    rep = load(out)["report"]
    assert rep["certified_value"] == pytest.approx(3.0)
    assert abs(sum(rep["witness"])) < 1e-4
    assert "witness" in capsys.readouterr().out
    assert run(["certify", "--family", "slice", "--n", 4, "--k", 0, "--condition", "rayleigh"]) == 0


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["bogus"]) == 1
    assert run(["certify", "--family", "uniform", "--n", 3]) == 1
    assert run(["certify", "--family", "uniform", "--n", 3, "--condition", "nope"]) == 1
    assert run(["certify", "--spec", '{"family": "uniform", "n": 3', "--condition", "rayleigh"]) == 1
    err = capsys.readouterr().err
    assert "line 1" in err and "column" in err
    assert run(["certify", "--spec", '{"family": "product", "n": 3}', "--condition", "rayleigh"]) == 1
    assert "means" in capsys.readouterr().err
    assert run(["certify", "--spec", str(tmp_path / "missing.json"), "--condition", "rayleigh"]) == 1


def test_spec_file(tmp_path):
    spec = tmp_path / "m.json"
    spec.write_text(json.dumps({"family": "product", "n": 2, "means": [0.1, -0.3]}))
    out = tmp_path / "c.json"
    assert run(["certify", "--spec", spec, "--condition", "rayleigh", "--out", out]) == 0
    assert load(out)["manifest"]["spec"]["means"] == [0.1, -0.3]


def test_w1_guard_and_value(tmp_path, capsys):
    a = tmp_path / "a.json"
    a.write_text(json.dumps({"family": "two_point", "n": 3}))
    out = tmp_path / "w.json"
    assert run(["w1", "--spec-a", a, "--spec-b", a, "--tilt-b", "0.05,0,0", "--out", out]) == 0
    rep = load(out)["report"]
    assert rep["w1"] == pytest.approx(rep["w1_dual"], abs=1e-8)
    assert rep["w1"] == pytest.approx(3 * math.tanh(0.05), abs=1e-10)
    big = json.dumps({"family": "uniform", "n": 12})
    assert run(["w1", "--spec-a", big, "--spec-b", big]) == 1
    assert "n <= 10" in capsys.readouterr().err


def test_simulate_writes_csv_and_manifest(tmp_path):
    out = tmp_path / "traj.csv"
    assert run(["simulate", "--family", "uniform", "--n", 2, "--seed", 3, "--t-max", 0.05, "--out", out]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "w_1", "w_2", "a_1", "a_2", "trace_cov"]
    manifest = load(tmp_path / "traj.csv.json")["manifest"]
    assert manifest["seed"] == 3 and manifest["seed_source"] == "flag"


def test_seed_sources(tmp_path, monkeypatch):
    out = tmp_path / "s.json"
    args = ["sample", "--family", "uniform", "--n", 1, "--paths", 50, "--adaptive", "--out", out]
    monkeypatch.setenv("CUBE_LOCALIZE_SEED", "77")
    assert run(args) == 0
    m = load(out)["manifest"]
    assert (m["seed"], m["seed_source"]) == (77, "env")
    monkeypatch.delenv("CUBE_LOCALIZE_SEED")
    assert run(args) == 0
    m = load(out)["manifest"]
    assert m["seed_source"] == "entropy" and isinstance(m["seed"], int)
    monkeypatch.setenv("CUBE_LOCALIZE_SEED", "abc")
    assert run(args) == 1


def test_sample_tilted_mean(tmp_path):
    out = tmp_path / "s.json"
    P = 4000
    assert run(["sample", "--family", "uniform", "--n", 1, "--tilt", 1.0, "--paths", P, "--seed", 1,
                "--adaptive", "--out", out]) == 0
    rep = load(out)["report"]
    sd = math.sqrt(1 - math.tanh(1.0) ** 2)
    assert abs(rep["empirical_mean"][0] - math.tanh(1.0)) <= 4 * sd / math.sqrt(P)


def test_audit_pass_and_fail(tmp_path):
    out = tmp_path / "a.json"
    assert run(["audit", "entropy-theorem", "--family", "slice", "--n", 6, "--k", 0, "--beta", 2, "--out", out]) == 0
    assert load(out)["report"]["pass"] is True
    assert run(["audit", "entropy-theorem", "--family", "two-point", "--n", 4, "--beta", 2]) == 2
    assert run(["audit", "entropy-theorem", "--family", "slice", "--n", 6]) == 1
    assert run(["audit", "hadamard-control", "--ns", "4,8"]) == 0


def test_audit_transport_guard():
    assert run(["audit", "transport-bound", "--family", "uniform", "--n", 4, "--beta", 1, "--eps", 0.5]) == 1
    assert run(["audit", "transport-bound", "--family", "uniform", "--n", 4, "--beta", 1, "--eps", 0.05]) == 0


def test_threads_recorded(tmp_path):
    out = tmp_path / "a.json"
    assert run(["audit", "small-tail", "--family", "ising", "--n", 3, "--seed", 2, "--threads", 3, "--out", out]) == 0
    assert load(out)["manifest"]["threads"] == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["audit", "trace-decay", "--family", "ising", "--n", 3, "--paths", 200, "--checkpoints", "1,2", "--adaptive"],
        ["audit", "supermartingale", "--family", "uniform", "--n", 3, "--beta", 1, "--paths", 200],
        ["audit", "variance-exponent", "--ns", "4,6"],
    ],
)
def test_reruns_are_byte_identical(tmp_path, argv):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(argv + ["--seed", 5, "--out", a]) == 0
    assert run(argv + ["--seed", 5, "--out", b]) == 0
    ja, jb = load(a), load(b)
    assert canonical_json(ja, drop=VOLATILE_KEYS) == canonical_json(jb, drop=VOLATILE_KEYS)


def test_rerun_from_manifest(tmp_path, monkeypatch):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    monkeypatch.setenv("CUBE_LOCALIZE_SEED", "12")
    assert run(["audit", "supermartingale", "--spec", '{"family": "slice", "n": 4, "k": 0}', "--beta", 2,
                "--paths", 100, "--out", a]) == 0
    monkeypatch.delenv("CUBE_LOCALIZE_SEED")
    assert run(["rerun", a, "--out", b]) == 0
    assert canonical_json(load(a), drop=VOLATILE_KEYS) == canonical_json(load(b), drop=VOLATILE_KEYS)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"manifest": {"command": "w1"}}))
    assert run(["rerun", bad]) == 1
    bad.write_text(json.dumps({"manifest": {"command": "audit small-tail", "params": {"bogus": 1}, "seed": 1}}))
    assert run(["rerun", bad]) == 1
