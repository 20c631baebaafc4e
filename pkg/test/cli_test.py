import csv
import json
import pytest

import numpy as np

from circuitse import load_se_case, save_case, save_se_case
from circuitse.case_io import load_result
from circuitse.casegen import PmuDevice, RtuDevice
from circuitse.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main

NOISE_FLAGS = ["--pmu-perfect", "0.2", "--pmu-noisy", "0.1"]


@pytest.fixture()
def case_file(case14, tmp_path):
    path = tmp_path / "case14.m"
    save_case(case14, path)
    return str(path)


@pytest.fixture()
def se_file(zero_noise_se, tmp_path):
    path = tmp_path / "se.json"
    save_se_case(zero_noise_se, path)
    return str(path)


def test_missing_file(tmp_path, capsys):
    assert main(["pf", str(tmp_path / "nope.m")]) == EXIT_IO
    assert "nope.m" in capsys.readouterr().err


def test_malformed_case(tmp_path):
    path = tmp_path / "bad.m"
    path.write_text("mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0;\n];\nmpc.gen = [];\nmpc.branch = [];\n")
    assert main(["pf", str(path)]) == EXIT_IO


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["estimate"]) == EXIT_USAGE
    assert main(["estimate", "x.json", "--model", "delta-z"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_invalid_noise_input(case_file):
    assert main(["gen-case", case_file, "--pmu-perfect", "0.8", "--pmu-noisy", "0.5"]) == EXIT_USAGE


def test_pf(case_file, tmp_path, case14_pf):
    out = tmp_path / "pf.json"
    assert main(["pf", case_file, "-o", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    np.testing.assert_allclose(doc["vr"], case14_pf.vr, atol=1e-10)
    assert doc["iterations"] == case14_pf.iterations


def test_pf_iteration_limit(case_file):
    assert main(["pf", case_file, "--max-iter", "1"]) == EXIT_NUMERICAL


def test_gen_case_is_deterministic(case_file, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen-case", case_file, "--seed", "7", "-o", str(a)] + NOISE_FLAGS) == EXIT_OK
    assert main(["gen-case", case_file, "--seed", "7", "-o", str(b)] + NOISE_FLAGS) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_both_models_agree_without_noise(se_file, tmp_path):
    results = {}
    for model in ("delta-i", "delta-y"):
        out = tmp_path / f"{model}.json"
        assert main(["estimate", se_file, "--model", model, "-o", str(out)]) == EXIT_OK
        results[model] = load_result(out)
    np.testing.assert_allclose(results["delta-i"]["vr"], results["delta-y"]["vr"], atol=1e-8)
    np.testing.assert_allclose(results["delta-i"]["vi"], results["delta-y"]["vi"], atol=1e-8)
    assert results["delta-y"]["sigma_ss"] < 1e-12


def test_estimate_errors_csv(se_file, tmp_path, zero_noise_se):
    errors = tmp_path / "errors.csv"
    assert main(["estimate", se_file, "-o", str(tmp_path / "e.json"), "--errors-csv", str(errors)]) == EXIT_OK
    rows = list(csv.DictReader(errors.open()))
    assert len(rows) == zero_noise_se.grid.n
    assert all(float(r["sq_error"]) < 1e-14 for r in rows)


def test_trials(case_file, tmp_path):
    out = tmp_path / "trials.csv"
    argv = ["trials", case_file, "--min-trials", "4", "--max-trials", "6", "--both-weightings", "-o", str(out)]
    argv += ["--measure", "ss", "--measure", "max"] + NOISE_FLAGS
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4
    assert {r["weighting"] for r in rows} == {"weighted", "unweighted"}


def test_mc(se_file, tmp_path):
    out = tmp_path / "mc.json"
    hist = tmp_path / "hist"
    argv = ["mc", se_file, "--samples", "40", "--pilot", "1000", "--bins", "8", "--net-uncertainty", "typical"]
    assert main(argv + ["-o", str(out), "--hist-dir", str(hist), "--threads", "2"]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["samples_completed"] == 40
    assert len(doc["vm"]["std"]) == 14
    header = (hist / "vm.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "bus"
    assert len(header) == 1 + 9 + 8


def test_mc_perturbation_file(se_file, tmp_path):
    spec = tmp_path / "net.json"
    spec.write_text(json.dumps({"sigma_line_r": 0.01, "sigma_bogus": 1}))
    assert main(["mc", se_file, "--samples", "10", "--net-uncertainty", str(spec)]) == EXIT_USAGE


def test_selftest(capsys):
    assert main(["selftest", "--cases", "2"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 + 2 * 2
    assert all(line.startswith("ok") for line in lines)


def _devices(path):
    se = load_se_case(path)
    pmus = [d for d in se.devices if isinstance(d, PmuDevice)]
    rtus = [d for d in se.devices if isinstance(d, RtuDevice)]
    return pmus, rtus


def test_gen_case_placement_flags(case_file, tmp_path):
    out = tmp_path / "se.json"
    argv = ["gen-case", case_file, "--pmu-perfect", "0.2", "--pmu-noisy", "0.1", "--degraded-frac", "0.5"]
    assert main(argv + ["--seed", "7", "-o", str(out)]) == EXIT_OK
    pmus, rtus = _devices(out)
    assert sum(d.perfect for d in pmus) == 2
    assert sum(not d.perfect for d in pmus) == 1
    assert len(rtus) == 11
    assert sorted(d.gamma for d in rtus) == [0.1] * 5 + [1.0] * 6


def test_gen_case_weight_flags(case_file, tmp_path):
    out = tmp_path / "se.json"
    argv = ["gen-case", case_file, "--degraded", "0.5", "--weight-exponent", "2", "--rtu-gamma", "2"]
    assert main(argv + ["-o", str(out)]) == EXIT_OK
    _, rtus = _devices(out)
    assert {d.gamma for d in rtus} == {2.0, 0.02}

    assert main(argv + ["--unweighted", "-o", str(out)]) == EXIT_OK
    _, rtus = _devices(out)
    assert {d.gamma for d in rtus} == {2.0}


def test_trials_accept_weighting_flags(case_file, tmp_path):
    out = tmp_path / "trials.csv"
    argv = ["trials", case_file, "--min-trials", "3", "--max-trials", "3", "--degraded-frac", "0.3"]
    argv += ["--weight-exponent", "2", "-o", str(out)] + NOISE_FLAGS
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert [r["weighting"] for r in rows] == ["weighted"]
    assert int(rows[0]["trials"]) == 3


def test_old_flag_spelling_rejected(case_file):
    assert main(["gen-case", case_file, "--frac-pmu-perfect", "0.2"]) == EXIT_USAGE


def test_pipeline_is_byte_reproducible(case_file, tmp_path):
    runs = []
    for threads in ("1", "4"):
        out = tmp_path / f"run{threads}"
        out.mkdir()
        common = ["--seed", "13", "--threads", threads]
        assert main(["pf", case_file, "-o", str(out / "pf.json")] + common) == EXIT_OK
        assert main(["gen-case", case_file, "-o", str(out / "se.json")] + common + NOISE_FLAGS) == EXIT_OK
        mc = ["mc", str(out / "se.json"), "--samples", "200", "--pilot", "50", "--net-uncertainty", "typical"]
        assert main(mc + ["-o", str(out / "mc.json"), "--hist-dir", str(out / "hist")] + common) == EXIT_OK
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    assert len(runs[0]) >= 5
    assert runs[0] == runs[1]
