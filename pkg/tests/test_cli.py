import json

import pytest

from survey_tmle import __version__
from survey_tmle.cli import main, read_config
from survey_tmle.exceptions import InputError
from survey_tmle.data import WeightedSample
from survey_tmle.io import load_dataset, write_dataset
from survey_tmle.rng import make_rng
from survey_tmle.simulation import OUTCOME_RANGES, DgpSpec, draw_dataset
from survey_tmle.tmle_binary import BinaryTMLE

from conftest import binary_world


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "j2.csv"
    write_dataset(path, draw_dataset(DgpSpec(2), 30_000, make_rng(1)))
    return path


@pytest.fixture(scope="module")
def binary_csv(tmp_path_factory):
    rng = make_rng(2)
    w, a, y, _ = binary_world(20_000, rng)
    path = tmp_path_factory.mktemp("data") / "bin.csv"
    with open(path, "w") as fh:
        fh.write("w,A,Y,V\n")
        for row in zip(w, a, y, rng.integers(1, 3, len(w))):
            fh.write(",".join(repr(float(x)) for x in row[:3]) + f",{row[3]}\n")
    return path


Y_RANGE = "--y-range={},{}".format(*OUTCOME_RANGES[2])


def test_sample_writes_indices_and_is_reproducible(data_csv, tmp_path, capsys):
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    for out in (out1, out2):
        assert main(["sample", "--input", str(data_csv), "--n", "300", "--seed", "4", "--out", str(out)]) == 0
    lines = out1.read_text().splitlines()
    assert lines[0] == "index,p,weight" and len(lines) == 301
    assert out1.read_bytes() == out2.read_bytes()
    err = capsys.readouterr().err
    assert f"survey-tmle {__version__}" in err and "seed=4" in err and "N=30000" in err


def test_pilot_then_estimate(data_csv, tmp_path):
    h = tmp_path / "h.csv"
    assert main(["pilot", "--input", str(data_csv), "--n0", "800", "--seed", "5", "--g-min", "0.05",
                 "--out", str(h), "--json", str(tmp_path / "pilot.json")]) == 0
    assert h.read_text().startswith("stratum,h\n")
    assert set(json.loads((tmp_path / "pilot.json").read_text())["h"]) == {"1", "2", "3"}
    out = tmp_path / "r.json"
    nu = tmp_path / "nu.json"
    assert main(["tmle-continuous", "--input", str(data_csv), Y_RANGE, "--n", "1500", "--h-file", str(h),
                 "--seed", "6", "--out", str(out), "--dump-nuisances", str(nu), "--max-iter", "3"]) == 0
    r = json.loads(out.read_text())
    for key in ("psi", "sigma_n", "score_residual", "ci", "n", "N", "gamma_n", "iterations", "score_trace"):
        assert key in r
    assert r["n"] == 1500 and r["N"] == 30_000
    assert "Q" in json.loads(nu.read_text())


def test_tmle_binary_full_data_matches_library(binary_csv, capsys):
    assert main(["tmle-binary", "--input", str(binary_csv)]) == 0
    r = json.loads(capsys.readouterr().out)
    ds = load_dataset(binary_csv, exposure="binary")
    assert r["psi"] == BinaryTMLE().fit_sample(WeightedSample.full(ds)).psi_


def test_config_file_and_flag_precedence(data_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# sampling\ninput = {data_csv}\nn = 200\n--seed = 7\ndesign = pareto\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["sample", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["sample", "--config", str(cfg), "--n", "250", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 201
    assert len(b.read_text().splitlines()) == 251


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    assert main(["sample", "--config", str(bad)]) == 2
    bad.write_text("just words\n")
    with pytest.raises(InputError):
        read_config(bad)


def test_exit_codes(data_csv, tmp_path):
    assert main(["sample", "--input", str(data_csv), "--n", "10"]) == 2  # no seed
    assert main(["sample", "--input", str(tmp_path / "none.csv"), "--n", "10", "--seed", "1"]) == 2
    assert main(["tmle-binary", "--input", str(data_csv)]) == 2  # exposure not binary
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--design", "bogus"])
    assert exc.value.code == 2


def test_validate_and_negative_control(capsys):
    assert main(["validate", "--draws", "20000"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 9
    assert main(["validate", "--draws", "20000", "--fluct-tol", "0.1"]) == 4
    assert "FAIL  binary fluctuation" in capsys.readouterr().out


def test_simulate_outputs_do_not_depend_on_threads(tmp_path):
    args = ["simulate", "--dgp", "2", "--N", "20000", "--B", "3", "--n-grid", "300", "--n0", "400", "--seed", "3"]
    assert main(args + ["--threads", "1", "--out", str(tmp_path / "t1")]) == 0
    assert main(args + ["--threads", "2", "--out", str(tmp_path / "t2")]) == 0
    for ext in ("json", "csv", "txt"):
        assert (tmp_path / f"t1.{ext}").read_bytes() == (tmp_path / f"t2.{ext}").read_bytes()


def test_simulate_refuses_large_fraction(tmp_path):
    args = ["simulate", "--dgp", "1", "--N", "5000", "--B", "2", "--n-grid", "500", "--seed", "1",
            "--h-mode", "uniform", "--out", str(tmp_path / "x")]
    assert main(args) == 2
    assert main(args + ["--allow-large-fraction"]) == 0
