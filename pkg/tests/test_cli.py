import csv
import json
import subprocess
import sys

import pytest

from rbsurrogate import storage
from rbsurrogate.cli import main

SMALL = """
[problem]
grid_n = 8
d_true = 32

[test]
K = 8
d_ref = 4

[encoder]
out_rank = 6

[fit]
kind = "sg"
s = 3.0

[sg]
ell = 3.0

[nn]
n = 16
width = 8
depth = 1
d_in = 4
epochs = 3
objective = "H1"

[ensemble]
s = [3.0]
kinds = ["sg"]

[ensemble.sg]
a = [2.0]
b = [1.0]
ell = [2.0]
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_missing_config_exit_1(tmp_path, capsys):
    assert main(["ensemble", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")]) == 1
    assert "missing.toml" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["fit", "--no-such-flag"]) == 1
    assert main(["fit", "--threads", "0"]) == 1
    assert "usage" in capsys.readouterr().err


def test_fit_then_eval(cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["fit", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "surrogate" / "surrogate.json").is_file()
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and 0 < float(rows[0]["eps_l2"]) < 1
    run = json.loads((out / "run_eval.json").read_text())
    assert run["inputs"] and run["config"]["problem"]["grid_n"] == 8


def test_eval_without_surrogate_is_config_error(cfg, tmp_path):
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 1


def test_gen_twice_same_hash(cfg, tmp_path):
    hashes = []
    for name in ("a", "b"):
        assert main(["gen", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        hashes.append(storage.hash_directory(tmp_path / name / "dataset"))
    assert hashes[0] == hashes[1]
    assert main(["gen", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert storage.hash_directory(tmp_path / "c" / "dataset") != hashes[0]


def test_fit_nn_from_dataset_and_tt(cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["fit", "--config", str(cfg), "--out", str(out), "--kind", "nn",
                 "--dataset", str(out / "dataset")]) == 0
    assert (out / "surrogate" / "trace.csv").is_file()
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "t"), "--kind", "tt"]) == 0
    assert main(["fit", "--config", str(cfg), "--out", str(out), "--kind", "sg",
                 "--dataset", str(out / "dataset")]) == 1


def test_basis_ensemble_report(cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["basis", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "basis" / "matern" / "manifest.json").is_file()
    assert main(["ensemble", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("records.csv", "pareto.csv", "error_vs_n.csv"):
        assert (out / name).is_file()
    (out / "pareto.csv").unlink()
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "pareto.csv").is_file()
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "none")]) == 1


def test_runtime_failure_exit_2(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text(SMALL.replace("d_in = 4", "d_in = 400"))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rbsurrogate", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
