import csv
import json
import subprocess
import sys

import pytest

from ringbalance import metrics
from ringbalance.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, main
from ringbalance.core import DatasetSpec

from conftest import make_config
from test_transport import free_ports


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    make_config([0.001, 0.002], dataset=DatasetSpec(size=400), epochs=4).dump(path)
    return path


def test_run_writes_artifacts(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    rows = metrics.read_csv(out / "run.csv")
    assert len(rows) == 8
    report = metrics.read_json(out / "run.json")
    assert report.final_weights == (13, 7)
    assert "final_weights=[13, 7]" in capsys.readouterr().out


def test_run_overrides(config_file, tmp_path):
    out = tmp_path / "out"
    args = ["run", "--config", str(config_file), "--mode", "static", "--weights", "7,13", "--epochs", "2",
            "--out", str(out)]
    assert main(args) == EXIT_OK
    report = metrics.read_json(out / "run.json")
    assert len(report.epochs) == 2
    assert all(e.weights == (7, 13) for e in report.epochs)


def test_invalid_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    make_config([0.001], dataset=DatasetSpec(size=400)).dump(path)
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "ring requires n >= 2" in capsys.readouterr().err


def test_unknown_flag_exits_64(config_file):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(config_file), "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_missing_config_file_is_runtime_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_verify_allocator(capsys):
    assert main(["verify-allocator", "--n", "2..8", "--trials", "1000", "--seed", "7"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_gradcheck(capsys):
    assert main(["gradcheck", "--model", "mlp", "--trials", "100", "--seed", "7"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_sweep(config_file, tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(config_file), "--costs", "0.001,0.001", "--costs", "0.001,0.002",
            "--costs", "0.001,0.001,0.002", "--out", str(out)]
    assert main(args) == EXIT_OK
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert float(rows[0]["speedup_vs_first"]) == 1.0
    assert rows[2]["final_weights"] == "8 8 4"
    assert (out / "run_2.json").exists()


def test_module_entry_point(config_file, tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run(
        [sys.executable, "-m", "ringbalance", "run", "--config", str(config_file), "--out", str(out)],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "run.csv").exists()


def test_worker_processes_over_tcp(tmp_path):
    path = tmp_path / "c.json"
    make_config([0.0005, 0.001], dataset=DatasetSpec(size=80), minibatch=1, epochs=3).dump(path)
    peers = ",".join(f"127.0.0.1:{p}" for p in free_ports(2))
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "ringbalance", "worker", "--config", str(path), "--rank", str(r),
             "--peers", peers, "--out", str(tmp_path / "out")],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        for r in range(2)
    ]
    outputs = [p.communicate(timeout=60) for p in procs]
    for p, (so, se) in zip(procs, outputs):
        assert p.returncode == 0, se
    report = json.loads((tmp_path / "out" / "run.json").read_text())
    assert report["clock"] == "wall"
    assert len(report["epochs"]) == 3
