import subprocess
import sys

import numpy as np
import pytest

from rsdso import cli
from rsdso.evaluation import Trajectory, read_tum, write_tum


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["odometry", "--data", "x"]) == cli.EXIT_USAGE
    assert cli.main(["selftest", "nothing"]) == cli.EXIT_USAGE


def test_bad_config_exit_one(tmp_path, small_twins):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("no_such_key = 3\n")
    rc = cli.main(["odometry", "--data", str(small_twins[0]), "--shutter", "rs", "--out", str(tmp_path / "o.txt"),
                   "--config", str(cfg)])
    assert rc == cli.EXIT_USAGE


def test_missing_dataset_exit_two(tmp_path):
    rc = cli.main(["odometry", "--data", str(tmp_path / "none"), "--shutter", "gs", "--out", str(tmp_path / "o.txt")])
    assert rc == cli.EXIT_DATA


def test_simulate_writes_dataset(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("frames = 3\nwidth = 64\nheight = 48\nfx = 50\nfy = 50\ncx = 31.5\ncy = 23.5\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "seq")]) == cli.EXIT_OK
    assert (tmp_path / "seq" / "calib.txt").exists()
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "tw"), "--twins"]) == cli.EXIT_OK
    assert (tmp_path / "tw" / "rs" / "groundtruth.txt").exists() and (tmp_path / "tw" / "gs").exists()


def test_odometry_then_eval(tmp_path, small_twins, capsys):
    out = tmp_path / "est.txt"
    assert cli.main(["odometry", "--data", str(small_twins[1]), "--shutter", "gs", "--out", str(out)]) == cli.EXIT_OK
    assert len(read_tum(out)) >= 3
    csv_path = tmp_path / "err.csv"
    rc = cli.main(["eval", "--gt", str(small_twins[1] / "groundtruth.txt"), "--est", str(out), "--csv", str(csv_path)])
    assert rc == cli.EXIT_OK
    assert "ate " in capsys.readouterr().out
    assert csv_path.read_text().startswith("timestamp,error")


def test_eval_too_few_matches_is_data_error(tmp_path, small_twins):
    est = tmp_path / "est.txt"
    write_tum(est, Trajectory(np.array([1e6]), np.eye(4)[None]))
    assert cli.main(["eval", "--gt", str(small_twins[1] / "groundtruth.txt"), "--est", str(est)]) == cli.EXIT_DATA


def test_batch_writes_results(tmp_path, small_twins):
    out, hist = tmp_path / "batch.csv", tmp_path / "hist.csv"
    rc = cli.main(["batch", "--data", str(small_twins[1]), "--runs", "2", "--shutter", "gs", "--out", str(out),
                   "--histogram", str(hist)])
    assert rc == cli.EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0] == "seed,ate,error" and len(rows) == 3
    assert hist.exists()


def test_selftests_pass(capsys):
    assert cli.main(["selftest", "schur", "--n", "10"]) == cli.EXIT_OK
    assert cli.main(["selftest", "jacobians", "--n", "40"]) == cli.EXIT_OK
    assert cli.main(["selftest", "rsc", "--n", "500"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rsdso", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "odometry" in res.stdout
