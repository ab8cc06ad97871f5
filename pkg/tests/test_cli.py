
import numpy as np
import pytest

from src.cli.main import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main

SMALL = """
[scenario]
pattern = T3
partition_x = 2
partition_y = 2

[bs]
nx = 8
ny = 8

[ms]
nx = 4
ny = 4

[pose.1]
x = 0.3
y = -0.2
z = 1.2
roll = 0.2
pitch = -0.1
yaw = 0.4
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.ini").write_text(SMALL, encoding="utf-8")
    return tmp_path


def test_unknown_section_is_config_error(workdir):
    (workdir / "bad.ini").write_text("[nonsense]\na = 1\n", encoding="utf-8")
    assert main(["bound", "--config", "bad.ini"]) == EXIT_CONFIG


def test_missing_config_file(workdir):
    assert main(["simulate", "--config", "absent.ini"]) == EXIT_CONFIG


def test_sweep_needs_sweep_section(workdir):
    assert main(["sweep", "--config", "small.ini"]) == EXIT_CONFIG


def test_simulate_then_baseline_from_dump(workdir):
    assert main(["simulate", "--config", "small.ini", "--seed", "4",
                 "--out", "signal.bin", "--truth", "truth.csv"]) == EXIT_OK
    assert (workdir / "signal.bin").stat().st_size == 32 + 64 * 3 * 16
    truth = (workdir / "truth.csv").read_text(encoding="utf-8").splitlines()
    assert truth[1].startswith("1,0.29999999999999999,")

    assert main(["baseline", "--config", "small.ini", "--signal", "signal.bin",
                 "--out", "estimate.csv"]) == EXIT_OK
    rows = (workdir / "estimate.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "ms,x,y,z,roll,pitch,yaw,position_error,rotation_nmse"
    assert len(rows) == 2
    assert rows[1].split(",")[7] != ""


def test_bound_writes_csv_to_stdout(workdir, capsys):
    assert main(["bound", "--config", "small.ini"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("ms,position_bound,attitude_bound,rotation_nmse_bound\r\n1,")


def test_sweep_writes_metrics_and_svg(workdir):
    (workdir / "sweep.ini").write_text(
        SMALL + "\n[sweep]\nvariable = tx_power_dbm\nvalues = 20, 30\ntrials = 1\nestimators = baseline\n",
        encoding="utf-8")
    assert main(["sweep", "--config", "sweep.ini", "--out", "metrics.csv", "--svg"]) == EXIT_OK
    lines = (workdir / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("tx_power_dbm,20,baseline,")
    assert (workdir / "metrics.svg").exists()


def test_singular_bound_exits_numerical(workdir, monkeypatch, capsys):
    def broken(pseudotrue, *args, **kwargs):
        n = pseudotrue.gamma_ff.size
        return np.full((n, n), np.nan), np.eye(n)

    monkeypatch.setattr("src.core.mcrb.information_matrices", broken)
    assert main(["bound", "--config", "small.ini"]) == EXIT_NUMERICAL
    assert capsys.readouterr().out == ""


def test_stray_value_error_exits_numerical(workdir, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("covariance is not symmetric")

    monkeypatch.setattr("src.core.baseline.farfield_aoa", broken)
    assert main(["baseline", "--config", "small.ini"]) == EXIT_NUMERICAL
