import filecmp

import pytest

from chipqkd import experiments
from chipqkd.cli import main
from chipqkd.config import load_config
from chipqkd.experiments import BlockResult, emit_summary, read_csv, trend_test

FAST = ["--set", "experiment.landscape_resolution=64"]


def header_dict(path):
    head, rows = read_csv(path)
    return dict(line.split("=", 1) for line in head), rows


def test_calibrate_outputs_and_headers(tmp_path, capsys):
    assert main(["calibrate", "--out", str(tmp_path), "--seed", "3", *FAST]) == 0
    cfg = load_config(None, FAST[1:], seed=3)
    for name in ("trajectory.csv", "trajectory_x.csv", "landscape.csv", "calibration.csv"):
        head, rows = header_dict(tmp_path / name)
        assert head["config_hash"] == cfg.hash()
        assert head["seed"] == "3"
        assert rows
    _, land = header_dict(tmp_path / "landscape.csv")
    assert len(land) == 64 * 64
    assert "mub_defect" in capsys.readouterr().out


def test_perfect_coupler_calibrates_in_one_sweep(tmp_path):
    assert main(["calibrate", "--out", str(tmp_path), "--set", "chip.delta=0", *FAST]) == 0
    _, rows = header_dict(tmp_path / "trajectory.csv")
    assert float(rows[-1]["r_err"]) < 1e-12
    assert max(int(r["iteration"]) for r in rows) <= 2


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[link]\nlength = 3\n")
    assert main(["skr-curve", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert f"{bad}:2" in capsys.readouterr().err


def test_invariant_failure_exit_code(tmp_path):
    rc = main(["calibrate", "--out", str(tmp_path), "--set", "experiment.noise_sigma=0.05", *FAST])
    assert rc == 3


def test_stability_is_reproducible(tmp_path):
    args = ["stability", "--set", "experiment.blocks=4", "--set", "protocol.block_pulses=50000000000",
            "--seed", "11"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("stability.csv", "stability_summary.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    _, rows = header_dict(tmp_path / "a" / "stability.csv")
    assert len(rows) == 4
    assert [float(r["t_s"]) for r in rows] == [10.0, 20.0, 30.0, 40.0]


def test_skr_curve_and_spgd_demo(tmp_path):
    sets = ["--set", "experiment.distances=150", "--set", "experiment.optimize=false",
            "--set", "spgd.duration_s=30"]
    assert main(["skr-curve", "--out", str(tmp_path), *sets]) == 0
    _, rows = header_dict(tmp_path / "skr_curve.csv")
    assert float(rows[0]["skr_bps"]) > 1e5
    assert main(["spgd-demo", "--out", str(tmp_path), *sets]) == 0
    _, rows = header_dict(tmp_path / "spgd_trace.csv")
    assert len(rows) == 30


def test_mc_vs_analytic_small(tmp_path):
    sets = ["--set", "experiment.mc_seeds=2", "--set", "experiment.mc_pulses=200000"]
    assert main(["mc-vs-analytic", "--out", str(tmp_path), *sets]) == 0
    _, rows = header_dict(tmp_path / "mc_vs_analytic.csv")
    assert all(r["ok"] == "True" for r in rows)


def test_show_config(capsys):
    assert main(["show-config"]) == 0
    assert "[spgd]" in capsys.readouterr().out


def block(v, q=0.01):
    return BlockResult(0, 0.0, v, q, q, q)


def test_summary_single_block_flags_n1():
    table, rows = emit_summary([block(5.0)])
    assert rows[0]["std"] == 0.0 and rows[0]["n"] == 1 and rows[0]["flag"] == "n=1"
    assert "n=1" in table


def test_summary_identical_inputs_have_zero_std():
    _, rows = emit_summary([block(7.25)] * 10)
    assert all(r["std"] == 0.0 for r in rows)
    assert rows[0]["mean"] == 7.25


def test_summary_uses_sample_std():
    _, rows = emit_summary([block(1.0), block(2.0), block(3.0)])
    assert rows[0]["std"] == pytest.approx(1.0)
    assert (rows[0]["min"], rows[0]["max"]) == (1.0, 3.0)
    with pytest.raises(ValueError):
        emit_summary([])


def test_trend_test_detects_slope():
    slope, se = trend_test([2.0 * i + (-1) ** i for i in range(20)])
    assert slope == pytest.approx(2.0, abs=0.1)
    assert abs(slope) > 2 * se
    flat, se_flat = trend_test([(-1) ** i for i in range(20)])
    assert abs(flat) < 2 * se_flat


def test_poisson_consistency_rule():
    assert experiments.poisson_consistent(0, 0.0)
    assert experiments.poisson_consistent(3, 0.5)
    assert not experiments.poisson_consistent(12, 0.5)
    assert not experiments.poisson_consistent(1, 0.0)
