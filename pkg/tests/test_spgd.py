import math

import numpy as np
import pytest

from chipqkd import link, spgd
from chipqkd.errors import ContractError
from chipqkd.experiments import read_csv
from chipqkd.link import ChannelState, LinkParams
from chipqkd.polarization import PolTransform, rotation, to_stokes, H, PLUS


def stokes_jacobian(v, h=1e-6):
    cols = []
    for i in range(4):
        dv = np.zeros(4)
        dv[i] = h
        up = [to_stokes(spgd.epc_transform(v + dv).apply(s)).as_array() for s in (H, PLUS)]
        dn = [to_stokes(spgd.epc_transform(v - dv).apply(s)).as_array() for s in (H, PLUS)]
        cols.append(np.concatenate(up) - np.concatenate(dn))
    return np.array(cols).T / (2 * h)


def test_epc_is_unitary_and_nominal_is_identity():
    assert np.allclose(spgd.epc_matrix(np.zeros(4)), np.eye(2))
    m = spgd.epc_matrix(spgd.NOMINAL_VOLTAGES)
    assert np.allclose(m / m[0, 0], np.eye(2))
    r = spgd.epc_matrix([0.3, -1.2, 2.0, 0.7])
    assert np.allclose(r.conj().T @ r, np.eye(2))


def test_nominal_point_is_not_singular():
    # all-zero control values leave one rotation direction unreachable to first order
    assert np.linalg.matrix_rank(stokes_jacobian(np.zeros(4)), tol=1e-6) == 2
    assert np.linalg.matrix_rank(stokes_jacobian(np.array(spgd.NOMINAL_VOLTAGES)), tol=1e-6) == 3


def test_objective_floor_is_pbs_leakage():
    lp = LinkParams()
    eps = link.pbs_leakage(lp)
    assert spgd.wrong_detector_fraction(np.eye(2), lp) == pytest.approx(eps)
    flip = rotation((0, 0, 1), math.pi)  # swaps H with V and + with -
    assert spgd.wrong_detector_fraction(flip, lp) == pytest.approx(1 - eps)


def test_controller_validation():
    with pytest.raises(ContractError):
        spgd.SpgdController(voltages=np.zeros(3))
    with pytest.raises(ContractError):
        spgd.SpgdController(perturbation=0.0)
    with pytest.raises(ContractError):
        spgd.SpgdController(voltages=np.full(4, 100.0))


def test_zero_gain_step_leaves_voltages(rng):
    c = spgd.SpgdController(gain=0.0)
    v0 = c.voltages.copy()
    spgd.spgd_step(c, lambda v: float(np.sum(v**2)), rng)
    assert np.array_equal(c.voltages, v0)
    assert len(c.history) == 1


def test_step_descends_a_quadratic(rng):
    c = spgd.SpgdController(voltages=np.array([1.0, -1.0, 0.5, 0.2]), gain=5.0, perturbation=0.1)
    for _ in range(2000):
        spgd.spgd_step(c, lambda v: float(np.sum(v**2)), rng)
    assert np.sum(c.voltages**2) < 1e-6


def test_static_misalignment_is_compensated():
    lp = LinkParams(drift_rate=0.0)
    cs = ChannelState(rotation((0.2, -0.7, 0.4), 2.1))
    assert spgd.wrong_detector_fraction(cs.birefringence, lp) > 0.1
    c = spgd.SpgdController()
    trace = spgd.run_compensation(lp, c, 2000.0, 1.0, np.random.default_rng(4), None, cs)
    assert trace.qber_proxy[-1] - link.pbs_leakage(lp) < 1e-3


def test_drift_is_tracked():
    lp = LinkParams(drift_rate=0.01)
    c = spgd.SpgdController()
    trace = spgd.run_compensation(lp, c, 3000.0, 1.0, np.random.default_rng(2))
    assert np.percentile(trace.qber_proxy[500:], 95) < 0.01


def test_compensation_is_deterministic():
    lp = LinkParams()
    a = spgd.run_compensation(lp, spgd.SpgdController(), 50.0, 1.0, np.random.default_rng(8))
    b = spgd.run_compensation(lp, spgd.SpgdController(), 50.0, 1.0, np.random.default_rng(8))
    assert np.array_equal(a.qber_proxy, b.qber_proxy)
    assert np.array_equal(a.voltages, b.voltages)


def test_trace_csv_round_trip(tmp_path):
    trace = spgd.run_compensation(LinkParams(), spgd.SpgdController(), 20.0, 1.0, np.random.default_rng(1))
    trace.to_csv(tmp_path / "t.csv", ["seed=1"])
    head, rows = read_csv(tmp_path / "t.csv")
    assert head == ["seed=1"]
    assert [float(r["qber_proxy"]) for r in rows] == trace.qber_proxy.tolist()
    assert [float(r["v3"]) for r in rows] == trace.voltages[:, 2].tolist()


def test_bad_timing_rejected(rng):
    with pytest.raises(ContractError):
        spgd.run_compensation(LinkParams(), spgd.SpgdController(), 10.0, 0.0, rng)


def test_default_hyperparameters_solve_toy_problem(rng):
    target = np.array([0.4, -0.3, 1.0, 0.2])
    c = spgd.SpgdController(voltages=np.zeros(4))
    for _ in range(500):
        spgd.spgd_step(c, lambda v: float(np.sum((v - target) ** 2)), rng)
    assert np.linalg.norm(c.voltages - target) < 0.01
