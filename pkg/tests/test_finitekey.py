import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipqkd import finitekey as fk
from chipqkd import protocol
from chipqkd.errors import ConfigError, ContractError
from chipqkd.experiments import read_csv
from chipqkd.protocol import ObservedCounts, ProtocolParams


@pytest.fixture(scope="module")
def expected_150(cal, chip, lp):
    pp = ProtocolParams(block_pulses=500_000_000_000)
    return pp, protocol.expected_statistics(pp, lp, cal, chip)


def with_errors(oc, factor):
    m = np.minimum(oc.m * factor, oc.n)
    return ObservedCounts(oc.n, m, oc.sent, oc.double_clicks, oc.crosstalk_events,
                          oc.single_photon_z, oc.block_pulses, oc.expected)


def test_binary_entropy_values():
    assert fk.binary_entropy(0.5) == 1.0
    assert fk.binary_entropy(0.0) == 0.0 and fk.binary_entropy(1.0) == 0.0
    assert fk.binary_entropy(0.11) == pytest.approx(0.49992, abs=1e-5)
    assert fk.binary_entropy(0.0047) == pytest.approx(0.043110, abs=1e-6)
    with pytest.raises(ContractError):
        fk.binary_entropy(1.5)


@given(st.floats(0.0, 1.0))
def test_binary_entropy_symmetric(p):
    assert fk.binary_entropy(p) == pytest.approx(fk.binary_entropy(1 - p), abs=1e-12)


def test_photon_number_mixture():
    pp = ProtocolParams()
    assert fk.tau_n(0, pp) == pytest.approx(0.7 * math.exp(-0.5) + 0.3 * math.exp(-0.1))
    assert fk.tau_n(0, pp) == pytest.approx(0.6960, abs=1e-4)
    assert sum(fk.tau_n(n, pp) for n in range(40)) == pytest.approx(1.0)


def test_gamma_degenerate_inputs():
    assert fk.gamma(1e-10, 0.0, 1e6, 1e6) == 0.0
    assert fk.gamma(1e-10, 0.1, 0.0, 1e6) == 0.0
    assert fk.gamma(1e-10, 0.1, 1e8, 1e6) > 0.0


def test_gamma_shrinks_with_sample_size():
    a = fk.gamma(1e-10, 0.02, 1e6, 1e5)
    b = fk.gamma(1e-10, 0.02, 1e8, 1e7)
    assert b < a


def test_no_key_at_half_qber(expected_150):
    pp, oc = expected_150
    n = oc.n
    half = ObservedCounts(n, n / 2, oc.sent, block_pulses=oc.block_pulses, expected=True)
    res = fk.secret_length(half, pp)
    assert res.qber_z == pytest.approx(0.5)
    assert res.l == 0


def test_no_key_without_counts(pp):
    empty = ObservedCounts(np.zeros((2, 2)), np.zeros((2, 2)), np.full((4, 2), 1000), block_pulses=8000)
    res = fk.secret_length(empty, pp)
    assert res.l == 0
    assert "qber_undefined" in res.flags


def test_l_monotone_in_qber(expected_150):
    pp, oc = expected_150
    ls = [fk.secret_length(with_errors(oc, f), pp).l for f in (1.0, 1.5, 2.0, 4.0, 8.0, 16.0)]
    assert all(b <= a for a, b in zip(ls, ls[1:]))
    assert ls[0] > ls[-1]


def test_l_monotone_in_eps_sec(expected_150):
    pp, oc = expected_150
    ls = [fk.secret_length(oc, pp, fk.SecurityParams(eps_sec=e)).l for e in (1e-15, 1e-12, 1e-9, 1e-6, 1e-3)]
    assert all(b >= a for a, b in zip(ls, ls[1:]))


def test_l_and_rate_monotone_in_block_size(cal, chip, lp):
    ls, rates = [], []
    for n in (1e9, 1e10, 1e11, 5e11, 2e12):
        pp = ProtocolParams(block_pulses=int(n))
        res = fk.secret_length(protocol.expected_statistics(pp, lp, cal, chip), pp)
        ls.append(res.l)
        rates.append(res.skr_bps)
    assert all(b > a for a, b in zip(ls, ls[1:]))
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_finite_size_is_stricter_than_asymptotic(expected_150):
    pp, oc = expected_150
    fin = fk.secret_length(oc, pp)
    asy = fk.secret_length(oc, pp, finite=False)
    assert fin.l < asy.l
    assert fin.s_z1_l < asy.s_z1_l
    assert fin.phi_z_u > asy.phi_z_u


def test_single_photon_bound_is_sound_and_tight(expected_150):
    pp, oc = expected_150
    res = fk.secret_length(oc, pp, finite=False)
    assert res.s_z1_l <= oc.single_photon_z
    assert res.s_z1_l >= 0.9 * oc.single_photon_z


def test_security_params_validated():
    with pytest.raises(ConfigError):
        fk.SecurityParams(eps_sec=0.0)
    with pytest.raises(ConfigError):
        fk.SecurityParams(f_ec=0.9)


def test_optimizer_does_not_lose_rate(cal, chip, lp):
    start = ProtocolParams(mu1=0.3, mu2=0.05, p_mu1=0.5, pz_alice=0.7, block_pulses=500_000_000_000)
    base = fk.evaluate(start, lp, cal, chip, fk.SecurityParams())
    pp, res = fk.optimize_params(lp, chip, cal, start=start, rounds=1, evals=12)
    assert res.skr_bps >= base.skr_bps
    assert pp.mu2 < pp.mu1


def test_optimizer_respects_pinned_parameters(cal, chip, lp):
    start = ProtocolParams(block_pulses=500_000_000_000)
    pp, _ = fk.optimize_params(lp, chip, cal, space={"pz_alice": (0.8, 0.8)}, start=start, rounds=1, evals=8)
    assert pp.pz_alice == 0.8
    with pytest.raises(ConfigError):
        fk.optimize_params(lp, chip, cal, space={"mu1": (0.1, 0.2), "mu2": (0.3, 0.4)})


def test_curve_csv_round_trip(tmp_path, cal, chip, lp):
    pp = ProtocolParams(block_pulses=500_000_000_000)
    pts = fk.skr_vs_distance([100.0, 150.0], lp, chip, cal, pp, optimize=False)
    fk.write_curve_csv(pts, tmp_path / "c.csv", ["seed=0"])
    head, rows = read_csv(tmp_path / "c.csv")
    assert head == ["seed=0"]
    for row, p in zip(rows, pts):
        assert float(row["skr_bps"]) == p.skr_bps
        assert float(row["qber_z"]) == p.qber_z
        assert int(row["l"]) == p.l
    assert pts[0].skr_bps > pts[1].skr_bps
