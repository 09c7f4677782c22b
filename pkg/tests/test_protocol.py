import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chipqkd import link, protocol
from chipqkd.errors import ConfigError, ContractError, UndefinedQBERError
from chipqkd.link import DetectorParams, LinkParams
from chipqkd.protocol import ObservedCounts, ProtocolParams

# sharp timing, flat efficiency and no darks: the only physics left is Poisson
# detection plus uniform resolution of multi-clicks
QUIET = DetectorParams(eff_curve=((1e5, 0.7),), dark_rate_hz=0.0, jitter_fwhm_ps=5.0,
                       jitter_fw1pm_ps=17.1, laser_fwhm_ps=0.0, laser_jitter_rms_ps=0.0)


def sifted_fraction_oracle(means, target):
    """E[1{target clicks} / (number of clicked detectors)] for independent Poisson detectors."""
    p = [1 - math.exp(-m) for m in means]
    total = 0.0
    for pattern in itertools.product((0, 1), repeat=len(p)):
        if not pattern[target]:
            continue
        prob = math.prod(pi if c else 1 - pi for pi, c in zip(p, pattern))
        total += prob / sum(pattern)
    return total


@pytest.mark.parametrize("kw", [{"mu2": 0.6}, {"p_mu1": 1.0}, {"pz_alice": 0.0}, {"block_pulses": 0}])
def test_invalid_protocol_params(kw):
    with pytest.raises(ConfigError):
        ProtocolParams(**kw)


def test_counts_invariants():
    with pytest.raises(ContractError):
        ObservedCounts([[5, 5], [5, 5]], [[6, 0], [0, 0]], np.full((4, 2), 10))
    with pytest.raises(ContractError):
        ObservedCounts([[50, 5], [5, 5]], np.zeros((2, 2)), np.full((4, 2), 10))


def test_undefined_qber():
    oc = ObservedCounts(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((4, 2)))
    with pytest.raises(UndefinedQBERError):
        protocol.qber(oc)


@pytest.mark.parametrize("expected", [False, True])
def test_counts_csv_round_trip(tmp_path, expected):
    n = np.array([[100, 20], [10, 3]]) + (0.25 if expected else 0)
    m = np.array([[2, 1], [0, 1]]) + (0.125 if expected else 0)
    oc = ObservedCounts(n, m, np.full((4, 2), 1000), 3, 4, 50, 8000, expected)
    oc.to_csv(tmp_path / "c.csv")
    back = ObservedCounts.from_csv(tmp_path / "c.csv")
    assert back.tallies() == oc.tallies()
    assert back.expected == expected and back.block_pulses == 8000


def test_expected_counts_match_enumeration_oracle(cal, chip):
    lp = LinkParams(length_km=20.0, detector=QUIET, pbs_er_db=60.0)
    pp = ProtocolParams(mu1=0.8, mu2=0.2, block_pulses=1_000_000)
    rm = protocol.build_receiver_model(pp, lp, cal, chip)
    assert rm.p_adj < 1e-12 and rm.p_dark == 0.0
    oc = protocol.expected_statistics(pp, lp, cal, chip, rm=rm)
    lam = rm.lam
    for b in range(2):
        for k in range(2):
            ref = 0.0
            for bit in range(2):
                s = 2 * b + bit
                for c in (2 * b, 2 * b + 1):
                    ref += rm.weights[s, k] * sifted_fraction_oracle(lam[s, k], c)
            assert oc.n[b, k] == pytest.approx(ref * pp.block_pulses, rel=1e-10)


def test_expected_sent_and_intensity_split(cal, chip, lp, pp):
    oc = protocol.expected_statistics(pp, lp, cal, chip)
    assert oc.sent.sum() == pytest.approx(pp.block_pulses)
    assert oc.sent[:, 0].sum() / pp.block_pulses == pytest.approx(pp.p_mu1)
    assert oc.sent[:2].sum() / pp.block_pulses == pytest.approx(pp.pz_alice)
    assert 0 < oc.single_photon_z < oc.n_z
    q_z, q_x = protocol.qber(oc)
    assert 0.003 < q_z < 0.007


def test_default_qber_regression(cal, chip, lp, pp):
    q_z, _ = protocol.qber(protocol.expected_statistics(pp, lp, cal, chip))
    assert q_z == pytest.approx(5.60e-3, rel=5e-3)


def test_vacuum_yield_is_darks_only(cal, chip, lp, pp):
    rm = protocol.build_receiver_model(pp, lp, cal, chip)
    y0 = protocol.photon_yields(rm, 0)
    d = rm.p_dark
    # no photons from this pulse: only darks or photons displaced from neighbours
    assert np.all(y0.sum(axis=1) >= 1 - (1 - d) ** 4 - 1e-18)
    assert np.allclose(y0, y0[0])


def test_photon_yields_increase_with_photon_number(cal, chip, lp, pp):
    rm = protocol.build_receiver_model(pp, lp, cal, chip)
    totals = [protocol.photon_yields(rm, n).sum() for n in range(4)]
    assert all(b > a for a, b in zip(totals, totals[1:]))


def test_monte_carlo_matches_expectation_at_short_range(cal, chip):
    lp = LinkParams(length_km=10.0, detector=DetectorParams(dark_rate_hz=1e5))
    pp = ProtocolParams(block_pulses=300_000)
    rm = protocol.build_receiver_model(pp, lp, cal, chip)
    exp = protocol.expected_statistics(pp, lp, cal, chip, rm=rm).tallies()
    obs = protocol.simulate_block(pp, lp, cal, chip, protocol.make_rng(5), rm=rm).tallies()
    for key, e in exp.items():
        if key.startswith("sent"):
            continue
        assert abs(obs[key] - e) <= 5 * math.sqrt(max(e, 1.0)), key


def test_simulation_is_deterministic(cal, chip, lp):
    pp = ProtocolParams(block_pulses=50_000)
    a = protocol.simulate_block(pp, lp.replace(length_km=5.0), cal, chip, protocol.make_rng(9))
    b = protocol.simulate_block(pp, lp.replace(length_km=5.0), cal, chip, protocol.make_rng(9))
    assert a.tallies() == b.tallies()


def test_generator_spawns_independent_streams():
    parent = protocol.make_rng(1)
    x, y = parent.spawn(2)
    assert x.random() != y.random()


@given(st.integers(0, 2**31))
def test_sampled_counts_respect_invariants(seed):
    exp = ObservedCounts(np.array([[1e4, 2e3], [1e3, 2e2]]), np.array([[50.0, 9.0], [7.0, 2.0]]),
                         np.full((4, 2), 1e6), 10.0, 5.0, 4e3, 8_000_000, True)
    oc = protocol.sample_statistics(exp, protocol.make_rng(seed))
    assert not oc.expected
    assert np.all(oc.m <= oc.n)
    assert oc.single_photon_z <= oc.n_z
