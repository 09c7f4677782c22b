import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipqkd.chip import (
    ChipParams, DriveSettings, decoy_drive, decoy_intensity, dphi2, dphi3, encoder_amplitudes, ep_transfer,
    mzi1_transmission, mzi_pulse_er, output_amplitude_jacobian, output_amplitudes, push_pull,
    transmitter_output,
)
from chipqkd.errors import ContractError
from chipqkd.polarization import H, V, error_rate, fidelity

volts = st.floats(0.0, 8.0, allow_nan=False)
phases = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def chips(draw):
    return ChipParams(
        gc_isolation=draw(st.floats(5.0, 40.0)),
        zeta=draw(phases),
        ep_loss_slope=draw(st.floats(0.0, 0.5)),
        insertion_loss=draw(st.floats(0.0, 5.0)),
    )


@st.composite
def drives(draw):
    return DriveSettings(**{f: draw(volts) for f in DriveSettings.VOLTAGE_FIELDS},
                         phi_tp2=draw(phases), phi_tp3=draw(phases))


def test_full_wave_voltage():
    phase, amp = ep_transfer(6.77, ChipParams())
    assert phase == pytest.approx(2 * math.pi)
    assert amp == pytest.approx(0.8624, abs=1e-4)  # 1.29 dB of loss


def test_isolation_and_delta_are_consistent():
    p = ChipParams(gc_isolation=15.8)
    assert math.sin(p.delta) ** 2 == pytest.approx(10 ** -1.58)
    q = ChipParams(delta=p.delta)
    assert q.gc_isolation == pytest.approx(15.8)
    assert ChipParams().gc_isolation == pytest.approx(15.8)
    assert p.replace(gc_isolation=20).delta < p.delta


@pytest.mark.parametrize("kw", [
    {"delta": math.pi / 4}, {"delta": -0.1}, {"gc_isolation": -1}, {"v_2pi": 0},
    {"ep_loss_slope": -1}, {"delta": 0.1, "gc_isolation": 30},
])
def test_invalid_params_rejected(kw):
    with pytest.raises(ContractError):
        ChipParams(**kw)


def test_voltage_range_enforced():
    with pytest.raises(ContractError):
        output_amplitudes(DriveSettings(v_ep2_plus=9.0), ChipParams())
    with pytest.raises(ContractError):
        ep_transfer(-0.1, ChipParams())


def test_uncalibrated_error_is_isolation_leak():
    # with dphi2 = 0 the encoder drives only the lower path, whose H leak is sin^2 delta
    p = ChipParams(gc_isolation=15.8)
    d = DriveSettings(phi_tp2=0.0)
    assert dphi2(d, p) == 0.0
    assert error_rate(transmitter_output(d, p).state, V) == pytest.approx(0.0263, abs=5e-4)


@given(chips(), drives())
def test_encoder_matches_direct_jones_product(p, d):
    # lossless-encoder reference written straight from the device layout
    t = lambda v: 10 ** (-p.ep_loss_slope * v / 20)
    a2 = math.sqrt((t(d.v_ep2_plus) ** 2 + t(d.v_ep2_minus) ** 2) / 2)
    u, dn = math.sin(dphi2(d, p) / 2), math.cos(dphi2(d, p) / 2)
    a_h = np.exp(1j * dphi3(d, p)) * t(d.v_ep3_plus) * u + np.exp(1j * p.zeta) * t(d.v_ep3_minus) * math.sin(p.delta) * dn
    a_v = t(d.v_ep3_minus) * math.cos(p.delta) * dn
    assert np.allclose(encoder_amplitudes(d, p), a2 * np.array([a_h, a_v]), atol=1e-12)


@given(chips(), drives())
def test_output_power_bounded_by_coupler_overlap(p, d):
    # the coupler sends the two paths to non-orthogonal polarizations, so the
    # bound is (1 + sin delta)^2 rather than 1
    power = np.sum(np.abs(output_amplitudes(d, p)) ** 2)
    assert power <= (1 + math.sin(p.delta)) ** 2 + 1e-12


def test_coupler_is_lossless_when_isolation_is_perfect():
    p = ChipParams(delta=0.0, ep_loss_slope=0.0, mzi_er_floor=math.inf)
    for x in np.linspace(-3, 3, 7):
        power = np.sum(np.abs(output_amplitudes(DriveSettings(phi_tp2=x, phi_tp3=0.3 * x), p)) ** 2)
        assert power == pytest.approx(1.0)


@settings(max_examples=40)
@given(chips(), st.lists(st.floats(0.5, 7.5), min_size=6, max_size=6), phases, phases)
def test_jacobian_matches_finite_differences(p, v, t2, t3):
    d = DriveSettings(**dict(zip(DriveSettings.VOLTAGE_FIELDS, v)), phi_tp2=t2, phi_tp3=t3)
    jac = output_amplitude_jacobian(d, p)
    h = 1e-6
    for i, f in enumerate(DriveSettings.VOLTAGE_FIELDS):
        up = output_amplitudes(d.replace(**{f: v[i] + h}), p)
        dn = output_amplitudes(d.replace(**{f: v[i] - h}), p)
        assert np.allclose(jac[:, i], (up - dn) / (2 * h), atol=1e-6)


def test_static_extinction_floor():
    assert mzi_pulse_er(ChipParams()) == pytest.approx(29.47)
    assert mzi_pulse_er(ChipParams(mzi_er_floor=math.inf)) == math.inf


@pytest.mark.parametrize("ratio", [0.2, 0.5, 0.9, 1.0])
def test_decoy_drive_hits_ratio(ratio):
    p = ChipParams()
    full = mzi1_transmission(DriveSettings(), p)
    assert mzi1_transmission(decoy_drive(ratio, p), p) / full == pytest.approx(ratio, abs=1e-10)


def test_decoy_below_floor_rejected():
    with pytest.raises(ContractError):
        decoy_drive(1e-4, ChipParams())


@given(phases)
def test_push_pull_realizes_phase(x):
    p = ChipParams()
    vp, vm = push_pull(x, p)
    assert min(vp, vm) == 0.0
    got = p.phase_per_volt * (vp - vm)
    assert math.cos(got - x) == pytest.approx(1.0)


def test_mu_cal_scales_intensity():
    p = ChipParams()
    a = transmitter_output(DriveSettings(), p, mu_cal=1.0).intensity
    b = transmitter_output(DriveSettings(), p, mu_cal=0.5).intensity
    assert b == pytest.approx(a / 2)


def test_calibration_scale_at_full_transmission():
    assert decoy_intensity(DriveSettings(), ChipParams(), 0.5) == pytest.approx(0.5)


def test_ideal_splitter_gives_unbiased_state():
    p = ChipParams(delta=0.0, ep_loss_slope=0.0)
    s = transmitter_output(DriveSettings(phi_tp2=math.pi / 2), p).state
    assert fidelity(s, H) == pytest.approx(0.5, abs=1e-15)
