"""Quantum channel and receiver physics.

Receiver layout: a fiber beam splitter sends light to the Z analyzer with
probability ``basis_split``; each analyzer is a polarizing beam splitter with
finite extinction followed by two single-photon detectors.  Channel indices::

    0: Z, H    1: Z, V    2: X, +    3: X, -

Detector timing jitter spreads a click over neighbouring 200 ps time bins.  The
detector response is a Gaussian core with symmetric exponential tails, convolved
with the laser pulse and laser jitter (both Gaussian).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import ConfigError, ContractError
from .polarization import PolarizationState, PolTransform, reorthonormalize, rotation_matrix

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
N_CHANNELS = 4
CHANNEL_NAMES = ("Z_H", "Z_V", "X_plus", "X_minus")


@dataclass(frozen=True)
class DetectorParams:
    eff_curve: tuple = ((125e3, 0.70), (4e6, 0.64))
    dark_rate_hz: float = 100.0
    jitter_fwhm_ps: float = 50.0
    jitter_fw1pm_ps: float = 171.0
    laser_fwhm_ps: float = 26.0
    laser_jitter_rms_ps: float = 6.0

    def __post_init__(self):
        curve = tuple((float(r), float(e)) for r, e in self.eff_curve)
        if not curve:
            raise ConfigError("eff_curve needs at least one point")
        rates = [r for r, _ in curve]
        effs = [e for _, e in curve]
        if any(r <= 0 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError("eff_curve rates must be positive and strictly increasing")
        if any(not 0 < e <= 1 for e in effs):
            raise ConfigError("efficiencies must lie in (0, 1]")
        if any(b > a for a, b in zip(effs, effs[1:])):
            raise ConfigError("eff_curve must be non-increasing in rate")
        if self.dark_rate_hz < 0:
            raise ConfigError("dark_rate_hz must be >= 0")
        if self.jitter_fwhm_ps <= 0 or self.laser_fwhm_ps < 0 or self.laser_jitter_rms_ps < 0:
            raise ConfigError("timing widths must be non-negative (detector FWHM positive)")
        if self.jitter_fw1pm_ps < self.jitter_fwhm_ps:
            raise ConfigError("jitter_fw1pm_ps must be >= jitter_fwhm_ps")
        object.__setattr__(self, "eff_curve", curve)


@dataclass(frozen=True)
class LinkParams:
    length_km: float = 150.0
    atten_db_per_km: float = 0.18
    drift_rate: float = 0.01
    basis_split: float = 0.9
    pbs_er_db: float = 30.0
    bob_loss_db: float = 2.0
    detector: DetectorParams = field(default_factory=DetectorParams)
    rep_rate_hz: float = 5e9

    def __post_init__(self):
        for name in ("length_km", "atten_db_per_km", "drift_rate", "pbs_er_db", "bob_loss_db"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.basis_split < 1:
            raise ConfigError("basis_split must lie in (0, 1)")
        if self.rep_rate_hz <= 0:
            raise ConfigError("rep_rate_hz must be positive")

    @property
    def bin_period_ps(self) -> float:
        return 1e12 / self.rep_rate_hz

    def replace(self, **kw) -> "LinkParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class ChannelState:
    birefringence: PolTransform = field(default_factory=PolTransform.identity)
    elapsed_s: float = 0.0

    def __post_init__(self):
        if not self.birefringence.unitary:
            raise ContractError("channel birefringence must be unitary")


def channel_transmittance(lp: LinkParams) -> float:
    return 10.0 ** (-lp.atten_db_per_km * lp.length_km / 10.0)


def drift_step(cs: ChannelState, dt_s: float, rng, drift_rate: float) -> ChannelState:
    """Advance the birefringence by one isotropic random-walk step."""
    if dt_s <= 0:
        raise ContractError("dt_s must be positive")
    if drift_rate == 0:
        return ChannelState(cs.birefringence, cs.elapsed_s + dt_s)
    axis = rng.normal(size=3)
    angle = rng.normal(0.0, drift_rate * math.sqrt(dt_s))
    m = rotation_matrix(axis, angle) @ cs.birefringence.matrix
    return ChannelState(PolTransform(reorthonormalize(m), unitary=True), cs.elapsed_s + dt_s)


def detector_efficiency(rate_hz, dp: DetectorParams):
    """Efficiency at a given count rate: log-linear interpolation, clamped at the ends."""
    rate = np.asarray(rate_hz, dtype=float)
    if np.any(rate < 0):
        raise ContractError("count rate must be >= 0")
    rates = np.log([r for r, _ in dp.eff_curve])
    effs = np.array([e for _, e in dp.eff_curve])
    with np.errstate(divide="ignore"):
        out = np.interp(np.log(rate), rates, effs)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Timing response


@dataclass(frozen=True)
class JitterModel:
    """Detector response (1-w) N(0, sigma_core) + w Laplace(tau), broadened by N(0, sigma_extra)."""

    sigma_core: float
    tau: float
    weight: float
    sigma_extra: float

    @property
    def sigma_gauss(self) -> float:
        return math.hypot(self.sigma_core, self.sigma_extra)

    def survival(self, a):
        """P(T > a) for the total timing offset T, a >= 0."""
        a = np.asarray(a, dtype=float)
        out = (1 - self.weight) * ndtr(-a / self.sigma_gauss)
        if self.weight > 0:
            s = self.sigma_extra
            if s == 0:
                tail = 0.5 * np.exp(-a / self.tau)
            else:
                tail = 0.5 * (_gauss_plus_exp(a, s, self.tau) + _gauss_minus_exp(a, s, self.tau))
            out = out + self.weight * tail
        return out

    def density(self, t):
        """Detector-only response density (no laser broadening)."""
        t = np.asarray(t, dtype=float)
        s = self.sigma_core
        g = np.exp(-0.5 * (t / s) ** 2) / (s * math.sqrt(2 * math.pi))
        lap = np.exp(-np.abs(t) / self.tau) / (2 * self.tau)
        return (1 - self.weight) * g + self.weight * lap


def _gauss_plus_exp(a, s, tau):
    # P(G + E > a), G ~ N(0, s^2), E ~ Exp(mean tau)
    x = -a / tau + 0.5 * (s / tau) ** 2
    return ndtr(-a / s) + np.exp(x + log_ndtr(a / s - s / tau))


def _gauss_minus_exp(a, s, tau):
    # P(G - E > a)
    x = a / tau + 0.5 * (s / tau) ** 2
    return ndtr(-a / s) - np.exp(x + log_ndtr(-(a / s + s / tau)))


def jitter_tail_fit(dp: DetectorParams, tails: bool = True, include_laser: bool = True) -> JitterModel:
    """Fit the tail weight so the response's full width at 1% maximum is ``jitter_fw1pm_ps``.

    The exponential scale is tied to the core, ``tau = (fwhm/2)/ln 2``, so both
    components are at half maximum at +-fwhm/2 and the mixture keeps the
    published FWHM exactly.  The 1%-maximum condition is then linear in the weight.
    """
    s = dp.jitter_fwhm_ps * FWHM_TO_SIGMA
    tau = dp.jitter_fwhm_ps / 2 / math.log(2)
    extra = math.hypot(dp.laser_fwhm_ps * FWHM_TO_SIGMA, dp.laser_jitter_rms_ps) if include_laser else 0.0
    if not tails:
        return JitterModel(s, tau, 0.0, extra)
    h = dp.jitter_fw1pm_ps / 2
    g0 = 1 / (s * math.sqrt(2 * math.pi))
    gh = g0 * math.exp(-0.5 * (h / s) ** 2)
    l0 = 1 / (2 * tau)
    lh = l0 * math.exp(-h / tau)
    # (1-w) gh + w lh = 0.01 ((1-w) g0 + w l0)
    w = (0.01 * g0 - gh) / ((lh - gh) - 0.01 * (l0 - g0))
    if not 0 <= w < 1:
        raise ConfigError(
            f"jitter tail fit infeasible (weight {w:.3g}) for FWHM {dp.jitter_fwhm_ps} ps, "
            f"FW1%M {dp.jitter_fw1pm_ps} ps"
        )
    return JitterModel(s, tau, float(w), extra)


def timing_crosstalk(dp: DetectorParams, bin_period_ps: float = 200.0, tails: bool = True,
                     include_laser: bool = True) -> tuple[float, float]:
    """Probability a click lands in an adjacent bin, and two or more bins away.

    Both values count both sides.
    """
    if bin_period_ps <= 0:
        raise ContractError("bin_period_ps must be positive")
    jm = jitter_tail_fit(dp, tails, include_laser)
    s_half = float(jm.survival(bin_period_ps / 2))
    s_far = float(jm.survival(1.5 * bin_period_ps))
    return 2 * (s_half - s_far), 2 * s_far


# ---------------------------------------------------------------------------
# Polarization analysis and clicks


def pbs_leakage(lp: LinkParams) -> float:
    """Probability a photon exits the wrong PBS port."""
    l = 10.0 ** (-lp.pbs_er_db / 10.0)
    return l / (1 + l)


def alignment_transform(chi: float) -> PolTransform:
    """Maps Alice's X states (|H> +- e^{i chi}|V>)/sqrt(2) onto Bob's |+->."""
    return PolTransform(np.diag([1.0, np.exp(-1j * chi)]), unitary=True)


def projection_probs(s: PolarizationState, lp: LinkParams) -> np.ndarray:
    """Probability that a photon in state ``s`` (at Bob's analyzers) reaches each detector."""
    h, v = s.h_amp, s.v_amp
    p_h, p_v = abs(h) ** 2, abs(v) ** 2
    p_p = abs(h + v) ** 2 / 2
    p_m = abs(h - v) ** 2 / 2
    eps = pbs_leakage(lp)
    z, x = lp.basis_split, 1 - lp.basis_split
    return np.array([
        z * ((1 - eps) * p_h + eps * p_v),
        z * ((1 - eps) * p_v + eps * p_h),
        x * ((1 - eps) * p_p + eps * p_m),
        x * ((1 - eps) * p_m + eps * p_p),
    ])


def propagate(s: PolarizationState, cs: ChannelState, epc: PolTransform) -> PolarizationState:
    return epc.apply(cs.birefringence.apply(s))


def channel_efficiency(lp: LinkParams, eta_det) -> np.ndarray:
    """Per-channel photon detection probability excluding polarization projection."""
    eta = np.broadcast_to(np.asarray(eta_det, dtype=float), (N_CHANNELS,))
    return channel_transmittance(lp) * 10.0 ** (-lp.bob_loss_db / 10.0) * eta


def dark_prob(lp: LinkParams) -> float:
    return -math.expm1(-lp.detector.dark_rate_hz / lp.rep_rate_hz)


def receiver_click_probs(
    s: PolarizationState,
    cs: ChannelState,
    epc: PolTransform,
    lp: LinkParams,
    mu: float,
    eta_det=None,
    crosstalk: tuple[float, float] | None = None,
    neighbour_photons=None,
) -> np.ndarray:
    """Per-channel click probability in one time bin.

    Own photons are detected with mean ``mu * eta_c * proj_c`` and stay in the bin
    with probability ``1 - p_adj - p_beyond``.  Photons displaced from the
    neighbouring bins add a background computed from ``neighbour_photons`` (mean
    detected photons per channel in a neighbouring pulse); by default the
    neighbours are taken to be copies of this pulse.  ``eta_det`` defaults to
    the efficiency at the resulting steady-state count rate.
    """
    if mu < 0:
        raise ContractError("mu must be >= 0")
    proj = projection_probs(propagate(s, cs, epc), lp)
    p_adj, p_far = crosstalk if crosstalk is not None else timing_crosstalk(lp.detector, lp.bin_period_ps)
    d = dark_prob(lp)

    def clicks(eta):
        mean = mu * channel_efficiency(lp, eta) * proj
        nb = mean if neighbour_photons is None else np.asarray(neighbour_photons, dtype=float)
        own = -np.expm1(-mean * (1 - p_adj - p_far))
        no_bg = (1 - d) * np.exp(-nb * (p_adj + p_far))
        return 1 - (1 - own) * no_bg

    if eta_det is not None:
        return clicks(eta_det)
    eta = np.full(N_CHANNELS, detector_efficiency(0.0, lp.detector))
    for _ in range(50):
        new = detector_efficiency(clicks(eta) * lp.rep_rate_hz, lp.detector)
        if np.max(np.abs(new - eta)) < 1e-13:
            eta = new
            break
        eta = new
    return clicks(eta)
