"""Forward model of the silicon transmitter chip.

Optical path: laser -> MZI-1 (decoy intensity) -> VOA (thermal attenuator)
-> MZI-2 (path splitter) -> EP3+/EP3- arms of MZI-3 -> 2D grating coupler.

The polarization amplitudes after the grating coupler are::

    a_H = exp(i dphi3) t3p u + exp(i zeta) t3m sin(delta) d
    a_V = t3m cos(delta) d

with ``u = sin(dphi2/2)``, ``d = cos(dphi2/2)`` for an ideal MZI-2.  Note the
convention: |H> is produced at ``dphi2 = pi`` (only the upper arm lit), the nearly
vertical state near ``dphi2 = 0``.

Each electro-optic phase shifter (EP) at voltage v contributes phase
``2 pi v / v_2pi`` and field amplitude ``10**(-ep_loss_slope * v / 20)``.  Push-pull
MZIs see the differential phase of their two arms plus a thermal (TP) bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import ContractError
from .polarization import PolarizationState


def _db_to_power(db: float) -> float:
    return 0.0 if math.isinf(db) else 10.0 ** (-db / 10.0)


def _wrap(phase: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(phase, 2 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class ChipParams:
    """Static device constants.

    Give either ``delta`` or ``gc_isolation`` (dB); the other is derived through
    ``sin(delta)**2 = 10**(-gc_isolation/10)``.  With neither, the 15.8 dB
    isolation of the reference device is used.

    ``mzi_er_floor`` is the extinction floor of the intensity MZIs (MZI-1 and the
    VOA).  ``encoder_er_floor`` is the floor of the polarization-encoding MZI-2;
    it defaults to infinity (ideal path purity) and can be lowered to study the
    QBER sensitivity to encoder extinction.
    """

    delta: float | None = None
    zeta: float = 0.0
    v_2pi: float = 6.77
    ep_loss_slope: float = 0.19
    mzi_er_floor: float = 29.47
    encoder_er_floor: float = math.inf
    gc_isolation: float | None = None
    insertion_loss: float = 0.0
    v_max: float = 8.0

    def __post_init__(self):
        delta, iso = self.delta, self.gc_isolation
        if delta is None and iso is None:
            iso = 15.8
        if delta is None:
            if iso < 0:
                raise ContractError("gc_isolation must be >= 0 dB")
            delta = math.asin(math.sqrt(_db_to_power(iso)))
        elif iso is None:
            s2 = math.sin(delta) ** 2
            iso = math.inf if s2 == 0 else -10 * math.log10(s2)
        else:
            if abs(math.sin(delta) ** 2 - _db_to_power(iso)) > 1e-12:
                raise ContractError("delta and gc_isolation are inconsistent")
        if not 0 <= delta < math.pi / 4:
            raise ContractError(f"delta must lie in [0, pi/4), got {delta}")
        if self.v_2pi <= 0:
            raise ContractError("v_2pi must be positive")
        for name in ("ep_loss_slope", "mzi_er_floor", "encoder_er_floor", "insertion_loss"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0 dB")
        if self.v_max <= 0:
            raise ContractError("v_max must be positive")
        object.__setattr__(self, "delta", float(delta))
        object.__setattr__(self, "gc_isolation", float(iso))
        object.__setattr__(self, "zeta", _wrap(float(self.zeta)))

    @property
    def phase_per_volt(self) -> float:
        return 2 * math.pi / self.v_2pi

    @property
    def loss_per_volt(self) -> float:
        """Field-amplitude attenuation rate beta: t(v) = exp(-beta v)."""
        return self.ep_loss_slope * math.log(10) / 20

    def replace(self, **kw) -> "ChipParams":
        if "gc_isolation" in kw and "delta" not in kw:
            kw["delta"] = None
        elif "delta" in kw and "gc_isolation" not in kw:
            kw["gc_isolation"] = None
        return replace(self, **kw)


@dataclass(frozen=True)
class DriveSettings:
    """Per-pulse modulator drive: EP voltages (V) and thermal phases (rad).

    Defaults bias MZI-1 and the VOA at full transmission and leave the
    polarization encoder undriven.
    """

    v_ep1_plus: float = 0.0
    v_ep1_minus: float = 0.0
    v_ep2_plus: float = 0.0
    v_ep2_minus: float = 0.0
    v_ep3_plus: float = 0.0
    v_ep3_minus: float = 0.0
    phi_tp1: float = math.pi
    phi_tp2: float = 0.0
    phi_tp3: float = 0.0
    phi_tp_voa: float = math.pi

    VOLTAGE_FIELDS = ("v_ep1_plus", "v_ep1_minus", "v_ep2_plus", "v_ep2_minus", "v_ep3_plus", "v_ep3_minus")

    def replace(self, **kw) -> "DriveSettings":
        return replace(self, **kw)

    def voltages(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.VOLTAGE_FIELDS])

    def check(self, p: ChipParams) -> None:
        for f in self.VOLTAGE_FIELDS:
            v = getattr(self, f)
            if not 0.0 <= v <= p.v_max:
                raise ContractError(f"{f} = {v:.4g} V outside [0, {p.v_max}] V")


@dataclass(frozen=True)
class TransmitterOutput:
    state: PolarizationState
    intensity: float
    amplitudes: np.ndarray = field(repr=False, compare=False, default=None)


def ep_transfer(v: float, p: ChipParams) -> tuple[float, float]:
    """(phase, field amplitude) of one electro-optic phase shifter at voltage ``v``."""
    if not 0.0 <= v <= p.v_max:
        raise ContractError(f"EP voltage {v} V outside [0, {p.v_max}] V")
    return p.phase_per_volt * v, 10.0 ** (-p.ep_loss_slope * v / 20.0)


def _arm(v: float, p: ChipParams) -> complex:
    ph, t = ep_transfer(v, p)
    return t * np.exp(1j * ph)


def _intensity_mzi(x: complex, y: complex, floor_db: float) -> float:
    """Output power of an intensity MZI with arm fields x, y (unit input).

    The finite extinction leaks a fraction of the complementary port's power.
    """
    f = _db_to_power(floor_db)
    return (abs(x - y) ** 2 + f * abs(x + y) ** 2) / 4.0


def mzi1_transmission(d: DriveSettings, p: ChipParams) -> float:
    x = _arm(d.v_ep1_plus, p) * np.exp(1j * d.phi_tp1)
    y = _arm(d.v_ep1_minus, p)
    return _intensity_mzi(x, y, p.mzi_er_floor)


def voa_transmission(d: DriveSettings, p: ChipParams) -> float:
    return _intensity_mzi(np.exp(1j * d.phi_tp_voa), 1.0, p.mzi_er_floor)


def dphi2(d: DriveSettings, p: ChipParams) -> float:
    return p.phase_per_volt * (d.v_ep2_plus - d.v_ep2_minus) + d.phi_tp2


def dphi3(d: DriveSettings, p: ChipParams) -> float:
    return p.phase_per_volt * (d.v_ep3_plus - d.v_ep3_minus) + d.phi_tp3


def _encoder_split(dp2: float, p: ChipParams) -> tuple[complex, complex]:
    """(upper, lower) MZI-2 output fields; leakage enters in phase quadrature."""
    f = _db_to_power(p.encoder_er_floor)
    s, c = math.sin(dp2 / 2), math.cos(dp2 / 2)
    a, b = math.sqrt(1 - f), math.sqrt(f)
    return a * s + 1j * b * c, a * c + 1j * b * s


def encoder_amplitudes(d: DriveSettings, p: ChipParams) -> np.ndarray:
    """(a_H, a_V) after the grating coupler for unit power entering MZI-2.

    Includes MZI-2's arm-averaged EP loss and the MZI-3 arm transmissions.
    """
    _, t2p = ep_transfer(d.v_ep2_plus, p)
    _, t2m = ep_transfer(d.v_ep2_minus, p)
    _, t3p = ep_transfer(d.v_ep3_plus, p)
    _, t3m = ep_transfer(d.v_ep3_minus, p)
    a2 = math.sqrt((t2p**2 + t2m**2) / 2)
    u, dn = _encoder_split(dphi2(d, p), p)
    sd, cd = math.sin(p.delta), math.cos(p.delta)
    a_h = np.exp(1j * dphi3(d, p)) * t3p * u + np.exp(1j * p.zeta) * t3m * sd * dn
    a_v = t3m * cd * dn
    return a2 * np.array([a_h, a_v], dtype=complex)


def _amplitude_scale(d: DriveSettings, p: ChipParams) -> float:
    return math.sqrt(mzi1_transmission(d, p) * voa_transmission(d, p) * _db_to_power(p.insertion_loss))


def output_amplitudes(d: DriveSettings, p: ChipParams) -> np.ndarray:
    """Un-normalized Jones vector leaving the chip (unit laser power in)."""
    d.check(p)
    return _amplitude_scale(d, p) * encoder_amplitudes(d, p)


def transmitter_output(d: DriveSettings, p: ChipParams, mu_cal: float = 1.0) -> TransmitterOutput:
    """Polarization state and mean photon number for one drive setting.

    ``mu_cal`` maps unit relative power to a mean photon number.
    """
    amps = output_amplitudes(d, p)
    power = float(np.sum(np.abs(amps) ** 2))
    if power == 0:
        raise ContractError("drive setting extinguishes the output completely")
    return TransmitterOutput(PolarizationState.from_array(amps), mu_cal * power, amps)


def output_amplitude_jacobian(d: DriveSettings, p: ChipParams) -> np.ndarray:
    """d(output_amplitudes)/d(voltage) for the six EP voltages, shape (2, 6).

    Column order follows ``DriveSettings.VOLTAGE_FIELDS``.
    """
    d.check(p)
    k, beta = p.phase_per_volt, p.loss_per_volt
    g = -beta + 1j * k  # d/dv of an arm field, divided by the field

    # MZI-1 power and its derivatives
    f1 = _db_to_power(p.mzi_er_floor)
    x = _arm(d.v_ep1_plus, p) * np.exp(1j * d.phi_tp1)
    y = _arm(d.v_ep1_minus, p)
    p1 = _intensity_mzi(x, y, p.mzi_er_floor)
    dp1_dx = lambda dx: (2 * np.real(np.conj(x - y) * dx) + 2 * f1 * np.real(np.conj(x + y) * dx)) / 4
    dp1_dy = lambda dy: (2 * np.real(np.conj(x - y) * -dy) + 2 * f1 * np.real(np.conj(x + y) * dy)) / 4
    dP1 = np.array([dp1_dx(g * x), dp1_dy(g * y)])

    rest = voa_transmission(d, p) * _db_to_power(p.insertion_loss)
    scale = math.sqrt(p1 * rest)
    dscale_v1 = 0.5 * math.sqrt(rest / p1) * dP1 if p1 > 0 else np.zeros(2)

    enc = encoder_amplitudes(d, p)

    # MZI-2: common loss factor and split fields
    _, t2p = ep_transfer(d.v_ep2_plus, p)
    _, t2m = ep_transfer(d.v_ep2_minus, p)
    a2 = math.sqrt((t2p**2 + t2m**2) / 2)
    da2 = np.array([-beta * t2p**2 / (2 * a2), -beta * t2m**2 / (2 * a2)])
    fe = _db_to_power(p.encoder_er_floor)
    dp2 = dphi2(d, p)
    s, c = math.sin(dp2 / 2), math.cos(dp2 / 2)
    ra, rb = math.sqrt(1 - fe), math.sqrt(fe)
    u, dn = ra * s + 1j * rb * c, ra * c + 1j * rb * s
    du = 0.5 * (ra * c - 1j * rb * s)  # d u / d dphi2
    ddn = 0.5 * (-ra * s + 1j * rb * c)

    _, t3p = ep_transfer(d.v_ep3_plus, p)
    _, t3m = ep_transfer(d.v_ep3_minus, p)
    e3 = np.exp(1j * dphi3(d, p))
    sd, cd = math.sin(p.delta), math.cos(p.delta)
    ez = np.exp(1j * p.zeta)
    term_u = e3 * t3p * u
    term_d = ez * t3m * sd * dn

    jac = np.zeros((2, 6), dtype=complex)
    # EP1 voltages only rescale
    jac[:, 0] = dscale_v1[0] * enc
    jac[:, 1] = dscale_v1[1] * enc
    # EP2: loss factor a2 plus the split angle
    for col, sign in ((2, +1), (3, -1)):
        d_split = np.array([e3 * t3p * du + ez * t3m * sd * ddn, t3m * cd * ddn]) * (sign * k)
        jac[:, col] = scale * (da2[col - 2] / a2 * enc + a2 * d_split)
    # EP3: phase of the upper arm, losses of both arms
    jac[:, 4] = scale * a2 * np.array([g * term_u, 0.0])
    jac[:, 5] = scale * a2 * np.array([-1j * k * term_u - beta * term_d, -beta * t3m * cd * dn])
    return jac


def decoy_intensity(d: DriveSettings, p: ChipParams, mu_cal: float) -> float:
    """Mean photon number set by MZI-1 and the VOA for calibration scale ``mu_cal``."""
    if mu_cal <= 0:
        raise ContractError("mu_cal must be positive")
    d.check(p)
    return mu_cal * mzi1_transmission(d, p) * voa_transmission(d, p)


def decoy_drive(ratio: float, p: ChipParams, base: DriveSettings | None = None) -> DriveSettings:
    """Drive MZI-1's lower EP so its transmission is ``ratio`` times full transmission."""
    base = base or DriveSettings()
    base = base.replace(v_ep1_plus=0.0, v_ep1_minus=0.0)
    full = mzi1_transmission(base, p)
    if not 0 < ratio <= 1:
        raise ContractError("intensity ratio must lie in (0, 1]")
    if ratio == 1:
        return base
    v_hi = min(p.v_max, p.v_2pi / 2)

    def resid(v):
        return mzi1_transmission(base.replace(v_ep1_minus=v), p) / full - ratio

    if resid(v_hi) > 0:
        raise ContractError(f"ratio {ratio} below MZI-1 extinction floor")
    return base.replace(v_ep1_minus=brentq(resid, 0.0, v_hi, xtol=1e-14))


def mzi_pulse_er(p: ChipParams, on: DriveSettings | None = None, off: DriveSettings | None = None) -> float:
    """Extinction ratio (dB) between an 'on' and an 'off' MZI-1 drive.

    The defaults bias MZI-1 thermally at full transmission and full extinction,
    which reproduces the static floor ``p.mzi_er_floor`` (inf if unbounded).
    """
    on = on or DriveSettings(phi_tp1=math.pi)
    off = off or DriveSettings(phi_tp1=0.0)
    t_on, t_off = mzi1_transmission(on, p), mzi1_transmission(off, p)
    if t_off == 0:
        return math.inf
    return 10 * math.log10(t_on / t_off)


def push_pull(dphi: float, p: ChipParams, bias: tuple[float, float] = (0.0, 0.0)) -> tuple[float, float]:
    """EP voltages realising differential phase ``dphi`` on top of ``bias``.

    The phase is wrapped to (-pi, pi] and applied to one arm only, so both
    voltages stay non-negative.
    """
    x = _wrap(dphi)
    vp, vm = bias
    if x >= 0:
        vp += x / p.phase_per_volt
    else:
        vm += -x / p.phase_per_volt
    if max(vp, vm) > p.v_max + 1e-12:
        raise ContractError(f"push-pull drive for {dphi:.4f} rad exceeds v_max")
    return min(vp, p.v_max), min(vm, p.v_max)
