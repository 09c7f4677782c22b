"""Iterative state-preparation calibration for the dual-MZI encoder.

The Z basis is calibrated by alternating 1-D minimizations of the error rate of
the vertical state over the MZI-2 phase (driven by EP2) and the MZI-3 phase
(driven by the thermal shifter TP3).  Each coordinate function is a ratio of
sinusoids in its phase, hence unimodal over a period: a four-point scan at
quarter-period spacing always brackets the minimum inside a half-period window,
where the function is monotone on either side of it.  Golden-section search then
closes in on the minimum.

With the thermal phases frozen, the X basis is found the same way on the fast
EP2/EP3 phases.  The relative phase chi of the X states is free; by default it is
chosen as ``pi/2 - zeta``, which makes |+> and |-> need the same MZI-2 split and
therefore the same output power.

Finally each state's MZI-3 arms get a common-mode bias so that all four states
leave the chip with (nearly) the same intensity.  A common-mode bias scales both
arms identically and so leaves the polarization untouched.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import chip as chipmod
from .chip import ChipParams, DriveSettings, push_pull, transmitter_output
from .errors import CalibrationError, ContractError
from .polarization import PolarizationState, StokesVector, V, error_rate, fidelity, to_stokes, x_state

GOLDEN = (3 - math.sqrt(5)) / 2
STATE_NAMES = ("H", "V", "plus", "minus")
POLISH_BRACKET = 0.1  # rad; widest local bracket used once below target

Measure = Callable[[DriveSettings, PolarizationState], float]


def model_measure(p: ChipParams, noise_sigma: float = 0.0, rng=None, n_avg: int = 1) -> Measure:
    """Error-rate probe backed by the chip forward model.

    Each call returns ``error_rate(output, target)`` plus Gaussian noise of
    standard deviation ``noise_sigma`` per sample, averaged over ``n_avg`` samples.
    """
    if noise_sigma > 0 and rng is None:
        raise ContractError("a noisy measure needs an explicit rng")

    def measure(d: DriveSettings, target: PolarizationState) -> float:
        r = error_rate(transmitter_output(d, p).state, target)
        if noise_sigma > 0:
            r += float(np.mean(rng.normal(0.0, noise_sigma, size=n_avg)))
        return r

    return measure


# ---------------------------------------------------------------------------
# 1-D search


def golden_section(f, a, b, c, fb, max_evals, tol=1e-12):
    """Minimize ``f`` given a bracket a < b < c with f(b) <= f(a), f(c).

    Returns (x, f(x), evaluations used).
    """
    n = 0
    while n < max_evals and c - a > tol:
        if c - b > b - a:
            x = b + GOLDEN * (c - b)
        else:
            x = b - GOLDEN * (b - a)
        fx = f(x)
        n += 1
        if fx < fb:
            if x > b:
                a = b
            else:
                c = b
            b, fb = x, fx
        else:
            if x > b:
                c = x
            else:
                a = x
    return b, fb, n


def periodic_line_min(f, x0, f0, max_evals, local=None):
    """Minimize a 2pi-periodic, unimodal-per-period function starting at x0.

    Uses 3 evaluations for a quarter-period scan, the rest for golden section on
    the half-period window around the best scan point.  With ``local`` set, first
    tries the narrow bracket x0 +/- local (2 evaluations) and only falls back to
    the scan if x0 is not bracketed.
    """
    if local:
        fa, fc = f(x0 - local), f(x0 + local)
        if f0 <= min(fa, fc):
            x, fx, _ = golden_section(f, x0 - local, x0, x0 + local, f0, max_evals - 2)
            return x, fx
        max_evals -= 2
    xs = [x0 + j * math.pi / 2 for j in range(4)]
    fs = [f0] + [f(x) for x in xs[1:]]
    j = int(np.argmin(fs))
    a, c = xs[j] - math.pi / 2, xs[j] + math.pi / 2
    fa, fc = fs[(j - 1) % 4], fs[(j + 1) % 4]
    b, fb = xs[j], fs[j]
    if fb > min(fa, fc):  # flat or noisy scan
        return b, fb
    x, fx, _ = golden_section(f, a, b, c, fb, max_evals - 3)
    return x, fx


# ---------------------------------------------------------------------------
# Result containers


@dataclass
class TrajectoryPoint:
    iteration: int
    dphi2: float
    dphi3: float
    r_err: float
    stokes: StokesVector


@dataclass
class CalibrationResult:
    settings: dict = field(default_factory=dict)
    residual_error: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    iterations_used: int = 0
    chi: float | None = None
    x_trajectory: list = field(default_factory=list)
    x_iterations_used: int = 0

    def states(self, p: ChipParams) -> dict:
        return {k: transmitter_output(d, p).state for k, d in self.settings.items()}

    def intensities(self, p: ChipParams) -> dict:
        return {k: transmitter_output(d, p).intensity for k, d in self.settings.items()}

    def is_complete(self) -> bool:
        return all(k in self.settings for k in STATE_NAMES)


def _trajectory_point(it, d, p, r):
    st = to_stokes(transmitter_output(d, p).state)
    return TrajectoryPoint(it, chipmod.dphi2(d, p), chipmod.dphi3(d, p), r, st)


# ---------------------------------------------------------------------------
# Z basis


def _z_drive(base: DriveSettings, p: ChipParams, x2: float, x3: float) -> DriveSettings:
    """Realize total phases (x2, x3): x2 on EP2 (push-pull), x3 on TP3."""
    vp, vm = push_pull(x2 - base.phi_tp2, p)
    return base.replace(v_ep2_plus=vp, v_ep2_minus=vm, phi_tp3=x3 - p.phase_per_volt * (base.v_ep3_plus - base.v_ep3_minus))


def _descend(measure, target, make_drive, p, x2, x3, target_error, max_sweeps, evals_per_sweep,
             polish_sweeps, label):
    """Alternating (dphi2, dphi3) line minimizations of ``measure(drive, target)``.

    Returns (drive, x2, x3, r, trajectory, sweeps-to-target).
    """
    cur = make_drive(x2, x3)
    r = measure(cur, target)
    traj = [_trajectory_point(0, cur, p, r)]
    per_coord = evals_per_sweep // 2
    sweeps, polished, kicked = 0, 0, False
    order = (2, 3)
    best = (cur, r)
    while sweeps < max_sweeps:
        local = None
        r_start = r
        if r < target_error:
            polished += 1
            if polished > polish_sweeps:
                break
            # R_err is quadratic near the optimum, so the distance to it scales as sqrt(R_err)
            local = min(POLISH_BRACKET, max(10 * math.sqrt(max(r, 0.0)), 1e-9))
        else:
            sweeps += 1
        for coord in order:
            if coord == 2:
                xn, rn = periodic_line_min(lambda x: measure(make_drive(x, x3), target), x2, r, per_coord, local)
            else:
                xn, rn = periodic_line_min(lambda x: measure(make_drive(x2, x), target), x3, r, per_coord, local)
            if rn < r:
                if coord == 2:
                    x2 = chipmod._wrap(xn)
                else:
                    x3 = chipmod._wrap(xn)
                r = rn
                cur = make_drive(x2, x3)
                traj.append(_trajectory_point(len(traj), cur, p, r))
        if r < best[1]:
            best = (cur, r)
        if local is None and r >= target_error and r > 0.5 * r_start and not kicked:
            # With no field in the upper path dphi3 is flat, so (dphi2, dphi3) can sit on a
            # stationary point; a quarter-period kick of dphi2, followed by a dphi3 search, leaves it.
            kicked, order = True, (3, 2)
            x2 = chipmod._wrap(x2 + math.pi / 2)
            cur = make_drive(x2, x3)
            r = measure(cur, target)
            traj.append(_trajectory_point(len(traj), cur, p, r))
    if r >= target_error:
        raise CalibrationError(
            f"calibration of |{label}> stalled at R_err={best[1]:.3e} after {sweeps} sweeps",
            best_settings={label: best[0]}, best_error=best[1], trajectory=traj,
        )
    return cur, x2, x3, r, traj, sweeps


def calibrate_z(
    p: ChipParams,
    measure: Measure | None = None,
    target_error: float = 1e-4,
    max_sweeps: int = 10,
    evals_per_sweep: int = 40,
    start: DriveSettings | None = None,
    polish_sweeps: int = 1,
) -> CalibrationResult:
    """Coordinate-descent calibration of the |V> setting; |H> is set at dphi2 = pi.

    ``iterations_used`` counts the sweeps needed to get below ``target_error``;
    ``polish_sweeps`` extra sweeps then push the residual further down (cross-basis
    fidelities deviate from 1/2 by ~sqrt(R_err), so MUB quality needs R_err well
    under the target).  Raises :class:`CalibrationError` (carrying the best
    settings) if the target is not met within ``max_sweeps``.
    """
    if not 0 < target_error < 0.1:
        raise ContractError("target_error must lie in (0, 0.1)")
    measure = measure or model_measure(p)
    base = start or DriveSettings()
    v_drive, x2, x3, r, traj, sweeps = _descend(
        measure, V, lambda a, b: _z_drive(base, p, a, b), p,
        chipmod.dphi2(base, p), chipmod.dphi3(base, p),
        target_error, max_sweeps, evals_per_sweep, polish_sweeps, "V")
    h_drive = _z_drive(base, p, math.pi, x3)
    res = CalibrationResult(trajectory=traj, iterations_used=sweeps)
    res.settings = {"H": h_drive, "V": v_drive}
    res.residual_error = {"H": measure(h_drive, PolarizationState(1 + 0j, 0j)), "V": r}
    res.residual_error = {k: max(v, 0.0) for k, v in res.residual_error.items()}
    return res


def analytic_z_solution(p: ChipParams, drive: DriveSettings | None = None) -> tuple[float, float]:
    """Closed-form (dphi2, dphi3) zeroing the H amplitude of the vertical state.

    For an ideal encoder: dphi3 = zeta + pi and dphi2 = 2 atan((t3m/t3p) sin delta),
    with the MZI-3 arm transmissions evaluated at the drive's EP3 voltages.  A
    finite encoder extinction floor is handled exactly as well.
    """
    drive = drive or DriveSettings()
    _, t3p = chipmod.ep_transfer(drive.v_ep3_plus, p)
    _, t3m = chipmod.ep_transfer(drive.v_ep3_minus, p)
    ratio = t3m / t3p * math.sin(p.delta)
    f = chipmod._db_to_power(p.encoder_er_floor)
    if f == 0:
        dp2 = 2 * math.atan(ratio)
        return dp2, chipmod._wrap(p.zeta + math.pi)
    tan2 = (ratio**2 * (1 - f) - f) / ((1 - f) - f * ratio**2)
    if tan2 < 0:
        raise ContractError("encoder extinction too poor for an exact |V> state")
    dp2 = 2 * math.atan(math.sqrt(tan2))
    u, dn = chipmod._encoder_split(dp2, p)
    return dp2, chipmod._wrap(p.zeta + math.pi + np.angle(dn) - np.angle(u))


# ---------------------------------------------------------------------------
# X basis


def balanced_chi(p: ChipParams) -> float:
    """Relative X-basis phase giving equal MZI-2 splits for |+> and |->."""
    return chipmod._wrap(math.pi / 2 - p.zeta)


def _x_drive(base: DriveSettings, p: ChipParams, x2: float, x3: float) -> DriveSettings:
    """Realize (x2, x3) on the fast shifters with frozen thermal phases."""
    vp2, vm2 = push_pull(x2 - base.phi_tp2, p)
    vp3, vm3 = push_pull(x3 - base.phi_tp3, p)
    return base.replace(v_ep2_plus=vp2, v_ep2_minus=vm2, v_ep3_plus=vp3, v_ep3_minus=vm3)


def calibrate_x(
    p: ChipParams,
    measure: Measure | None,
    z_result: CalibrationResult,
    target_error: float = 1e-4,
    chi: float | None = None,
    max_sweeps: int = 10,
    evals_per_sweep: int = 40,
    polish_sweeps: int = 1,
) -> CalibrationResult:
    """Find |+> and |-> settings on EP2/EP3 with the Z-calibrated thermal phases.

    |+> targets (|H> + e^{i chi}|V>)/sqrt(2); |-> then targets the state orthogonal
    to the |+> actually prepared.
    """
    if "V" not in z_result.settings:
        raise ContractError("calibrate_x needs a completed Z calibration")
    measure = measure or model_measure(p)
    chi = balanced_chi(p) if chi is None else chi
    zv = z_result.settings["V"]
    base = DriveSettings(phi_tp1=zv.phi_tp1, phi_tp2=zv.phi_tp2, phi_tp3=zv.phi_tp3, phi_tp_voa=zv.phi_tp_voa)

    # ideal-splitter starting guess: dphi2 = pi/2, upper arm phase from the relative phase
    x2, x3 = math.pi / 2, chipmod._wrap(-chi)
    make = lambda a, b: _x_drive(base, p, a, b)
    args = (target_error, max_sweeps, evals_per_sweep, polish_sweeps)
    plus_d, x2p, x3p, r_plus, traj_p, sw_p = _descend(measure, x_state(chi, +1), make, p, x2, x3, *args, "plus")
    minus_target = transmitter_output(plus_d, p).state.orthogonal()
    minus_d, _, _, r_minus, traj_m, sw_m = _descend(
        measure, minus_target, make, p, x2p, chipmod._wrap(x3p + math.pi), *args, "minus")

    res = CalibrationResult(
        settings=dict(z_result.settings), residual_error=dict(z_result.residual_error),
        trajectory=z_result.trajectory, iterations_used=z_result.iterations_used, chi=chi,
    )
    res.settings.update(plus=plus_d, minus=minus_d)
    res.residual_error.update(plus=max(r_plus, 0.0), minus=max(r_minus, 0.0))
    res.x_trajectory = traj_p + traj_m
    res.x_iterations_used = sw_p + sw_m
    return res


# ---------------------------------------------------------------------------
# Intensity equalization and reporting


def equalize_intensities(result: CalibrationResult, p: ChipParams) -> CalibrationResult:
    """Common-mode EP3 bias per state so all states share the lowest intensity.

    No-op for a lossless shifter (nothing to trade).  Limited by ``v_max``.
    """
    if p.ep_loss_slope == 0:
        return result
    inten = result.intensities(p)
    floor = min(inten.values())
    out = dict(result.settings)
    for k, d in result.settings.items():
        dv = 10 * math.log10(inten[k] / floor) / p.ep_loss_slope
        dv = min(dv, p.v_max - max(d.v_ep3_plus, d.v_ep3_minus))
        out[k] = d.replace(v_ep3_plus=d.v_ep3_plus + dv, v_ep3_minus=d.v_ep3_minus + dv)
    result.settings = out
    return result


def calibrate(
    p: ChipParams,
    measure: Measure | None = None,
    target_error: float = 1e-4,
    equalize: bool = True,
    **kw,
) -> CalibrationResult:
    """Full four-state calibration: Z, then X, then intensity equalization."""
    z = calibrate_z(p, measure, target_error, **kw)
    res = calibrate_x(p, measure, z, target_error, **{k: v for k, v in kw.items() if k != "start"})
    return equalize_intensities(res, p) if equalize else res


def intensity_imbalance(result: CalibrationResult, p: ChipParams, decoy_ratio: float = 0.2) -> dict:
    """Max pairwise |I_a - I_b| / mean(I) over the four states, per intensity level."""
    out = {}
    for name, ratio in (("signal", 1.0), ("decoy", decoy_ratio)):
        vals = []
        for d in result.settings.values():
            dd = chipmod.decoy_drive(ratio, p, d)
            vals.append(transmitter_output(dd, p).intensity)
        vals = np.array(vals)
        out[name] = float((vals.max() - vals.min()) / vals.mean())
    return out


def mub_defect(result: CalibrationResult, p: ChipParams) -> float:
    """Largest |fidelity - 1/2| between any Z state and any X state."""
    st = result.states(p)
    return max(abs(fidelity(st[a], st[b]) - 0.5) for a in ("H", "V") for b in ("plus", "minus"))


# ---------------------------------------------------------------------------
# Brute-force oracle


@dataclass
class GridOracleResult:
    dphi2: float
    dphi3: float
    min_r_err: float
    grid_dphi2: float
    grid_dphi3: float
    grid_min: float
    axis: np.ndarray
    landscape: np.ndarray


def _r_err_grid(p: ChipParams, t3p: float, t3m: float, g2: np.ndarray, g3: np.ndarray) -> np.ndarray:
    # independent vectorized evaluation of the encoder amplitudes
    f = chipmod._db_to_power(p.encoder_er_floor)
    s, c = np.sin(g2 / 2), np.cos(g2 / 2)
    u = np.sqrt(1 - f) * s + 1j * np.sqrt(f) * c
    dn = np.sqrt(1 - f) * c + 1j * np.sqrt(f) * s
    a_h = np.exp(1j * g3) * t3p * u + np.exp(1j * p.zeta) * t3m * np.sin(p.delta) * dn
    a_v = t3m * np.cos(p.delta) * dn
    ph, pv = np.abs(a_h) ** 2, np.abs(a_v) ** 2
    return ph / (ph + pv)


def grid_oracle(p: ChipParams, resolution: int = 512, drive: DriveSettings | None = None,
                refine_levels: int = 10) -> GridOracleResult:
    """Exhaustive R_err scan of (dphi2, dphi3) over (-pi, pi]^2.

    ``grid_*`` fields report the raw grid minimum; ``dphi2/dphi3/min_r_err`` come
    from nested brute-force rescans of the neighbourhood of the best cell
    (each level a 21x21 grid one tenth as wide), so the oracle can resolve
    minima far below the grid's own quantization.
    """
    if resolution < 64:
        raise ContractError("grid_oracle needs at least 64 points per axis")
    drive = drive or DriveSettings()
    _, t3p = chipmod.ep_transfer(drive.v_ep3_plus, p)
    _, t3m = chipmod.ep_transfer(drive.v_ep3_minus, p)
    axis = -math.pi + 2 * math.pi * (np.arange(resolution) + 1) / resolution
    g2, g3 = np.meshgrid(axis, axis, indexing="ij")
    land = _r_err_grid(p, t3p, t3m, g2, g3)
    i, j = np.unravel_index(np.argmin(land), land.shape)
    gx2, gx3, gmin = axis[i], axis[j], float(land[i, j])

    x2, x3, best = gx2, gx3, gmin
    half = 2 * math.pi / resolution
    for _ in range(refine_levels):
        a2 = np.linspace(x2 - half, x2 + half, 21)
        a3 = np.linspace(x3 - half, x3 + half, 21)
        h2, h3 = np.meshgrid(a2, a3, indexing="ij")
        sub = _r_err_grid(p, t3p, t3m, h2, h3)
        k, l = np.unravel_index(np.argmin(sub), sub.shape)
        if sub[k, l] <= best:
            x2, x3, best = a2[k], a3[l], float(sub[k, l])
        half /= 10
    return GridOracleResult(x2, x3, best, gx2, gx3, gmin, axis, land)


def write_trajectory_csv(traj, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["iteration", "dphi2_rad", "dphi3_rad", "r_err", "s1", "s2", "s3"])
        for t in traj:
            w.writerow([t.iteration, repr(t.dphi2), repr(t.dphi3), repr(t.r_err),
                        repr(t.stokes.s1), repr(t.stokes.s2), repr(t.stokes.s3)])
