"""SPGD control of the receiver polarization controller.

The controller is modelled as four variable wave plates with fixed axes
(0, 45, 0, 45 degrees, i.e. Stokes axes s1, s2, s1, s2) whose retardances are
the control values.  The objective is the fraction of probe detections that hit
the wrong detector of the analyzer, for probes |H> and the X-basis state.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import link
from .errors import ContractError
from .link import ChannelState, LinkParams
from .polarization import H, PolTransform, x_state

PLATE_AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
# Also the identity, but unlike all-zero it is not a singular point of the plate
# stack: the four plates then rotate about s1, s2, s3, s2 to first order.
NOMINAL_VOLTAGES = (0.0, np.pi / 2, 0.0, -np.pi / 2)


def _plate(axis: int, ret: float) -> np.ndarray:
    c, s = math.cos(ret / 2), math.sin(ret / 2)
    if axis == 0:
        return np.array([[c - 1j * s, 0], [0, c + 1j * s]])
    return np.array([[c, -1j * s], [-1j * s, c]])


def epc_matrix(voltages) -> np.ndarray:
    """Jones matrix of the four plates (plate 1 traversed first)."""
    v = np.asarray(voltages, dtype=float)
    if v.shape != (4,):
        raise ContractError("EPC takes four control values")
    return _plate(1, v[3]) @ _plate(0, v[2]) @ _plate(1, v[1]) @ _plate(0, v[0])


def epc_transform(voltages) -> PolTransform:
    return PolTransform(epc_matrix(voltages), unitary=True)


@dataclass
class SpgdController:
    voltages: np.ndarray = field(default_factory=lambda: np.array(NOMINAL_VOLTAGES))
    gain: float = 8.0
    perturbation: float = 0.05
    v_range: tuple = (-4 * np.pi, 4 * np.pi)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float).copy()
        if self.voltages.shape != (4,):
            raise ContractError("controller needs four control values")
        if self.gain < 0 or self.perturbation <= 0:
            raise ContractError("gain must be >= 0 and perturbation > 0")
        lo, hi = self.v_range
        if not lo < hi or np.any(self.voltages < lo) or np.any(self.voltages > hi):
            raise ContractError("control values outside the configured range")


def spgd_step(c: SpgdController, sample_objective, rng) -> SpgdController:
    """One two-sided SPGD update; mutates and returns ``c``.

    Returns the mean of the two probe objectives as the step's recorded J.
    """
    delta = c.perturbation * rng.choice((-1.0, 1.0), size=4)
    j_plus = sample_objective(c.voltages + delta)
    j_minus = sample_objective(c.voltages - delta)
    c.voltages = np.clip(c.voltages - c.gain * (j_plus - j_minus) * delta, *c.v_range)
    c.history.append((len(c.history), 0.5 * (j_plus + j_minus)))
    return c


@lru_cache(maxsize=16)
def _probe_frame(chi: float) -> tuple[np.ndarray, np.ndarray]:
    """Bob's alignment matrix and the two probe Jones vectors as columns."""
    probes = np.column_stack([H.as_array(), x_state(chi).as_array()])
    return link.alignment_transform(chi).matrix, probes


def _wrong_fraction(m: np.ndarray, align: np.ndarray, probes: np.ndarray, eps: float) -> float:
    a = align @ m @ probes
    w_z = abs(a[1, 0]) ** 2
    w_x = abs(a[0, 1] - a[1, 1]) ** 2 / 2
    return float((1 - 2 * eps) * (w_z + w_x) / 2 + eps)


def wrong_detector_fraction(u, lp: LinkParams, chi: float = 0.0) -> float:
    """Mean wrong-detector probability of the |H> and X-basis probes after ``u``.

    ``u`` (PolTransform or 2x2 matrix) maps Alice's frame to Bob's analyzers; the
    X probe has relative phase ``chi`` and Bob's fixed alignment for it is
    included here.
    """
    m = u.matrix if isinstance(u, PolTransform) else np.asarray(u)
    return _wrong_fraction(m, *_probe_frame(chi), link.pbs_leakage(lp))


def make_objective(cs: ChannelState, lp: LinkParams, rng=None, probe_budget: int | None = 10_000, chi: float = 0.0):
    """J(v) for the current channel; binomially sampled from ``probe_budget`` detections if given."""
    b = cs.birefringence.matrix
    frame = _probe_frame(chi)
    eps = link.pbs_leakage(lp)

    def objective(v):
        j = _wrong_fraction(epc_matrix(v) @ b, *frame, eps)
        if probe_budget is None:
            return j
        return rng.binomial(probe_budget, min(max(j, 0.0), 1.0)) / probe_budget

    return objective


@dataclass
class CompensationTrace:
    t_s: np.ndarray
    qber_proxy: np.ndarray
    voltages: np.ndarray
    channel: ChannelState

    def to_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t_s", "qber_proxy", "v1", "v2", "v3", "v4"])
            for t, q, v in zip(self.t_s, self.qber_proxy, self.voltages):
                w.writerow([repr(float(t)), repr(float(q))] + [repr(float(x)) for x in v])


def run_compensation(
    lp: LinkParams,
    controller: SpgdController,
    duration_s: float,
    dt_s: float,
    rng,
    probe_budget: int | None = 10_000,
    channel: ChannelState | None = None,
    chi: float = 0.0,
) -> CompensationTrace:
    """Alternate one drift step and one SPGD step every ``dt_s``.

    ``qber_proxy`` is the wrong-detector fraction at the controller's voltages
    after each step, evaluated without probe noise.  ``probe_budget=None`` runs
    the controller on the noiseless objective.  Drift, dither and probe noise use
    separate streams spawned from ``rng``, so runs differing only in the probe
    budget see the same channel.
    """
    if dt_s <= 0 or duration_s < 0:
        raise ContractError("need dt_s > 0 and duration_s >= 0")
    cs = channel or ChannelState()
    steps = int(round(duration_s / dt_s))
    t = np.empty(steps)
    q = np.empty(steps)
    volts = np.empty((steps, 4))
    drift_rng, dither_rng, probe_rng = rng.spawn(3)
    frame, eps = _probe_frame(chi), link.pbs_leakage(lp)
    for i in range(steps):
        cs = link.drift_step(cs, dt_s, drift_rng, lp.drift_rate)
        spgd_step(controller, make_objective(cs, lp, probe_rng, probe_budget, chi), dither_rng)
        t[i] = cs.elapsed_s
        q[i] = _wrong_fraction(epc_matrix(controller.voltages) @ cs.birefringence.matrix, *frame, eps)
        volts[i] = controller.voltages
    return CompensationTrace(t, q, volts, cs)
