"""Finite-key secret length for one-decoy BB84, and protocol-parameter search.

Secret length::

    l = floor(s0 + s1 (1 - h(phi)) - lambda_EC - 6 log2(19/eps_sec) - log2(2/eps_cor))

Estimators (one-decoy bounds, intensities mu1 > mu2 with probabilities p_k).
The failure budget eps_sec/19 is spent on every Hoeffding deviation and on the
sampling term gamma::

    delta(n)      = sqrt(n/2 ln(19/eps_sec))
    n_k^{+-}      = e^k / p_k (n_k +- delta(n_total))                 per basis
    tau_n         = sum_k p_k e^{-k} k^n / n!
    s0^l          = tau0/(mu1-mu2) (mu1 n_{mu2}^- - mu2 n_{mu1}^+)
    s0^u          = 2 tau0 e^{mu2}/p_{mu2} (m_{mu2} + delta(m_total))
    s1^l          = tau1 mu1 / (mu2 (mu1-mu2)) [n_{mu2}^- - (mu2/mu1)^2 n_{mu1}^+
                                                - (mu1^2-mu2^2)/mu1^2 s0^u/tau0]
    v_X1^u        = tau1/(mu1-mu2) (m_{X,mu1}^+ - m_{X,mu2}^-)
    phi           = v_X1^u / s_X1^l + gamma(eps_sec/19, v_X1^u/s_X1^l, s_Z1^l, s_X1^l)
    gamma(a,b,c,d) = sqrt((c+d)(1-b)b/(c d ln2) log2((c+d)/(c d (1-b) b a^2)))
    lambda_EC     = f_ec n_Z h(QBER_Z)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, UndefinedQBERError
from .protocol import ObservedCounts, ProtocolParams, expected_statistics, qber

BUDGET_SPLIT = 19


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    f_ec: float = 1.16

    def __post_init__(self):
        for name in ("eps_sec", "eps_cor"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.f_ec < 1:
            raise ConfigError("f_ec must be >= 1")


@dataclass
class SecretLengthResult:
    l: int
    s_z0_l: float
    s_z1_l: float
    s_z0_u: float
    s_x0_u: float
    s_x1_l: float
    v_x1_u: float
    phi_z_u: float
    lambda_ec: float
    qber_z: float
    qber_x: float
    tau0: float
    tau1: float
    n_pm: dict
    m_pm: dict
    skr_bps: float
    block_pulses: int
    flags: list = field(default_factory=list)


def binary_entropy(p) -> float:
    if not 0 <= p <= 1:
        raise ContractError(f"binary entropy needs p in [0, 1], got {p}")
    if p == 0 or p == 1:
        return 0.0
    return float(-p * math.log2(p) - (1 - p) * math.log2(1 - p))


def tau_n(n: int, pp: ProtocolParams) -> float:
    """Probability that a pulse of the intensity mixture carries ``n`` photons."""
    if n < 0:
        raise ContractError("photon number must be >= 0")
    return float(sum(p * math.exp(-k) * k**n / math.factorial(n) for k, p in zip(pp.mus, pp.p_mu)))


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Sampling correction between the Z and X single-photon phase-error rates."""
    if c <= 0 or d <= 0 or not 0 < b < 1:
        return 0.0
    arg = (c + d) / (c * d * (1 - b) * b * a**2)
    if arg <= 1:
        return 0.0
    return math.sqrt((c + d) * (1 - b) * b / (c * d * math.log(2)) * math.log2(arg))


def _deviation(n: float, eps1: float, finite: bool) -> float:
    return math.sqrt(max(n, 0.0) / 2 * math.log(1 / eps1)) if finite else 0.0


def _corrected(counts: np.ndarray, pp: ProtocolParams, dev: float) -> tuple[np.ndarray, np.ndarray]:
    scale = np.exp(pp.mus) / pp.p_mu
    return scale * (counts - dev), scale * (counts + dev)


def secret_length(
    oc: ObservedCounts,
    pp: ProtocolParams,
    sp: SecurityParams | None = None,
    rep_rate_hz: float = 5e9,
    finite: bool = True,
) -> SecretLengthResult:
    """Secret bits extractable from one block's tallies.

    ``finite=False`` drops every finite-size term (Hoeffding deviations, gamma and
    the two log2 overheads) and gives the asymptotic decoy estimate.
    """
    sp = sp or SecurityParams()
    if pp.mu1 <= pp.mu2:
        raise ConfigError("secret_length needs mu1 > mu2")
    flags = []
    eps1 = sp.eps_sec / BUDGET_SPLIT
    mu1, mu2 = pp.mu1, pp.mu2
    t0, t1 = tau_n(0, pp), tau_n(1, pp)
    k_ratio = (mu1**2 - mu2**2) / mu1**2

    n_pm, m_pm, bounds = {}, {}, {}
    for b, name in enumerate(("Z", "X")):
        nb, mb = oc.n[b].astype(float), oc.m[b].astype(float)
        n_lo, n_hi = _corrected(nb, pp, _deviation(nb.sum(), eps1, finite))
        m_lo, m_hi = _corrected(mb, pp, _deviation(mb.sum(), eps1, finite))
        n_pm[name], m_pm[name] = (n_lo, n_hi), (m_lo, m_hi)
        s0_l = t0 / (mu1 - mu2) * (mu1 * n_lo[1] - mu2 * n_hi[0])
        s0_u = 2 * t0 * m_hi[1]
        s1_l = t1 * mu1 / (mu2 * (mu1 - mu2)) * (n_lo[1] - (mu2 / mu1) ** 2 * n_hi[0] - k_ratio * s0_u / t0)
        for label, val in (("s0_l", s0_l), ("s1_l", s1_l), ("s0_u", s0_u)):
            if val < 0:
                flags.append(f"{name}_{label}_clamped")
        bounds[name] = (max(s0_l, 0.0), max(s1_l, 0.0), max(s0_u, 0.0))
        if name == "X":
            v = t1 / (mu1 - mu2) * (m_hi[0] - m_lo[1])
            if v < 0:
                flags.append("X_v1_u_clamped")
            v_x1 = max(v, 0.0)

    s_z0, s_z1, s_z0_u = bounds["Z"]
    _, s_x1, s_x0_u = bounds["X"]

    try:
        q_z, q_x = qber(oc)
    except UndefinedQBERError:
        q_z = q_x = 0.5
        flags.append("qber_undefined")

    if s_x1 > 0:
        ratio = min(v_x1 / s_x1, 0.5)
        phi = ratio + (gamma(eps1, max(ratio, 1e-300), s_z1, s_x1) if finite else 0.0)
    else:
        ratio = phi = 0.5
        flags.append("no_single_photon_x")
    if phi > 0.5:
        phi = 0.5
        flags.append("phi_clamped")

    n_z = float(oc.n[0].sum())
    lam = sp.f_ec * n_z * binary_entropy(min(q_z, 1.0))
    overhead = 6 * math.log2(BUDGET_SPLIT / sp.eps_sec) + math.log2(2 / sp.eps_cor) if finite else 0.0
    raw = s_z0 + s_z1 * (1 - binary_entropy(phi)) - lam - overhead
    l = max(0, math.floor(raw))
    duration = oc.block_pulses / rep_rate_hz if oc.block_pulses else float("nan")
    return SecretLengthResult(
        l=l, s_z0_l=s_z0, s_z1_l=s_z1, s_z0_u=s_z0_u, s_x0_u=s_x0_u, s_x1_l=s_x1, v_x1_u=v_x1,
        phi_z_u=phi, lambda_ec=lam, qber_z=q_z, qber_x=q_x, tau0=t0, tau1=t1,
        n_pm=n_pm, m_pm=m_pm, skr_bps=l / duration if oc.block_pulses else 0.0,
        block_pulses=oc.block_pulses, flags=flags,
    )


# ---------------------------------------------------------------------------
# Parameter optimization

DEFAULT_SPACE = {"mu1": (0.1, 1.0), "mu2": (0.01, 0.5), "p_mu1": (0.05, 0.99), "pz_alice": (0.5, 0.99)}


def _golden_max(f, a, b, evals):
    """Maximize a unimodal ``f`` on [a, b]; returns (x, f(x))."""
    if b - a <= 0:
        return a, f(a)
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max(evals - 2, 0)):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def evaluate(pp, lp, cal, chip, sp, channel=None, epc=None) -> SecretLengthResult:
    """Secret length from expectation-valued tallies."""
    oc = expected_statistics(pp, lp, cal, chip, channel, epc)
    return secret_length(oc, pp, sp, lp.rep_rate_hz)


def optimize_params(
    lp,
    chip,
    cal,
    sp: SecurityParams | None = None,
    space: dict | None = None,
    start: ProtocolParams | None = None,
    rounds: int = 3,
    evals: int = 24,
) -> tuple[ProtocolParams, SecretLengthResult]:
    """Coordinate golden-section search over (mu1, mu2, p_mu1, pz_alice) maximizing SKR.

    ``space`` maps each name to a closed (lo, hi) interval; lo == hi pins a
    parameter.  The decoy bound is kept below the current signal intensity.
    """
    sp = sp or SecurityParams()
    space = {**DEFAULT_SPACE, **(space or {})}
    for name, (lo, hi) in space.items():
        if lo > hi:
            raise ConfigError(f"empty search interval for {name}")
    if space["mu2"][0] >= space["mu1"][1]:
        raise ConfigError("search space has no point with mu2 < mu1")
    start = start or ProtocolParams()
    cur = {k: float(np.clip(getattr(start, k), *space[k])) for k in space}
    if cur["mu2"] >= cur["mu1"]:
        cur["mu2"] = space["mu2"][0]
        cur["mu1"] = max(cur["mu1"], min(space["mu1"][1], cur["mu2"] * 4))

    def skr(vals):
        try:
            pp = start.replace(**vals)
        except ConfigError:
            return -1.0
        return evaluate(pp, lp, cal, chip, sp).skr_bps

    best = skr(cur)
    for _ in range(rounds):
        for name in ("mu1", "mu2", "p_mu1", "pz_alice"):
            lo, hi = space[name]
            if name == "mu2":
                hi = min(hi, cur["mu1"] * (1 - 1e-6))
            if name == "mu1":
                lo = max(lo, cur["mu2"] * (1 + 1e-6))
            if hi < lo:
                continue
            x, fx = _golden_max(lambda v: skr({**cur, name: v}), lo, hi, evals)
            if fx > best:
                cur[name], best = x, fx
    pp = start.replace(**cur)
    return pp, evaluate(pp, lp, cal, chip, sp)


@dataclass
class CurvePoint:
    distance_km: float
    skr_bps: float
    qber_z: float
    qber_x: float
    mu1: float
    mu2: float
    p_mu1: float
    pz_alice: float
    l: int
    block_pulses: int


CURVE_FIELDS = ("distance_km", "skr_bps", "qber_z", "qber_x", "mu1", "mu2", "p_mu1", "pz_alice", "l", "block_pulses")


def skr_vs_distance(distances, lp, chip, cal, pp: ProtocolParams, sp: SecurityParams | None = None,
                    optimize: bool = True, space: dict | None = None) -> list[CurvePoint]:
    """SKR and QBER per distance, optionally re-optimizing the protocol parameters."""
    sp = sp or SecurityParams()
    out = []
    warm = pp
    for km in distances:
        lpk = lp.replace(length_km=float(km))
        if optimize:
            warm, res = optimize_params(lpk, chip, cal, sp, space, start=warm)
        else:
            res = evaluate(pp, lpk, cal, chip, sp)
        cur = warm if optimize else pp
        out.append(CurvePoint(float(km), res.skr_bps, res.qber_z, res.qber_x, cur.mu1, cur.mu2,
                              cur.p_mu1, cur.pz_alice, res.l, cur.block_pulses))
    return out


def write_curve_csv(points, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for p in points:
            w.writerow([repr(getattr(p, f)) for f in CURVE_FIELDS])
