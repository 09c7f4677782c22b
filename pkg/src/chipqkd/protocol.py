"""Decoy-state BB84 rounds: expected tallies, Monte-Carlo blocks and QBER.

Alice sends state index s = 2*basis + bit (H, V, +, -) at intensity index k
(0 = signal mu1, 1 = decoy mu2).  Bob's four detectors are independent given the
pulse; a time bin's click set is resolved by picking one clicked detector
uniformly at random.

Both modes use the same photon-level model: every detected photon of a pulse is
independently displaced to the neighbouring bins with the timing-crosstalk
probabilities, and detectors also fire on dark counts.  For independent pulses
this makes the probability that none of a set A of detectors fires factorize as::

    Q(A) = own(A) * (1 - p_dark)^|A| * prod_j E_neighbour[exp(-sum_{c in A} lam_c p_j / 2)]

which the analytic mode evaluates exactly and turns into click-set
probabilities by inclusion-exclusion.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import link
from .calibration import CalibrationResult
from .chip import ChipParams
from .errors import ConfigError, ContractError, UndefinedQBERError
from .link import ChannelState, LinkParams

BASES = ("Z", "X")
N_STATES = 4
_MASKS = np.arange(16)
_POPCOUNT = np.array([bin(a).count("1") for a in range(16)])
_BITS = np.array([[(a >> c) & 1 for c in range(4)] for a in range(16)], dtype=bool)


@dataclass(frozen=True)
class ProtocolParams:
    mu1: float = 0.5
    mu2: float = 0.1
    p_mu1: float = 0.7
    pz_alice: float = 0.9
    block_pulses: int = 10_000_000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mu2 < self.mu1:
            raise ConfigError(f"need 0 <= mu2 < mu1 (got mu1={self.mu1}, mu2={self.mu2})")
        for name in ("p_mu1", "pz_alice"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if int(self.block_pulses) != self.block_pulses or self.block_pulses < 1:
            raise ConfigError("block_pulses must be a positive integer")
        object.__setattr__(self, "block_pulses", int(self.block_pulses))

    @property
    def mus(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2])

    @property
    def p_mu(self) -> np.ndarray:
        return np.array([self.p_mu1, 1 - self.p_mu1])

    @property
    def p_state(self) -> np.ndarray:
        z, x = self.pz_alice / 2, (1 - self.pz_alice) / 2
        return np.array([z, z, x, x])

    def replace(self, **kw) -> "ProtocolParams":
        return replace(self, **kw)


@dataclass
class ObservedCounts:
    """Sifted tallies of one block.

    ``n[b, k]`` / ``m[b, k]``: sifted detections / errors in basis b at intensity k.
    ``sent[s, k]``: pulses sent per state and intensity.  In expectation mode
    (``expected=True``) all tallies are real-valued means.
    """

    n: np.ndarray
    m: np.ndarray
    sent: np.ndarray
    double_clicks: float = 0
    crosstalk_events: float = 0
    single_photon_z: float = 0
    block_pulses: int = 0
    expected: bool = False

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float if self.expected else np.int64).reshape(2, 2)
        self.m = np.asarray(self.m, dtype=float if self.expected else np.int64).reshape(2, 2)
        self.sent = np.asarray(self.sent, dtype=float if self.expected else np.int64).reshape(4, 2)
        sent_b = self.sent.reshape(2, 2, 2).sum(axis=1)
        tol = 1e-9 * max(1.0, float(self.sent.sum())) if self.expected else 0
        if np.any(self.m < -tol) or np.any(self.m > self.n + tol) or np.any(self.n > sent_b + tol):
            raise ContractError("counts violate 0 <= m <= n <= sent")

    @property
    def n_z(self) -> float:
        return self.n[0].sum()

    @property
    def n_x(self) -> float:
        return self.n[1].sum()

    def tallies(self) -> dict:
        """Flat name -> value map of every tally."""
        out = {}
        for b, bn in enumerate(BASES):
            for k in range(2):
                out[f"n_{bn}_{k}"] = self.n[b, k]
                out[f"m_{bn}_{k}"] = self.m[b, k]
        for s in range(4):
            for k in range(2):
                out[f"sent_{s}_{k}"] = self.sent[s, k]
        out["double_clicks"] = self.double_clicks
        out["crosstalk_events"] = self.crosstalk_events
        out["single_photon_z"] = self.single_photon_z
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["field", "basis", "intensity", "value"])
            for b, bn in enumerate(BASES):
                for k in range(2):
                    w.writerow(["n", bn, k, repr(self.n[b, k].item())])
                    w.writerow(["m", bn, k, repr(self.m[b, k].item())])
            for s in range(4):
                for k in range(2):
                    w.writerow(["sent", s, k, repr(self.sent[s, k].item())])
            for name in ("double_clicks", "crosstalk_events", "single_photon_z", "block_pulses", "expected"):
                w.writerow([name, "", "", repr(getattr(self, name))])

    @classmethod
    def from_csv(cls, path) -> "ObservedCounts":
        n, m, sent = np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((4, 2))
        extra = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                f, v = row["field"], row["value"]
                if f in ("n", "m"):
                    (n if f == "n" else m)[BASES.index(row["basis"]), int(row["intensity"])] = float(v)
                elif f == "sent":
                    sent[int(row["basis"]), int(row["intensity"])] = float(v)
                elif f == "expected":
                    extra[f] = v == "True"
                elif f == "block_pulses":
                    extra[f] = int(v)
                else:
                    extra[f] = float(v)
        exp = extra.get("expected", False)
        if not exp:
            extra = {k: (int(v) if isinstance(v, float) else v) for k, v in extra.items()}
        return cls(n, m, sent, **extra)


# ---------------------------------------------------------------------------
# Receiver model shared by both modes


@dataclass
class ReceiverModel:
    """Everything the per-pulse statistics depend on, for the 4 states x 2 intensities."""

    weights: np.ndarray  # (4, 2) P(state) P(intensity)
    mu: np.ndarray  # (4, 2) mean photon number leaving Alice
    proj: np.ndarray  # (4, 4) state -> channel projection probabilities
    eff: np.ndarray  # (4,) per-channel detection probability before projection
    eta_det: np.ndarray  # (4,) detector efficiencies
    p_adj: float
    p_far: float
    p_dark: float

    @property
    def p_stay(self) -> float:
        return 1 - self.p_adj - self.p_far

    @property
    def lam(self) -> np.ndarray:
        """(4, 2, 4) mean detected photons per state, intensity, channel."""
        return self.mu[:, :, None] * (self.eff * self.proj)[:, None, :]

    def background_none(self) -> np.ndarray:
        """(16,) probability that no dark count or displaced photon hits any detector in set A."""
        lam_a = self.lam.reshape(8, 4) @ _BITS.T.astype(float)  # (8, 16)
        w = self.weights.reshape(8)
        out = (1 - self.p_dark) ** _POPCOUNT
        for p in (self.p_adj, self.p_far):
            out = out * (w @ np.exp(-lam_a * p / 2)) ** 2
        return out

    def own_none_poisson(self) -> np.ndarray:
        """(4, 2, 16) probability that no own photon is registered in set A."""
        return np.exp(-self.p_stay * (self.lam @ _BITS.T.astype(float)))

    def own_none_n_photons(self, n: int) -> np.ndarray:
        """(4, 16) same as above given exactly ``n`` photons left Alice."""
        rho = self.p_stay * self.eff * self.proj  # (4, 4)
        return (1 - rho @ _BITS.T.astype(float)) ** n


def _click_set_probs(q_none: np.ndarray) -> np.ndarray:
    """Inclusion-exclusion: P(clicked set = S) from Q(A) = P(no click in A), along the last axis."""
    out = np.zeros_like(q_none)
    full = 15
    for s in range(16):
        t = s
        while True:
            out[..., s] += (-1) ** _POPCOUNT[t] * q_none[..., (full ^ s) | t]
            if t == 0:
                break
            t = (t - 1) & s
    return out


def _outcome_probs(click_sets: np.ndarray) -> np.ndarray:
    """P(reported detector = c) under uniform double-click resolution, shape (..., 4)."""
    share = _BITS / np.maximum(_POPCOUNT, 1)[:, None]  # (16, 4)
    return click_sets @ share


def _marginal_click(rm: ReceiverModel) -> np.ndarray:
    """(4, 2, 4) per-channel click probabilities."""
    bg = rm.background_none()
    own = rm.own_none_poisson()
    single = [1 << c for c in range(4)]
    return 1 - own[..., single] * bg[single]


def build_receiver_model(
    pp: ProtocolParams,
    lp: LinkParams,
    cal: CalibrationResult,
    chip: ChipParams,
    channel: ChannelState | None = None,
    epc=None,
) -> ReceiverModel:
    """Collect prepared states, intensities, projections and detector efficiencies.

    Detector efficiencies are solved self-consistently with the resulting
    per-detector count rates.
    """
    if not cal.is_complete():
        raise ContractError("protocol needs a complete four-state calibration")
    channel = channel or ChannelState()
    epc = epc or link.alignment_transform(cal.chi or 0.0)
    names = ("H", "V", "plus", "minus")
    states = cal.states(chip)
    inten = cal.intensities(chip)
    rel = np.array([inten[k] for k in names])
    rel = rel / rel.mean()
    mu = rel[:, None] * pp.mus[None, :]
    proj = np.array([link.projection_probs(link.propagate(states[k], channel, epc), lp) for k in names])
    p_adj, p_far = link.timing_crosstalk(lp.detector, lp.bin_period_ps)
    weights = pp.p_state[:, None] * pp.p_mu[None, :]
    eta = np.full(4, link.detector_efficiency(0.0, lp.detector))
    rm = ReceiverModel(weights, mu, proj, link.channel_efficiency(lp, eta), eta, p_adj, p_far, link.dark_prob(lp))
    for _ in range(100):
        rate = lp.rep_rate_hz * np.einsum("sk,skc->c", weights, _marginal_click(rm))
        new = link.detector_efficiency(rate, lp.detector)
        done = np.max(np.abs(new - rm.eta_det)) < 1e-14
        rm.eta_det = new
        rm.eff = link.channel_efficiency(lp, new)
        if done:
            break
    return rm


# ---------------------------------------------------------------------------
# Analytic mode


def _tally(rm: ReceiverModel, outcome: np.ndarray, weights: np.ndarray):
    """Sifted (n, m) per basis and intensity from outcome probabilities (4, K, 4)."""
    n = np.zeros((2, weights.shape[1]))
    m = np.zeros_like(n)
    for s in range(4):
        b, bit = divmod(s, 2)
        n[b] += weights[s] * (outcome[s, :, 2 * b] + outcome[s, :, 2 * b + 1])
        m[b] += weights[s] * outcome[s, :, 2 * b + 1 - bit]
    return n, m


def outcome_distribution(rm: ReceiverModel) -> tuple[np.ndarray, np.ndarray]:
    """(click-set probabilities (4, 2, 16), reported-detector probabilities (4, 2, 4))."""
    sets = _click_set_probs(rm.own_none_poisson() * rm.background_none())
    return sets, _outcome_probs(sets)


def photon_yields(rm: ReceiverModel, n_photons: int) -> np.ndarray:
    """(4, 4) reported-detector probabilities given exactly ``n_photons`` photons were sent."""
    sets = _click_set_probs(rm.own_none_n_photons(n_photons) * rm.background_none())
    return _outcome_probs(sets)


def expected_single_photon_z(rm: ReceiverModel, pp: ProtocolParams) -> float:
    """Expected sifted Z detections originating from single-photon pulses."""
    y1 = photon_yields(rm, 1)
    p1 = rm.mu * np.exp(-rm.mu)  # (4, 2)
    total = 0.0
    for s in (0, 1):
        total += float(np.sum(rm.weights[s] * p1[s])) * (y1[s, 0] + y1[s, 1])
    return total * pp.block_pulses


def expected_statistics(
    pp: ProtocolParams,
    lp: LinkParams,
    cal: CalibrationResult,
    chip: ChipParams,
    channel: ChannelState | None = None,
    epc=None,
    rm: ReceiverModel | None = None,
) -> ObservedCounts:
    """Expectation-valued tallies for one block."""
    rm = rm or build_receiver_model(pp, lp, cal, chip, channel, epc)
    sets, outcome = outcome_distribution(rm)
    n, m = _tally(rm, outcome, rm.weights)
    nb = pp.block_pulses
    p_double = np.einsum("sk,skA->", rm.weights, sets[..., _POPCOUNT >= 2])
    # clicks caused only by displaced photons
    bg = rm.background_none()
    own = rm.own_none_poisson()
    xt = 0.0
    for c in range(4):
        a = 1 << c
        only_disp = own[..., a] * ((1 - rm.p_dark) - bg[a])
        xt += float(np.sum(rm.weights * only_disp))
    return ObservedCounts(
        n * nb, m * nb, rm.weights * nb,
        double_clicks=float(p_double) * nb,
        crosstalk_events=xt * nb,
        single_photon_z=expected_single_photon_z(rm, pp),
        block_pulses=nb,
        expected=True,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo mode


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator seeded through a SeedSequence, so it can spawn child streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def simulate_block(
    pp: ProtocolParams,
    lp: LinkParams,
    cal: CalibrationResult,
    chip: ChipParams,
    rng: np.random.Generator | None = None,
    channel: ChannelState | None = None,
    epc=None,
    rm: ReceiverModel | None = None,
    chunk: int = 1 << 20,
) -> ObservedCounts:
    """Pulse-by-pulse Monte-Carlo of one block (deterministic for a given rng state).

    Timing displacement wraps around within each chunk of pulses, which keeps
    every bin's neighbours independent and identically distributed.
    """
    rm = rm or build_receiver_model(pp, lp, cal, chip, channel, epc)
    rng = rng or make_rng(pp.seed)
    n = np.zeros((2, 2), dtype=np.int64)
    m = np.zeros_like(n)
    sent = np.zeros((4, 2), dtype=np.int64)
    doubles = xt = sp_z = 0
    detect_p = np.concatenate([rm.eff * rm.proj, 1 - (rm.eff * rm.proj).sum(axis=1, keepdims=True)], axis=1)
    shift_p = [rm.p_stay, rm.p_adj / 2, rm.p_adj / 2, rm.p_far / 2, rm.p_far / 2]
    shifts = (0, 1, -1, 2, -2)
    left = pp.block_pulses
    while left > 0:
        size = min(chunk, left)
        left -= size
        k = (rng.random(size) >= pp.p_mu1).astype(np.int64)
        basis = (rng.random(size) >= pp.pz_alice).astype(np.int64)
        bit = rng.integers(0, 2, size)
        s = 2 * basis + bit
        np.add.at(sent, (s, k), 1)
        nph = rng.poisson(rm.mu[s, k])

        det = np.zeros((size, 4), dtype=np.int64)
        for st in range(4):
            idx = np.flatnonzero((s == st) & (nph > 0))
            if idx.size:
                det[idx] = rng.multinomial(nph[idx], detect_p[st])[:, :4]
        arrive = np.zeros((5, size, 4), dtype=np.int64)
        r, c = np.nonzero(det)
        if r.size:
            split = rng.multinomial(det[r, c], shift_p)
            for j in range(5):
                arrive[j, (r + shifts[j]) % size, c] = split[:, j]
        own = arrive[0] > 0
        displaced = arrive[1:].sum(axis=0) > 0
        dark = rng.random((size, 4)) < rm.p_dark
        click = own | displaced | dark
        xt += int(np.sum(displaced & ~own & ~dark))
        nclick = click.sum(axis=1)
        doubles += int(np.sum(nclick >= 2))

        hit = np.flatnonzero(nclick > 0)
        keys = rng.random((hit.size, 4)) * click[hit]
        out = np.argmax(keys, axis=1)
        b_bob, bit_bob = out // 2, out % 2
        sifted = b_bob == basis[hit]
        hs, kb, bb = hit[sifted], k[hit][sifted], basis[hit][sifted]
        err = bit_bob[sifted] != bit[hs]
        np.add.at(n, (bb, kb), 1)
        np.add.at(m, (bb[err], kb[err]), 1)
        sp_z += int(np.sum((bb == 0) & (nph[hs] == 1)))
    return ObservedCounts(n, m, sent, doubles, xt, sp_z, pp.block_pulses)


def sample_statistics(expected: ObservedCounts, rng: np.random.Generator) -> ObservedCounts:
    """Count-level sampling around expected tallies (Poisson detections, binomial errors).

    Used for full-size blocks where per-pulse simulation is out of reach.
    """
    n = rng.poisson(expected.n)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(expected.n > 0, expected.m / np.where(expected.n > 0, expected.n, 1), 0.0)
    m = rng.binomial(n, np.clip(frac, 0, 1))
    sent = np.rint(expected.sent).astype(np.int64)
    sp = int(rng.poisson(expected.single_photon_z))
    return ObservedCounts(
        n, m, sent,
        int(rng.poisson(expected.double_clicks)), int(rng.poisson(expected.crosstalk_events)),
        min(sp, int(n[0].sum())), expected.block_pulses,
    )


def qber(oc: ObservedCounts) -> tuple[float, float]:
    """(QBER_Z, QBER_X) pooled over intensities."""
    out = []
    for b, name in enumerate(BASES):
        nb = float(oc.n[b].sum())
        if nb <= 0:
            raise UndefinedQBERError(f"no sifted {name}-basis detections")
        out.append(float(oc.m[b].sum()) / nb)
    return out[0], out[1]
