"""Jones-vector polarization algebra.

States live in the {H, V} basis.  Stokes convention used throughout::

    s1 = |h|^2 - |v|^2,  s2 = 2 Re(conj(h) v),  s3 = 2 Im(conj(h) v)

so that |H> -> (1, 0, 0), |+> -> (0, 1, 0) and (|H> + i|V>)/sqrt(2) -> (0, 0, 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

NORM_TOL = 1e-9


@dataclass(frozen=True)
class StokesVector:
    s1: float
    s2: float
    s3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class PolarizationState:
    """Pure polarization state ``h_amp |H> + v_amp |V>``.

    Construct with :meth:`from_amplitudes` to get a normalized state; the plain
    constructor stores the amplitudes as given so un-normalized Jones vectors can
    be carried around when needed (e.g. the raw chip output).
    """

    h_amp: complex
    v_amp: complex

    @classmethod
    def from_amplitudes(cls, h, v) -> "PolarizationState":
        n = np.sqrt(abs(h) ** 2 + abs(v) ** 2)
        if n == 0:
            raise ContractError("cannot normalize the zero Jones vector")
        return cls(complex(h / n), complex(v / n))

    @classmethod
    def from_array(cls, vec) -> "PolarizationState":
        return cls.from_amplitudes(vec[0], vec[1])

    def as_array(self) -> np.ndarray:
        return np.array([self.h_amp, self.v_amp], dtype=complex)

    @property
    def norm_sq(self) -> float:
        return abs(self.h_amp) ** 2 + abs(self.v_amp) ** 2

    def is_normalized(self, tol: float = NORM_TOL) -> bool:
        return abs(self.norm_sq - 1.0) <= tol

    def orthogonal(self) -> "PolarizationState":
        """The state orthogonal to this one (phase convention: (-v*, h*))."""
        return PolarizationState(-np.conj(self.v_amp), np.conj(self.h_amp))

    def equals_up_to_phase(self, other: "PolarizationState", tol: float = 1e-10) -> bool:
        return abs(1.0 - fidelity(self, other)) <= tol


H = PolarizationState(1.0 + 0j, 0j)
V = PolarizationState(0j, 1.0 + 0j)
PLUS = PolarizationState(1 / np.sqrt(2) + 0j, 1 / np.sqrt(2) + 0j)
MINUS = PolarizationState(1 / np.sqrt(2) + 0j, -1 / np.sqrt(2) + 0j)


def x_state(chi: float, sign: int = +1) -> PolarizationState:
    """(|H> + sign * e^{i chi} |V>)/sqrt(2)."""
    return PolarizationState(1 / np.sqrt(2) + 0j, sign * np.exp(1j * chi) / np.sqrt(2))


def _check(*states: PolarizationState) -> None:
    for s in states:
        if not s.is_normalized():
            raise ContractError(f"state not normalized (|psi|^2 = {s.norm_sq:.3e})")


def fidelity(a: PolarizationState, b: PolarizationState) -> float:
    """|<a|b>|^2 for normalized states."""
    _check(a, b)
    ov = np.conj(a.h_amp) * b.h_amp + np.conj(a.v_amp) * b.v_amp
    return float(min(1.0, abs(ov) ** 2))


def error_rate(prepared: PolarizationState, target: PolarizationState) -> float:
    """Probability that ``prepared`` is found orthogonal to ``target``.

    With ``target = V`` this is |<H|prepared>|^2, the error rate of a vertical state.
    """
    return max(0.0, 1.0 - fidelity(prepared, target))


def to_stokes(s: PolarizationState) -> StokesVector:
    _check(s)
    h, v = s.h_amp, s.v_amp
    cross = np.conj(h) * v
    return StokesVector(float(abs(h) ** 2 - abs(v) ** 2), float(2 * cross.real), float(2 * cross.imag))


def from_stokes(sv: StokesVector) -> PolarizationState:
    """Inverse of :func:`to_stokes` (global phase chosen so h is real, non-negative)."""
    n = sv.norm()
    s1, s2, s3 = sv.s1 / n, sv.s2 / n, sv.s3 / n
    theta = np.arccos(np.clip(s1, -1.0, 1.0))
    phi = np.arctan2(s3, s2)
    return PolarizationState(complex(np.cos(theta / 2)), complex(np.sin(theta / 2) * np.exp(1j * phi)))


@dataclass(frozen=True, eq=False)
class PolTransform:
    """2x2 complex Jones matrix.

    ``unitary=True`` marks lossless transforms (fibers, wave plates, EPCs); the flag
    is checked at construction.  Lossy maps such as the grating coupler leave it off.
    """

    matrix: np.ndarray
    unitary: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (2, 2):
            raise ContractError(f"Jones matrix must be 2x2, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        if self.unitary and unitarity_defect(m) > 1e-10:
            raise ContractError("transform flagged unitary but M^dagger M != I")

    @classmethod
    def identity(cls) -> "PolTransform":
        return cls(np.eye(2, dtype=complex), unitary=True)

    def __matmul__(self, other):
        if isinstance(other, PolTransform):
            return PolTransform(self.matrix @ other.matrix, unitary=self.unitary and other.unitary)
        if isinstance(other, PolarizationState):
            return self.apply(other)
        return NotImplemented

    def apply(self, s: PolarizationState) -> PolarizationState:
        """Propagate ``s``; the result is renormalized."""
        return PolarizationState.from_array(self.matrix @ s.as_array())

    def dagger(self) -> "PolTransform":
        return PolTransform(self.matrix.conj().T, unitary=self.unitary)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.matrix, compute_uv=False)


def unitarity_defect(m: np.ndarray) -> float:
    m = np.asarray(m)
    return float(np.max(np.abs(m.conj().T @ m - np.eye(2))))


def reorthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest unitary matrix (polar decomposition via SVD)."""
    u, _, vh = np.linalg.svd(m)
    return u @ vh


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """SU(2) matrix rotating Stokes vectors by ``angle`` about ``axis`` (normalized here).

    With the Stokes convention above, rotation about s1 is diag(e^{-i a/2}, e^{i a/2}).
    """
    n1, n2, n3 = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    # c I - i s (n1 sig1 + n2 sig2 + n3 sig3), Pauli matrices ordered as (s1, s2, s3)
    return np.array([
        [c - 1j * s * n1, -1j * s * n2 - s * n3],
        [-1j * s * n2 + s * n3, c + 1j * s * n1],
    ])


def rotation(axis, angle: float) -> PolTransform:
    return PolTransform(rotation_matrix(axis, angle), unitary=True)


def rotation_angle(t: PolTransform) -> float:
    """Poincare-sphere rotation angle of a unitary, ignoring global phase (in [0, pi])."""
    m = t.matrix
    det = np.linalg.det(m)
    su = m / np.sqrt(det)
    c = abs(np.trace(su).real) / 2
    return float(2 * np.arccos(np.clip(c, -1.0, 1.0)))
