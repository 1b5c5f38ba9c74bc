"""Truncated TLS x Fock x Fock space, its operators and named states.

Basis ordering is row-major with the TLS slowest:
``index(s, n1, n2) = s * c1 * c2 + n1 * c2 + n2``.

TLS convention: ``|0>`` is the ground/ancilla state with ``sigma_z |0> = +|0>``
and ``sigma_plus |0> = |1>``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache, wraps
from typing import Sequence

import numpy as np

TLS, MODE1, MODE2 = "tls", "mode1", "mode2"
SLOTS = (TLS, MODE1, MODE2)

NORM_TOL = 1e-10
HERMITIAN_TOL = 1e-12


class InvalidCutoffError(ValueError):
    pass


class NumericalConsistencyError(ArithmeticError):
    pass


def _frozen_cache(fn):
    """Memoize on a hashable Space and hand out read-only arrays."""
    cached = lru_cache(maxsize=64)(fn)

    @wraps(fn)
    def wrapper(*args):
        out = cached(*args)
        for arr in out if isinstance(out, tuple) else (out,):
            arr.flags.writeable = False
        return out

    return wrapper


@dataclass(frozen=True)
class Space:
    """Dimensions of the composite space TLS (x) mode1 (x) mode2."""

    cutoff1: int
    cutoff2: int
    tls_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.cutoff1 < 2 or self.cutoff2 < 2:
            raise InvalidCutoffError(
                f"cutoffs must be >= 2, got ({self.cutoff1}, {self.cutoff2})")

    @classmethod
    def for_noon(cls, n: int, headroom: int = 2) -> "Space":
        """Space with ``n + headroom`` Fock levels per mode."""
        return cls(n + headroom, n + headroom)

    @property
    def dim(self) -> int:
        return self.tls_dim * self.cutoff1 * self.cutoff2

    def slot_dim(self, slot: str) -> int:
        return {TLS: self.tls_dim, MODE1: self.cutoff1, MODE2: self.cutoff2}[slot]

    def index(self, s: int, n1: int, n2: int) -> int:
        if not (0 <= s < 2 and 0 <= n1 < self.cutoff1 and 0 <= n2 < self.cutoff2):
            raise IndexError(f"|{s},{n1},{n2}> outside space {self}")
        return (s * self.cutoff1 + n1) * self.cutoff2 + n2

    def labels(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.dim:
            raise IndexError(index)
        s, rest = divmod(index, self.cutoff1 * self.cutoff2)
        n1, n2 = divmod(rest, self.cutoff2)
        return s, n1, n2

    def quantum_numbers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arrays ``(s, n1, n2)`` over all basis indices."""
        return _quantum_numbers(self)


@_frozen_cache
def _quantum_numbers(space: Space):
    return np.unravel_index(np.arange(space.dim), (2, space.cutoff1, space.cutoff2))


@dataclass
class Ensemble:
    """Weighted mixture of pure states, ``rho = sum_k w_k |psi_k><psi_k|``."""

    weights: np.ndarray
    states: list[np.ndarray]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.states):
            raise ValueError("weights and states differ in length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > NORM_TOL:
            raise ValueError(f"invalid weights {self.weights}")
        for psi in self.states:
            check_normalized(psi)

    def __iter__(self):
        return iter(zip(self.weights, self.states))

    def __len__(self):
        return len(self.states)

    def density_matrix(self) -> np.ndarray:
        stack = np.array(self.states)
        return (stack.T * self.weights) @ stack.conj()


# --- single-subsystem operators -------------------------------------------

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# sigma_plus |0> = |1>
SIGMA_PLUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()


def annihilation(d: int) -> np.ndarray:
    """Truncated ``a`` on ``d`` Fock levels: ``a[n-1, n] = sqrt(n)``."""
    if d < 2:
        raise InvalidCutoffError(f"Fock cutoff must be >= 2, got {d}")
    return np.diag(np.sqrt(np.arange(1, d)), k=1).astype(complex)


def embed(op: np.ndarray, slot: str, space: Space) -> np.ndarray:
    """Place a single-subsystem operator into the full space."""
    if slot not in SLOTS:
        raise ValueError(f"unknown slot {slot!r}")
    op = np.asarray(op)
    d = space.slot_dim(slot)
    if op.shape != (d, d):
        raise ValueError(f"operator shape {op.shape} does not match {slot} dim {d}")
    factors = [np.eye(space.slot_dim(s)) for s in SLOTS]
    factors[SLOTS.index(slot)] = op
    return np.kron(np.kron(factors[0], factors[1]), factors[2]).astype(complex)


@_frozen_cache
def mode_operators(space: Space) -> tuple[np.ndarray, np.ndarray]:
    """Embedded ``(a1, a2)``."""
    return (embed(annihilation(space.cutoff1), MODE1, space),
            embed(annihilation(space.cutoff2), MODE2, space))


@_frozen_cache
def number_operators(space: Space) -> tuple[np.ndarray, np.ndarray]:
    _, n1, n2 = space.quantum_numbers()
    return np.diag(n1).astype(complex), np.diag(n2).astype(complex)


@_frozen_cache
def total_photon_operator(space: Space) -> np.ndarray:
    _, n1, n2 = space.quantum_numbers()
    return np.diag(n1 + n2).astype(complex)


@_frozen_cache
def tls_projector(space: Space, s: int = 0) -> np.ndarray:
    p = np.zeros((2, 2), dtype=complex)
    p[s, s] = 1
    return embed(p, TLS, space)


# --- states ----------------------------------------------------------------

def fock_state(space: Space, s: int, n1: int, n2: int) -> np.ndarray:
    psi = np.zeros(space.dim, dtype=complex)
    psi[space.index(s, n1, n2)] = 1
    return psi


def noon_state(space: Space, n: int, sign: int = 1) -> np.ndarray:
    """``|0> (|n,0> + sign |0,n>) / sqrt(2)``."""
    if n < 1:
        raise ValueError(f"NOON photon number must be >= 1, got {n}")
    if n >= min(space.cutoff1, space.cutoff2):
        raise InvalidCutoffError(f"N={n} does not fit cutoffs of {space}")
    return (fock_state(space, 0, n, 0) + sign * fock_state(space, 0, 0, n)) / np.sqrt(2)


def check_normalized(psi: np.ndarray, tol: float = NORM_TOL) -> None:
    norm = np.linalg.norm(psi)
    if abs(norm - 1) > tol:
        raise NumericalConsistencyError(f"state norm {norm!r} deviates from 1")


def is_hermitian(op: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(op - op.conj().T), initial=0.0) < tol)


def expectation(state, op: np.ndarray, hermitian: bool | None = None):
    """``<psi|O|psi>`` for a vector, or ``sum_k w_k <psi_k|O|psi_k>`` for an Ensemble.

    When ``hermitian`` is set (by default: when ``op`` is Hermitian) the
    real part is returned, after checking the imaginary part is negligible.
    """
    if isinstance(state, Ensemble):
        value = sum(w * np.vdot(psi, op @ psi) for w, psi in state)
    else:
        value = np.vdot(state, op @ state)
    if hermitian is None:
        hermitian = is_hermitian(op)
    if hermitian:
        if abs(value.imag) >= 1e-10:
            raise NumericalConsistencyError(
                f"expectation of Hermitian operator has imaginary part {value.imag!r}")
        return float(value.real)
    return complex(value)


def gram(states: Sequence[np.ndarray]) -> np.ndarray:
    m = np.array(states)
    return m.conj() @ m.T
