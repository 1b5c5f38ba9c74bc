"""Piecewise-constant propagation under the controlled TLS + two-mode Hamiltonian.

    H(t) = w1 a1^+ a1 + w2 a2^+ a2 + f_x(t) sx + f_z(t) sz
           + g1(t) (s+ a1 + s- a1^+) + g2(t) (s+ a2 + s- a2^+)

Each interval ``[k dt, (k+1) dt)`` uses sample ``k`` of every channel and is
exponentiated exactly through a Hermitian eigendecomposition.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .hilbert import (MODE1, MODE2, SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Z, TLS,
                      NumericalConsistencyError, Space, annihilation, embed,
                      is_hermitian, number_operators)

log = logging.getLogger(__name__)

CHANNELS = ("f_x", "f_z", "g1", "g2")
LEAK_WARN = 1e-6


class PulseFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Drift:
    omega1: float = 1.0
    omega2: float = 2.0

    def __post_init__(self):
        if not (math.isfinite(self.omega1) and math.isfinite(self.omega2)):
            raise ValueError("drift frequencies must be finite")

    def matrix(self, space: Space) -> np.ndarray:
        n1, n2 = number_operators(space)
        return self.omega1 * n1 + self.omega2 * n2


@dataclass
class PulseSet:
    """Samples of (f_x, f_z, g1, g2) on ``n_steps`` uniform intervals."""

    t_final: float
    samples: np.ndarray  # shape (4, n_steps)

    def __post_init__(self):
        self.samples = np.array(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(CHANNELS):
            raise ValueError(f"samples must have shape (4, n_steps), got {self.samples.shape}")
        if not self.t_final > 0 or self.n_steps < 1:
            raise ValueError("need t_final > 0 and n_steps >= 1")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("pulse samples must be finite")

    @classmethod
    def zeros(cls, t_final: float, n_steps: int) -> "PulseSet":
        return cls(t_final, np.zeros((4, n_steps)))

    @property
    def n_steps(self) -> int:
        return self.samples.shape[1]

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    def times(self) -> np.ndarray:
        """Left edges of the intervals."""
        return np.arange(self.n_steps) * self.dt

    def channel(self, name: str) -> np.ndarray:
        return self.samples[CHANNELS.index(name)]

    def copy(self) -> "PulseSet":
        return PulseSet(self.t_final, self.samples.copy())

    def refined(self, factor: int) -> "PulseSet":
        """Same pulse on a grid ``factor`` times finer (samples repeated)."""
        return PulseSet(self.t_final, np.repeat(self.samples, factor, axis=1))


@dataclass
class Trajectory:
    states: np.ndarray  # shape (n_steps + 1, D)
    leak_max: float = 0.0


def control_generators(space: Space) -> list[np.ndarray]:
    """``[sx, sz, s+ a1 + s- a1^+, s+ a2 + s- a2^+]`` on the full space."""
    sp = embed(SIGMA_PLUS, TLS, space)
    sm = embed(SIGMA_MINUS, TLS, space)
    a1 = embed(annihilation(space.cutoff1), MODE1, space)
    a2 = embed(annihilation(space.cutoff2), MODE2, space)
    return [
        embed(SIGMA_X, TLS, space),
        embed(SIGMA_Z, TLS, space),
        sp @ a1 + sm @ a1.conj().T,
        sp @ a2 + sm @ a2.conj().T,
    ]


def top_level_mask(space: Space) -> np.ndarray:
    _, n1, n2 = space.quantum_numbers()
    return (n1 == space.cutoff1 - 1) | (n2 == space.cutoff2 - 1)


def _apply_spectral(e: np.ndarray, v: np.ndarray, phase: np.ndarray, psi: np.ndarray) -> np.ndarray:
    coeff = v.conj().T @ psi
    return v @ (phase.reshape((-1,) + (1,) * (psi.ndim - 1)) * coeff)


def expm_step(h: np.ndarray, dt: float, psi: np.ndarray, sign: int = -1) -> np.ndarray:
    """``exp(sign * i h dt) psi`` for Hermitian ``h``; ``psi`` may be a column stack."""
    if not is_hermitian(h):
        raise NumericalConsistencyError("exponentiation requires a Hermitian matrix")
    e, v = np.linalg.eigh(h)
    return _apply_spectral(e, v, np.exp(sign * 1j * e * dt), np.asarray(psi, dtype=complex))


class ControlledSystem:
    """Drift plus the four control generators on a fixed space.

    All matrices here are real symmetric, so the per-interval
    eigendecompositions run on real arrays.
    """

    def __init__(self, space: Space, drift: Drift = Drift()):
        self.space = space
        self.drift = drift
        self.h0 = drift.matrix(space).real.copy()
        gens = control_generators(space)
        self.generators = np.array([g.real for g in gens])
        self._top = top_level_mask(space)

    @property
    def dim(self) -> int:
        return self.space.dim

    def hamiltonian(self, controls: np.ndarray) -> np.ndarray:
        """Real symmetric H for one set of four control values."""
        return self.h0 + np.tensordot(controls, self.generators, axes=1)

    def assemble(self, pulse: PulseSet, k: int) -> np.ndarray:
        if not 0 <= k < pulse.n_steps:
            raise IndexError(f"interval {k} outside 0..{pulse.n_steps - 1}")
        return self.hamiltonian(pulse.samples[:, k]).astype(complex)

    def eig(self, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.hamiltonian(controls))

    def leakage(self, states: np.ndarray) -> float:
        """Largest population in the top Fock level of either mode."""
        pops = np.abs(states[self._top]) ** 2
        return float(pops.sum(axis=0).max()) if pops.size else 0.0

    def propagate(self, psi0: np.ndarray, pulse: PulseSet, backward: bool = False,
                  norm_tol: float = 1e-8) -> Trajectory:
        """Store the state at every grid point.

        With ``backward=True`` the input is taken as the state at ``t_final``
        and evolved towards ``t=0`` with ``exp(+i H_k dt)``; ``states[k]`` is
        still the state at grid point ``k``.
        """
        n, dt = pulse.n_steps, pulse.dt
        states = np.empty((n + 1,) + psi0.shape, dtype=complex)
        order = range(n - 1, -1, -1) if backward else range(n)
        psi = np.asarray(psi0, dtype=complex)
        norm0 = np.linalg.norm(psi, axis=0)
        states[n if backward else 0] = psi
        leak = self.leakage(psi)
        for k in order:
            e, v = self.eig(pulse.samples[:, k])
            psi = _apply_spectral(e, v, np.exp((1j if backward else -1j) * e * dt), psi)
            states[k if backward else k + 1] = psi
            leak = max(leak, self.leakage(psi))
        drift_norm = np.max(np.abs(np.linalg.norm(states, axis=1) - norm0))
        if drift_norm > norm_tol * max(1.0, np.max(norm0)):
            raise NumericalConsistencyError(f"norm drifted by {drift_norm:.3e} during propagation")
        if leak > LEAK_WARN:
            log.warning("top Fock level population reached %.2e", leak)
        return Trajectory(states, leak)

    def build_unitary(self, pulse: PulseSet) -> np.ndarray:
        """Ordered product ``U_{n-1} ... U_1 U_0``."""
        u = np.eye(self.dim, dtype=complex)
        dt = pulse.dt
        for k in range(pulse.n_steps):
            e, v = self.eig(pulse.samples[:, k])
            u = v @ (np.exp(-1j * e * dt)[:, None] * (v.T @ u))
        err = np.max(np.abs(u.conj().T @ u - np.eye(self.dim)))
        if err > 1e-10:
            raise NumericalConsistencyError(f"propagator not unitary (max dev {err:.3e})")
        return u


# --- pulse files -------------------------------------------------------------

def write_pulse(pulse: PulseSet, path, extra: dict | None = None) -> None:
    """Plain-text CSV: ``#`` metadata header, then ``t,f_x,f_z,g1,g2`` rows."""
    buf = io.StringIO()
    buf.write(f"# t_final={pulse.t_final!r}\n")
    buf.write(f"# n_steps={pulse.n_steps}\n")
    buf.write(f"# channels={','.join(CHANNELS)}\n")
    for key, value in (extra or {}).items():
        buf.write(f"# {key}={value}\n")
    buf.write("t," + ",".join(CHANNELS) + "\n")
    for t, row in zip(pulse.times(), pulse.samples.T):
        buf.write(",".join(repr(float(x)) for x in (t, *row)) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_pulse(path) -> PulseSet:
    meta: dict[str, str] = {}
    rows: list[list[float]] = []
    header_seen = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise PulseFormatError(f"{path}:{lineno}: malformed metadata line")
                meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                if line.split(",") != ["t", *CHANNELS]:
                    raise PulseFormatError(f"{path}:{lineno}: unexpected column header {line!r}")
                header_seen = True
                continue
            fields = line.split(",")
            if len(fields) != len(CHANNELS) + 1:
                raise PulseFormatError(
                    f"{path}:{lineno}: expected {len(CHANNELS) + 1} columns, got {len(fields)}")
            try:
                rows.append([float(x) for x in fields])
            except ValueError as exc:
                raise PulseFormatError(f"{path}:{lineno}: {exc}") from None
    try:
        t_final = float(meta["t_final"])
        n_steps = int(meta["n_steps"])
    except (KeyError, ValueError) as exc:
        raise PulseFormatError(f"{path}: missing or invalid metadata {exc}") from None
    if len(rows) != n_steps:
        raise PulseFormatError(f"{path}: header says n_steps={n_steps}, found {len(rows)} rows")
    return PulseSet(t_final, np.array(rows)[:, 1:].T)
