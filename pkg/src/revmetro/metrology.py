"""Time-reversal phase estimation: ``psi_R = U^+ U_phi U |0,0,0>``.

``U`` maps ``|0,0,0> -> NOON+`` and ``|0,0,N_x> -> NOON-``; the phase is
read out by counting the total photon number of ``psi_R``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._io import csv_text
from .dynamics import Drift
from .hilbert import (Ensemble, InvalidCutoffError, NumericalConsistencyError, Space,
                      fock_state, gram, noon_state)
from .krotov import ControlProblem

log = logging.getLogger(__name__)

SINGULAR_THRESHOLD = 1e-3
FD_STEP = 1e-4


class SingularPointError(ArithmeticError):
    """The error-propagation ratio is 0/0 at this phase."""


def closed_control_problem(n: int, n_x: int | None = None, drift: Drift = Drift(),
                           t_final: float = 40.0, n_steps: int = 2000,
                           headroom: int = 2) -> ControlProblem:
    """The two state pairs defining the closed-system unitary."""
    n_x = n if n_x is None else n_x
    if n < 1 or n_x < 1:
        raise ValueError("need N >= 1 and N_x >= 1")
    space = Space.for_noon(max(n, n_x), headroom)
    return ControlProblem(
        space,
        [fock_state(space, 0, 0, 0), fock_state(space, 0, 0, n_x)],
        [noon_state(space, n, +1), noon_state(space, n, -1)],
        drift, t_final, n_steps)


@dataclass
class ProtocolSpec:
    n: int
    unitary: np.ndarray
    space: Space
    n_x: int | None = None
    infidelity: float = 0.0

    def __post_init__(self):
        if self.n_x is None:
            self.n_x = self.n
        if self.n < 1 or self.n_x == 0:
            raise ValueError("need N >= 1 and N_x != 0")
        if max(self.n, self.n_x) >= min(self.space.cutoff1, self.space.cutoff2):
            raise InvalidCutoffError(f"N={self.n}, N_x={self.n_x} do not fit {self.space}")
        if self.unitary.shape != (self.space.dim, self.space.dim):
            raise ValueError("unitary does not match the space")

    @property
    def vacuum(self) -> np.ndarray:
        return fock_state(self.space, 0, 0, 0)

    @property
    def resource(self) -> np.ndarray:
        """``U |0,0,0>``, ideally the NOON+ state."""
        return self.unitary @ self.vacuum


def phase_gate(space: Space, phi: float) -> np.ndarray:
    """``exp(i phi a2^+ a2)``."""
    return np.diag(phase_factors(space, phi))


def phase_factors(space: Space, phi) -> np.ndarray:
    """Diagonal of the phase gate; shape ``(D,)`` or ``(D, len(phi))``."""
    _, _, n2 = space.quantum_numbers()
    return np.exp(1j * np.multiply.outer(n2, phi))


def _complete_basis(states: Sequence[np.ndarray], dim: int,
                    rng: np.random.Generator | None) -> np.ndarray:
    """Columns: the given orthonormal states followed by a basis of their complement."""
    known = np.array(states, dtype=complex).T
    extra = np.eye(dim, dtype=complex)
    if rng is not None:
        extra = extra @ np.linalg.qr(rng.standard_normal((dim, dim))
                                     + 1j * rng.standard_normal((dim, dim)))[0]
    projected = extra - known @ (known.conj().T @ extra)
    # the projected columns span the complement, whose rank is dim - len(states)
    u = np.linalg.svd(projected)[0]
    return np.hstack([known, u[:, : dim - known.shape[1]]])


def exact_completion_unitary(initial: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                             seed: int | None = None) -> np.ndarray:
    """A unitary with ``U |initial_j> = |target_j>`` exactly.

    The orthogonal complements are matched arbitrarily; ``seed`` picks a
    different (random) matching, giving a different valid completion.
    """
    for name, states in (("initial", initial), ("target", targets)):
        dev = np.max(np.abs(gram(states) - np.eye(len(states))))
        if dev > 1e-10:
            raise ValueError(f"{name} states are not orthonormal (max Gram deviation {dev:.2e})")
    dim = len(initial[0])
    rng = np.random.default_rng(seed) if seed is not None else None
    b_init = _complete_basis(initial, dim, None)
    b_tgt = _complete_basis(targets, dim, rng)
    u = b_tgt @ b_init.conj().T
    err = np.max(np.abs(u.conj().T @ u - np.eye(dim)))
    if err > 1e-12:
        raise NumericalConsistencyError(f"completion not unitary (max dev {err:.2e})")
    return u


def exact_protocol(n: int, n_x: int | None = None, headroom: int = 2,
                   seed: int | None = None) -> ProtocolSpec:
    problem = closed_control_problem(n, n_x, headroom=headroom)
    u = exact_completion_unitary(problem.initial, problem.targets, seed)
    return ProtocolSpec(n, u, problem.space, n_x)


def protocol_states(spec: ProtocolSpec, phi) -> np.ndarray:
    """``psi_R`` for one phase (shape ``(D,)``) or many (shape ``(D, P)``)."""
    return spec.unitary.conj().T @ (phase_factors(spec.space, phi) * _bcast(spec.resource, phi))


def protocol_derivatives(spec: ProtocolSpec, phi) -> np.ndarray:
    """``d psi_R / d phi = U^+ (i n2) U_phi U |0,0,0>``."""
    _, _, n2 = spec.space.quantum_numbers()
    shifted = 1j * _bcast(n2, phi) * phase_factors(spec.space, phi) * _bcast(spec.resource, phi)
    return spec.unitary.conj().T @ shifted


def _bcast(vec: np.ndarray, phi) -> np.ndarray:
    return vec if np.ndim(phi) == 0 else vec[:, None]


def run_protocol(spec: ProtocolSpec, phi: float) -> np.ndarray:
    return protocol_states(spec, float(phi))


def photon_distribution(space: Space, state) -> tuple[np.ndarray, np.ndarray]:
    """Total-photon-number values and their probabilities.

    ``state`` may be a vector, a ``(D, P)`` stack of vectors, or an Ensemble.
    """
    _, n1, n2 = space.quantum_numbers()
    if isinstance(state, Ensemble):
        pops = sum(w * np.abs(psi) ** 2 for w, psi in state)
    else:
        pops = np.abs(state) ** 2
    return (n1 + n2).astype(float), pops


def photon_stats(space: Space, state) -> tuple:
    """``(<N>, <N^2>)`` for the total photon number."""
    n, pops = photon_distribution(space, state)
    mean = np.tensordot(n, pops, axes=1)
    mean2 = np.tensordot(n ** 2, pops, axes=1)
    return mean, mean2


def photon_variance(space: Space, state):
    """``<N^2> - <N>^2``, accumulated about the mean to avoid cancellation."""
    n, pops = photon_distribution(space, state)
    mean = np.tensordot(n, pops, axes=1)
    dev = n[:, None] - mean if np.ndim(mean) else n - mean
    return np.sum(pops * dev ** 2, axis=0)


def is_singular(n: int, phi, threshold: float = SINGULAR_THRESHOLD):
    return np.abs(np.sin(n * np.asarray(phi))) < threshold


def error_propagation(mean_fn: Callable, variance: float, phi: float, h: float = FD_STEP) -> float:
    """``Delta N / |d<N>/dphi|`` with a central difference of ``mean_fn``."""
    slope = (mean_fn(phi + h) - mean_fn(phi - h)) / (2 * h)
    return float(np.sqrt(max(variance, 0.0)) / abs(slope))


def uncertainty(spec: ProtocolSpec, phi: float, h: float = FD_STEP,
                threshold: float = SINGULAR_THRESHOLD) -> float:
    """Photon-counting phase uncertainty at ``phi``.

    Raises :class:`SingularPointError` where ``|sin(N phi)| < threshold``.
    """
    if is_singular(spec.n, phi, threshold):
        raise SingularPointError(f"phi={phi!r} is a 0/0 point for N={spec.n}")

    def mean(p):
        return photon_stats(spec.space, protocol_states(spec, p))[0]

    return error_propagation(mean, photon_variance(spec.space, protocol_states(spec, phi)), phi, h)


def pure_state_fisher(psi: np.ndarray, dpsi: np.ndarray):
    """``4 (<dpsi|dpsi> - |<dpsi|psi>|^2)``, columnwise for stacks."""
    nn = np.sum(np.abs(dpsi) ** 2, axis=0)
    ov = np.sum(dpsi.conj() * psi, axis=0)
    return 4 * (nn - np.abs(ov) ** 2)


def fisher_pure(spec: ProtocolSpec, phi):
    return pure_state_fisher(protocol_states(spec, phi), protocol_derivatives(spec, phi))


@dataclass
class SweepResult:
    n: int
    phi: np.ndarray
    mean_N: np.ndarray
    mean_N2: np.ndarray
    delta_phi: np.ndarray
    fisher: np.ndarray
    excluded: np.ndarray
    delta_phi_closed: np.ndarray | None = None
    infidelity: float = 0.0

    @property
    def inv_delta_phi(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return 1.0 / self.delta_phi

    def kept_inverse(self) -> np.ndarray:
        return self.inv_delta_phi[~self.excluded]

    def summary(self) -> dict:
        inv = self.kept_inverse()
        return {
            "N": self.n,
            "n_points": int(len(self.phi)),
            "n_excluded": int(self.excluded.sum()),
            "infidelity": float(self.infidelity),
            "fisher_min": float(self.fisher.min()),
            "fisher_max": float(self.fisher.max()),
            "fisher_mean": float(self.fisher.mean()),
            "inv_delta_phi_max": float(inv.max()) if inv.size else float("nan"),
            "inv_delta_phi_median": float(np.median(inv)) if inv.size else float("nan"),
            "inv_delta_phi_mean": float(inv.mean()) if inv.size else float("nan"),
        }

    def to_csv(self) -> str:
        header = ["phi", "mean_N", "mean_N2", "delta_phi", "inv_delta_phi", "fisher", "excluded"]
        cols = [self.phi, self.mean_N, self.mean_N2, self.delta_phi, self.inv_delta_phi,
                self.fisher, self.excluded]
        if self.delta_phi_closed is not None:
            header.append("delta_phi_closed")
            cols.append(self.delta_phi_closed)
        rows = [[c[i].item() for c in cols] for i in range(len(self.phi))]
        return csv_text(header, rows)


def phase_grid(n_points: int) -> np.ndarray:
    if n_points < 2:
        raise ValueError("need at least two phase points")
    return np.linspace(-np.pi, np.pi, n_points, endpoint=False)


def closed_form_uncertainty(n: int, n_x: int, phi: np.ndarray) -> np.ndarray:
    """Uncertainty from the analytic photon statistics of the ideal protocol."""
    s = np.sin(n * phi / 2) ** 2
    var = n_x ** 2 * s - (n_x * s) ** 2
    slope = n_x * n / 2 * np.sin(n * phi)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.maximum(var, 0)) / np.abs(slope)


def sweep(spec: ProtocolSpec, n_points: int = 6000, h: float = FD_STEP,
          threshold: float = SINGULAR_THRESHOLD, closed_form: bool = False) -> SweepResult:
    """Statistics, uncertainty and Fisher information on a uniform grid over [-pi, pi)."""
    phi = phase_grid(n_points)
    states = protocol_states(spec, phi)
    mean, mean2 = photon_stats(spec.space, states)
    var = photon_variance(spec.space, states)
    plus = photon_stats(spec.space, protocol_states(spec, phi + h))[0]
    minus = photon_stats(spec.space, protocol_states(spec, phi - h))[0]
    slope = (plus - minus) / (2 * h)
    excluded = is_singular(spec.n, phi, threshold)
    delta = np.full(n_points, np.nan)
    delta[~excluded] = np.sqrt(np.maximum(var[~excluded], 0)) / np.abs(slope[~excluded])
    closed = None
    if closed_form:
        closed = np.where(excluded, np.nan, closed_form_uncertainty(spec.n, spec.n_x, phi))
    return SweepResult(spec.n, phi, mean, mean2, delta, fisher_pure(spec, phi), excluded,
                       closed, spec.infidelity)


@dataclass
class ScalingFit:
    ns: list[int]
    slopes: dict[str, float] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"N": list(self.ns), "slopes": dict(self.slopes), "residuals": dict(self.residuals)}


def _slope_through_origin(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    coef, res, *_ = np.linalg.lstsq(x[:, None], y, rcond=None)
    rms = float(np.sqrt(np.mean((y - coef[0] * x) ** 2)))
    return float(coef[0]), rms


def scaling_fit(results: Sequence[SweepResult]) -> ScalingFit:
    """Least-squares slopes of max/median/mean ``1/dphi`` vs N and of mean F vs N^2."""
    if len(results) < 2:
        raise ValueError("need sweeps for at least two values of N")
    ns = np.array([r.n for r in results], dtype=float)
    fit = ScalingFit([r.n for r in results])
    stats = {
        "max": [r.kept_inverse().max() for r in results],
        "median": [np.median(r.kept_inverse()) for r in results],
        "mean": [r.kept_inverse().mean() for r in results],
    }
    for key, vals in stats.items():
        fit.slopes[key], fit.residuals[key] = _slope_through_origin(ns, np.array(vals))
    fit.slopes["fisher_vs_N2"], fit.residuals["fisher_vs_N2"] = _slope_through_origin(
        ns ** 2, np.array([r.fisher.mean() for r in results]))
    return fit
