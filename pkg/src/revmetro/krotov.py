"""First-order Krotov optimization of state-to-state mappings.

The functional is ``J_T = 1 - sum_k |<target_k|phi_k(T)>|^2 / N_c``, which is
concave in the states, so the first-order update with immediate feedback is
monotone for small enough steps.

Pulses are piecewise constant, and the derivative of each interval
propagator with respect to a control sample is evaluated exactly in the
eigenbasis of that interval's Hamiltonian. The update integrand at interval
``k`` is therefore

    I_l[k] = Re <chi(t_{k+1})| dU_k/dc_l |phi(t_k)> / dt
           = -(1 / 2 dt) dJ_T/dc_l[k],

which reduces to ``Im <chi|G_l|phi>`` as ``dt -> 0``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .dynamics import CHANNELS, ControlledSystem, Drift, PulseSet, Trajectory
from .hilbert import Space, gram

log = logging.getLogger(__name__)


class ProblemError(ValueError):
    pass


class MonotonicityError(RuntimeError):
    pass


@dataclass
class ControlProblem:
    space: Space
    initial: list[np.ndarray]
    targets: list[np.ndarray]
    drift: Drift = field(default_factory=Drift)
    t_final: float = 40.0
    n_steps: int = 2000

    def __post_init__(self):
        if len(self.initial) != len(self.targets) or not self.initial:
            raise ProblemError("need equally many (and at least one) initial and target states")
        for name, states in (("initial", self.initial), ("target", self.targets)):
            dev = np.max(np.abs(gram(states) - np.eye(len(states))))
            if dev > 1e-10:
                raise ProblemError(f"{name} states are not orthonormal (max Gram deviation {dev:.2e})")

    @property
    def n_pairs(self) -> int:
        return len(self.initial)


@dataclass
class KrotovConfig:
    lambda_a: float | Sequence[float] = 0.1
    ramp_fraction: float = 0.05
    max_iters: int = 5000
    target_infidelity: float = 1e-3
    guess_amplitude: float = 0.1
    guess_fx: float = 0.2
    guess_seed: int | None = None
    guess_noise: float = 0.01
    monotonic_tol: float = 1e-10
    min_update: float = 1e-9
    active_channels: tuple[str, ...] = CHANNELS

    def __post_init__(self):
        lam = np.broadcast_to(np.asarray(self.lambda_a, dtype=float), (len(CHANNELS),))
        if np.any(lam <= 0):
            raise ValueError("lambda_a must be positive")
        if not 0 < self.ramp_fraction < 0.5:
            raise ValueError("ramp_fraction must lie in (0, 0.5)")
        if not 0 < self.target_infidelity < 1:
            raise ValueError("target_infidelity must lie in (0, 1)")
        unknown = set(self.active_channels) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")

    @property
    def lambdas(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.lambda_a, dtype=float), (len(CHANNELS),)).copy()

    @property
    def step_factors(self) -> np.ndarray:
        """``1 / lambda_a`` per channel, zero for frozen channels."""
        mask = np.array([c in self.active_channels for c in CHANNELS], dtype=float)
        return mask / self.lambdas


@dataclass
class OptimizationRecord:
    iterations: list[tuple[int, float, float]]
    final_pulse: PulseSet
    converged: bool
    runtime: float = 0.0

    @property
    def final_infidelity(self) -> float:
        return self.iterations[-1][1]

    def history_csv(self) -> str:
        lines = ["iter,J_T,max_update"]
        lines += [f"{i},{j:.17g},{u:.17g}" for i, j, u in self.iterations]
        return "\n".join(lines) + "\n"


def shape_function(r: float, t, t_final: float):
    """Update envelope: sin^2 ramps of length ``r * t_final`` around a flat top."""
    if not 0 < r < 0.5:
        raise ValueError("ramp fraction must lie in (0, 0.5)")
    t = np.asarray(t, dtype=float)
    ramp = r * t_final
    s = np.ones_like(t)
    up = t < ramp
    down = t > t_final - ramp
    s[up] = np.sin(0.5 * np.pi * t[up] / ramp) ** 2
    s[down] = np.sin(0.5 * np.pi * (t_final - t[down]) / ramp) ** 2
    s[(t <= 0) | (t >= t_final)] = 0.0
    return s if s.ndim else float(s)


def interval_shape(r: float, pulse: PulseSet) -> np.ndarray:
    """Shape function at interval midpoints."""
    return shape_function(r, pulse.times() + 0.5 * pulse.dt, pulse.t_final)


def guess_pulse(problem: ControlProblem, config: KrotovConfig) -> PulseSet:
    pulse = PulseSet.zeros(problem.t_final, problem.n_steps)
    env = interval_shape(config.ramp_fraction, pulse)
    t = pulse.times() + 0.5 * pulse.dt
    # f_x must be nonzero: with f_x = 0 the vacuum is dark and pair-1 gradients vanish
    pulse.samples[0] = config.guess_fx * env
    # couplings oscillate at the mode frequencies so the guess exchanges excitations
    pulse.samples[2] = config.guess_amplitude * env * np.cos(problem.drift.omega1 * t)
    pulse.samples[3] = config.guess_amplitude * env * np.cos(problem.drift.omega2 * t)
    if config.guess_seed is not None:
        rng = np.random.default_rng(config.guess_seed)
        pulse.samples += config.guess_noise * env * rng.standard_normal(pulse.samples.shape)
    return pulse


def overlaps(evolved: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([np.vdot(t, e) for e, t in zip(evolved, targets)])


def infidelity(evolved: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    if len(evolved) != len(targets):
        raise ValueError("evolved and target lists differ in length")
    tau = overlaps(evolved, targets)
    return float(1.0 - np.sum(np.abs(tau) ** 2) / len(targets))


def terminal_costate(evolved: np.ndarray, target: np.ndarray, n_pairs: int) -> np.ndarray:
    """``-dJ_T/d<phi_k(T)| = <target|phi_k(T)> |target> / N_c`` (not renormalized)."""
    return np.vdot(target, evolved) / n_pairs * np.asarray(target, dtype=complex)


def backward_propagate(system: ControlledSystem, costate_final: np.ndarray,
                       pulse: PulseSet) -> Trajectory:
    """Co-states at every grid point, evolved from ``t_final`` back to 0."""
    return system.propagate(costate_final, pulse, backward=True)


def divided_differences(energies: np.ndarray, dt: float) -> np.ndarray:
    """``F_ab`` with ``d exp(-i H dt) = V ((V^T dH V) * F) V^T``."""
    return _kernels.divided_differences(np.asarray(energies, dtype=float), dt)


class _Spectra:
    """Per-interval eigendecompositions for the current pulse."""

    def __init__(self, system: ControlledSystem, pulse: PulseSet):
        self.energies, self.vectors = _kernels.spectra(system.h0, system.generators,
                                                       np.ascontiguousarray(pulse.samples))


def _stack(states: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.array(states, dtype=complex).T)


def _gens_sparse(system: ControlledSystem):
    """``(owner, rows, cols, vals)`` of the nonzero generator entries."""
    gens = system.generators
    owner, rows, cols = np.nonzero(gens)
    vals = gens[owner, rows, cols]
    # one explicit zero per channel keeps the channel count even for empty generators
    pad = np.arange(len(gens))
    zero = np.zeros(len(gens), dtype=np.int64)
    return (np.concatenate([pad, owner]).astype(np.int64),
            np.concatenate([zero, rows]).astype(np.int64),
            np.concatenate([zero, cols]).astype(np.int64),
            np.concatenate([np.zeros(len(gens)), vals]))


def gradient_integrand(system: ControlledSystem, pulse: PulseSet,
                       problem: ControlProblem) -> np.ndarray:
    """Update integrand ``I[l, k]`` for a frozen pulse, shape ``(4, n_steps)``.

    For a frozen pulse ``dJ_T/dc_l[k] = -2 dt I[l, k]`` exactly.
    """
    spectra = _Spectra(system, pulse)
    dt = pulse.dt
    phi = _stack(problem.initial)
    final = _kernels.forward(spectra.energies, spectra.vectors, phi, dt)
    chi_t = _stack([terminal_costate(final[:, j], t, problem.n_pairs)
                    for j, t in enumerate(problem.targets)])
    chi = _kernels.backward(spectra.energies, spectra.vectors, chi_t, dt)
    return _kernels.gradient(_gens_sparse(system), spectra.energies, spectra.vectors, chi, phi, dt)


def krotov_update(system: ControlledSystem, pulse: PulseSet, costates: np.ndarray,
                  initial: np.ndarray, config: KrotovConfig,
                  spectra: _Spectra | None = None) -> tuple[PulseSet, np.ndarray, float]:
    """One sequential sweep of the update.

    ``costates`` has shape ``(n_steps + 1, D, N_c)`` and comes from the
    previous pulse; ``initial`` is the ``(D, N_c)`` stack of initial states.
    Forward states at interval ``k`` already feel the updated samples
    ``0..k-1``. Returns the new pulse, the final forward states and the
    largest absolute sample change. ``spectra`` is updated in place.
    """
    if spectra is None:
        spectra = _Spectra(system, pulse)
    new = pulse.copy()
    shape = interval_shape(config.ramp_fraction, pulse)
    phi, max_update = _kernels.sweep(
        system.h0, system.generators, _gens_sparse(system), new.samples,
        spectra.energies, spectra.vectors, np.ascontiguousarray(costates, dtype=complex),
        np.ascontiguousarray(initial, dtype=complex), shape, config.step_factors, pulse.dt)
    return new, phi, max_update


def optimize(problem: ControlProblem, config: KrotovConfig = KrotovConfig(),
             guess: PulseSet | None = None,
             callback: Callable[[int, float, float], None] | None = None) -> OptimizationRecord:
    """Iterate backward co-states / sequential update until converged.

    Stops when ``J_T <= target_infidelity``, when the largest pulse change
    falls below ``min_update`` or after ``max_iters`` iterations. An increase
    of ``J_T`` beyond ``monotonic_tol`` aborts with :class:`MonotonicityError`.
    """
    start = time.perf_counter()
    system = ControlledSystem(problem.space, problem.drift)
    pulse = guess.copy() if guess is not None else guess_pulse(problem, config)
    if pulse.n_steps != problem.n_steps or not math.isclose(pulse.t_final, problem.t_final):
        raise ProblemError("guess pulse grid does not match the problem")
    dt = pulse.dt
    spectra = _Spectra(system, pulse)
    init = _stack(problem.initial)
    tgt = _stack(problem.targets)
    phi_t = _kernels.forward(spectra.energies, spectra.vectors, init, dt)

    def jt(phi):
        tau = np.einsum("dk,dk->k", tgt.conj(), phi)
        return float(1.0 - np.sum(np.abs(tau) ** 2) / problem.n_pairs), tau

    j, tau = jt(phi_t)
    history = [(0, j, 0.0)]
    if callback:
        callback(0, j, 0.0)
    converged = j <= config.target_infidelity
    it = 0
    while not converged and it < config.max_iters:
        it += 1
        chi_t = tgt * (tau / problem.n_pairs)[None, :]
        chi = _kernels.backward(spectra.energies, spectra.vectors, chi_t, dt)
        pulse, phi_t, max_update = krotov_update(system, pulse, chi, init, config, spectra)
        j_new, tau = jt(phi_t)
        history.append((it, j_new, max_update))
        if callback:
            callback(it, j_new, max_update)
        if j_new > j + config.monotonic_tol:
            raise MonotonicityError(
                f"J_T rose from {j:.6e} to {j_new:.6e} at iteration {it}; "
                "increase lambda_a or refine the time grid")
        j = j_new
        if j <= config.target_infidelity:
            converged = True
        elif max_update < config.min_update:
            log.info("stagnated at iteration %d (max update %.2e)", it, max_update)
            break
    return OptimizationRecord(history, pulse, converged, time.perf_counter() - start)
