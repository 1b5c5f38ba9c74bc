"""Photon loss during phase acquisition, unraveled to first order in quantum jumps.

Loss operators are ``L_j = lambda_j a_j``. Over a short window ``dt`` a pure
state ``xi`` becomes the mixture

    p0 |chi0><chi0| + p1 |chi1><chi1| + p2 |chi2><chi2|,
    p_j = dt <xi|L_j^+ L_j|xi>,   chi_j ~ a_j xi,   chi0 ~ (1 - i H_eff dt) xi,

with at most one photon lost. With the adapted four-pair unitary, the
one-photon-loss branches are reversed into the TLS-excited sector, where a
projective measurement of the TLS discards them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._io import csv_text
from .dynamics import Drift
from .hilbert import (Ensemble, InvalidCutoffError, Space, expectation, fock_state,
                      mode_operators, noon_state, number_operators, tls_projector)
from .krotov import ControlProblem
from .metrology import (FD_STEP, SINGULAR_THRESHOLD, ProtocolSpec, SingularPointError,
                        exact_completion_unitary, is_singular, phase_factors, phase_grid,
                        photon_stats)

log = logging.getLogger(__name__)

MAX_JUMP_PROBABILITY = 0.1
SUPPORT_THRESHOLD = 1e-12
ORTHOGONALITY_TOL = 1e-10


class LossValidityError(ValueError):
    pass


class PostSelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Either fixed branch probabilities or rates plus an acquisition window.

    With fixed probabilities the no-jump branch keeps the state unchanged,
    which is exact for a NOON state under equal rates.
    """

    p0: float | None = None
    p1: float | None = None
    p2: float | None = None
    lambda1: float | None = None
    lambda2: float | None = None
    dt: float | None = None

    def __post_init__(self):
        probs = (self.p0, self.p1, self.p2)
        rates = (self.lambda1, self.lambda2, self.dt)
        if all(p is not None for p in probs) == all(r is not None for r in rates):
            raise LossValidityError("give exactly one of (p0, p1, p2) or (lambda1, lambda2, dt)")
        if self.direct:
            if min(probs) < 0 or abs(sum(probs) - 1) > 1e-12:
                raise LossValidityError(f"invalid probabilities {probs}")
        elif self.dt <= 0:
            raise LossValidityError("dt must be positive")

    @classmethod
    def probabilities(cls, p0: float, p1: float, p2: float) -> "LossSpec":
        return cls(p0=p0, p1=p1, p2=p2)

    @classmethod
    def rates(cls, lambda1: float, lambda2: float, dt: float) -> "LossSpec":
        return cls(lambda1=lambda1, lambda2=lambda2, dt=dt)

    @property
    def direct(self) -> bool:
        return self.p0 is not None


def effective_hamiltonian(space: Space, lambda1: float, lambda2: float) -> np.ndarray:
    """``-(i/2) sum_j L_j^+ L_j``."""
    n1, n2 = number_operators(space)
    return -0.5j * (lambda1 ** 2 * n1 + lambda2 ** 2 * n2)


def _branches(space: Space, loss: LossSpec) -> list[tuple[np.ndarray, float | None]]:
    """Branch operators ``B_j`` and their fixed weights (``None`` = state dependent)."""
    a1, a2 = mode_operators(space)
    if loss.direct:
        return [(np.eye(space.dim, dtype=complex), loss.p0), (a1, loss.p1), (a2, loss.p2)]
    k0 = np.eye(space.dim) - 1j * effective_hamiltonian(space, loss.lambda1, loss.lambda2) * loss.dt
    return [(k0, None), (a1, None), (a2, None)]


def jump_probabilities(state: np.ndarray, loss: LossSpec, space: Space) -> tuple[float, float, float]:
    if loss.direct:
        return loss.p0, loss.p1, loss.p2
    n1, n2 = number_operators(space)
    p1 = loss.dt * loss.lambda1 ** 2 * expectation(state, n1, hermitian=True)
    p2 = loss.dt * loss.lambda2 ** 2 * expectation(state, n2, hermitian=True)
    if max(p1, p2) > MAX_JUMP_PROBABILITY:
        raise LossValidityError(
            f"jump probabilities ({p1:.3g}, {p2:.3g}) exceed {MAX_JUMP_PROBABILITY}; "
            "use a smaller dt for the first-order expansion")
    return 1.0 - p1 - p2, p1, p2


def _decompose(state: np.ndarray, loss: LossSpec, space: Space):
    """``(weights, normalized states, branch operators, norms)``, zero-weight branches dropped."""
    weights = jump_probabilities(state, loss, space)
    out = ([], [], [], [])
    for (op, _), w in zip(_branches(space, loss), weights):
        if w <= 0:
            continue
        vec = op @ state
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise LossValidityError("positive branch weight on a state the loss operator annihilates")
        for bucket, item in zip(out, (w, vec / norm, op, norm)):
            bucket.append(item)
    return out


def jump_decompose(state: np.ndarray, loss: LossSpec, space: Space) -> Ensemble:
    """No-jump and single-jump branches of ``state`` after the loss window."""
    weights, states, _, _ = _decompose(state, loss, space)
    return Ensemble(np.array(weights), states)


def lindblad_euler_oracle(state: np.ndarray, loss: LossSpec, space: Space) -> np.ndarray:
    """``rho + dt * D[rho]`` for the loss dissipator (rates form only)."""
    if loss.direct:
        raise LossValidityError("the Lindblad oracle needs rates and dt")
    rho = np.outer(state, state.conj())
    a1, a2 = mode_operators(space)
    out = rho.copy()
    for lam, a in ((loss.lambda1, a1), (loss.lambda2, a2)):
        l_op = lam * a
        ll = l_op.conj().T @ l_op
        out += loss.dt * (l_op @ rho @ l_op.conj().T - 0.5 * (ll @ rho + rho @ ll))
    return out


# --- adapted protocol ---------------------------------------------------------

def adapted_control_problem(n: int, drift: Drift = Drift(), t_final: float = 40.0,
                            n_steps: int = 2000, headroom: int = 2) -> ControlProblem:
    """Closed-system pairs plus ``|1,N,0> -> |0,N-1,0>`` and ``|1,0,N> -> |0,0,N-1>``."""
    if n < 1:
        raise ValueError("need N >= 1")
    if headroom < 1:
        raise InvalidCutoffError("the adapted pairs need at least N+1 Fock levels")
    space = Space.for_noon(n, headroom)
    initial = [fock_state(space, 0, 0, 0), fock_state(space, 0, 0, n),
               fock_state(space, 1, n, 0), fock_state(space, 1, 0, n)]
    targets = [noon_state(space, n, +1), noon_state(space, n, -1),
               fock_state(space, 0, n - 1, 0), fock_state(space, 0, 0, n - 1)]
    return ControlProblem(space, initial, targets, drift, t_final, n_steps)


def exact_adapted_protocol(n: int, headroom: int = 2, seed: int | None = None) -> ProtocolSpec:
    problem = adapted_control_problem(n, headroom=headroom)
    u = exact_completion_unitary(problem.initial, problem.targets, seed)
    return ProtocolSpec(n, u, problem.space, n)


def _acquired(spec: ProtocolSpec, phi: float) -> np.ndarray:
    return phase_factors(spec.space, phi) * spec.resource


def decayed_protocol(spec: ProtocolSpec, loss: LossSpec, phi: float) -> Ensemble:
    """``U^+ rho_phi U`` where ``rho_phi`` is the lossy state after phase acquisition."""
    ens = jump_decompose(_acquired(spec, phi), loss, spec.space)
    udag = spec.unitary.conj().T
    return Ensemble(ens.weights, [udag @ psi for psi in ens.states])


def _decayed_with_derivatives(spec: ProtocolSpec, loss: LossSpec, phi: float):
    """Components of the reversed mixture and their phase derivatives.

    The branch norms do not depend on phi because the branch operators are
    diagonal in or shift the Fock basis, both commuting with the phase gate
    up to a phase, so each component differentiates linearly.
    """
    acquired = _acquired(spec, phi)
    weights, _, ops, norms = _decompose(acquired, loss, spec.space)
    _, _, n2 = spec.space.quantum_numbers()
    udag = spec.unitary.conj().T
    states = [udag @ (op @ acquired) / c for op, c in zip(ops, norms)]
    derivs = [udag @ (op @ (1j * n2 * acquired)) / c for op, c in zip(ops, norms)]
    return np.array(weights), states, derivs


def fisher_components(weights, states, derivs, weight_derivs=None) -> float:
    """Mixed-state Fisher information from an orthonormal eigen-decomposition.

    Sums over the support (weights above ``SUPPORT_THRESHOLD``) of

        (d w_i)^2 / w_i + 4 w_i <d i|d i> - sum_j 8 w_i w_j / (w_i + w_j) |<d i|j>|^2.
    """
    w = np.asarray(weights, dtype=float)
    dw = np.zeros_like(w) if weight_derivs is None else np.asarray(weight_derivs, dtype=float)
    support = np.flatnonzero(w > SUPPORT_THRESHOLD)
    f = 0.0
    for i in support:
        f += dw[i] ** 2 / w[i] + 4 * w[i] * np.vdot(derivs[i], derivs[i]).real
        for j in support:
            f -= 8 * w[i] * w[j] / (w[i] + w[j]) * abs(np.vdot(derivs[i], states[j])) ** 2
    return float(f)


def fisher_sld_dense(rho_fn: Callable[[float], np.ndarray], phi: float, h: float = FD_STEP) -> float:
    """``sum_ij 2 |<i|d rho|j>|^2 / (l_i + l_j)`` with a central-difference ``d rho``."""
    rho = rho_fn(phi)
    drho = (rho_fn(phi + h) - rho_fn(phi - h)) / (2 * h)
    evals, evecs = np.linalg.eigh(rho)
    d = evecs.conj().T @ drho @ evecs
    denom = evals[:, None] + evals[None, :]
    keep = denom > SUPPORT_THRESHOLD
    return float(np.sum(2 * np.abs(d[keep]) ** 2 / denom[keep]))


def _components_orthonormal(states) -> bool:
    m = np.array(states)
    return bool(np.max(np.abs(m.conj() @ m.T - np.eye(len(states)))) < ORTHOGONALITY_TOL)


def fisher_mixed(spec: ProtocolSpec, loss: LossSpec, phi: float) -> float:
    """Fisher information of the reversed lossy mixture at ``phi``.

    Uses the analytic component form when the components are orthonormal,
    otherwise falls back to the dense symmetric-logarithmic-derivative form.
    """
    weights, states, derivs = _decayed_with_derivatives(spec, loss, phi)
    if loss.direct and _components_orthonormal(states):
        return fisher_components(weights, states, derivs)
    log.debug("mixture components not orthonormal at phi=%r; using dense SLD form", phi)
    return fisher_sld_dense(lambda p: decayed_protocol(spec, loss, p).density_matrix(), phi)


def povm_select(ensemble: Ensemble, space: Space) -> tuple[float, Ensemble]:
    """Project onto TLS ``|0>`` and renormalize; returns ``(success probability, state)``."""
    m0 = tls_projector(space, 0)
    weights, states = [], []
    for w, psi in ensemble:
        kept = m0 @ psi
        norm2 = np.vdot(kept, kept).real
        if w * norm2 > 0:
            weights.append(w * norm2)
            states.append(kept / np.sqrt(norm2))
    success = float(sum(weights))
    if success <= 1e-15:
        raise PostSelectionError("TLS never found in |0>; no measurement record possible")
    return success, Ensemble(np.array(weights) / success, states)


def counting_statistics(space: Space, weights, states, derivs,
                        projector: np.ndarray | None = None) -> tuple[float, float, float, float]:
    """Photon counting on a mixture with phase-independent weights.

    Returns ``(retained probability, <N>, Var N, d<N>/dphi)``, conditioned on
    ``projector`` when one is given. The slope is exact, built from the
    component derivatives.
    """
    _, n1, n2 = space.quantum_numbers()
    n_tot = (n1 + n2).astype(float)
    prob = mean_w = dprob = dmean_w = 0.0
    pops = np.zeros(space.dim)
    for w, psi, dpsi in zip(weights, states, derivs):
        if projector is not None:
            psi, dpsi = projector @ psi, projector @ dpsi
        amp2 = np.abs(psi) ** 2
        pops += w * amp2
        prob += w * amp2.sum()
        mean_w += w * np.dot(n_tot, amp2)
        cross = 2 * (psi.conj() * dpsi).real
        dprob += w * cross.sum()
        dmean_w += w * np.dot(n_tot, cross)
    mean = mean_w / prob
    var = float(np.dot(pops / prob, (n_tot - mean) ** 2))
    slope = (dmean_w * prob - mean_w * dprob) / prob ** 2
    return float(prob), float(mean), var, float(slope)


def loss_photon_stats_and_uncertainty(spec: ProtocolSpec, loss: LossSpec, phi: float,
                                      threshold: float = SINGULAR_THRESHOLD) -> tuple[float, float]:
    """``(<N>, dphi)`` on the reversed mixture, without post-selection."""
    if is_singular(spec.n, phi, threshold):
        raise SingularPointError(f"phi={phi!r} is a 0/0 point for N={spec.n}")
    _, mean, var, slope = counting_statistics(spec.space, *_decayed_with_derivatives(spec, loss, phi))
    return mean, float(np.sqrt(max(var, 0.0)) / abs(slope))


def recovered_uncertainty(spec: ProtocolSpec, loss: LossSpec, phi: float,
                          threshold: float = SINGULAR_THRESHOLD) -> tuple[float, float]:
    """``(success probability, dphi)`` after post-selecting TLS ``|0>``."""
    if is_singular(spec.n, phi, threshold):
        raise SingularPointError(f"phi={phi!r} is a 0/0 point for N={spec.n}")
    success, _, var, slope = counting_statistics(
        spec.space, *_decayed_with_derivatives(spec, loss, phi), projector=tls_projector(spec.space, 0))
    if success <= 1e-15:
        raise PostSelectionError("TLS never found in |0>; no measurement record possible")
    return success, float(np.sqrt(max(var, 0.0)) / abs(slope))


def analytic_loss_uncertainty(n: int, p0: float, phi):
    """``sqrt((2 - p0 (1 + cos N phi)) / (N^2 p0 (1 - cos N phi)))``."""
    c = np.cos(n * np.asarray(phi))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt((2 - p0 * (1 + c)) / (n ** 2 * p0 * (1 - c)))


@dataclass
class LossSweepResult:
    n: int
    p0: float
    phi: np.ndarray
    mean_N: np.ndarray
    delta_phi_sim: np.ndarray
    delta_phi_analytic: np.ndarray
    fisher_sim: np.ndarray
    povm_success: np.ndarray
    delta_phi_recovered: np.ndarray
    excluded: np.ndarray

    HEADER = ("phi", "mean_N", "delta_phi_sim", "delta_phi_analytic", "fisher_sim", "fisher_p0N2",
              "povm_success", "delta_phi_recovered", "excluded")

    @property
    def fisher_p0n2(self) -> np.ndarray:
        return np.full_like(self.phi, self.p0 * self.n ** 2)

    def to_csv(self) -> str:
        cols = [self.phi, self.mean_N, self.delta_phi_sim, self.delta_phi_analytic, self.fisher_sim,
                self.fisher_p0n2, self.povm_success, self.delta_phi_recovered, self.excluded]
        return csv_text(self.HEADER, ([c[i].item() for c in cols] for i in range(len(self.phi))))

    def summary(self) -> dict:
        keep = ~self.excluded
        sim = self.delta_phi_sim[keep]
        rec = self.delta_phi_recovered[keep]
        return {
            "N": self.n,
            "p0": self.p0,
            "n_points": int(len(self.phi)),
            "n_excluded": int(self.excluded.sum()),
            "inv_delta_phi_loss_max": float((1 / sim).max()),
            "delta_phi_loss_min": float(sim.min()),
            "bound_inv_N_sqrt_p0": float(self.n * np.sqrt(self.p0)),
            "max_abs_dev_from_analytic": float(np.max(np.abs(sim - self.delta_phi_analytic[keep]))),
            "inv_delta_phi_recovered_min": float((1 / rec).min()),
            "inv_delta_phi_recovered_max": float((1 / rec).max()),
            "povm_success_min": float(self.povm_success.min()),
            "povm_success_max": float(self.povm_success.max()),
            "fisher_min": float(self.fisher_sim.min()),
            "fisher_max": float(self.fisher_sim.max()),
        }


def loss_sweep(spec: ProtocolSpec, loss: LossSpec, n_points: int = 6000,
               threshold: float = SINGULAR_THRESHOLD) -> LossSweepResult:
    if not loss.direct:
        raise LossValidityError("the loss sweep is parameterized by fixed probabilities")
    phi = phase_grid(n_points)
    excluded = is_singular(spec.n, phi, threshold)
    cols = {k: np.full(n_points, np.nan) for k in ("mean", "sim", "fisher", "succ", "rec")}
    for i, p in enumerate(phi):
        ens = decayed_protocol(spec, loss, p)
        cols["mean"][i] = photon_stats(spec.space, ens)[0]
        cols["fisher"][i] = fisher_mixed(spec, loss, p)
        cols["succ"][i] = povm_select(ens, spec.space)[0]
        if not excluded[i]:
            cols["sim"][i] = loss_photon_stats_and_uncertainty(spec, loss, p, threshold)[1]
            cols["rec"][i] = recovered_uncertainty(spec, loss, p, threshold)[1]
    eq17 = np.where(excluded, np.nan, analytic_loss_uncertainty(spec.n, loss.p0, phi))
    return LossSweepResult(spec.n, loss.p0, phi, cols["mean"], cols["sim"], eq17, cols["fisher"],
                           cols["succ"], cols["rec"], excluded)
