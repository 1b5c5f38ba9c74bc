import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmetro import metrology as M
from revmetro.dynamics import ControlledSystem, PulseSet
from revmetro.hilbert import Space, expectation, fock_state, noon_state, total_photon_operator


@pytest.fixture(scope="module")
def exact3():
    return M.exact_protocol(3)


def test_phase_gate_basics():
    sp = Space(3, 3)
    assert np.array_equal(M.phase_gate(sp, 0.0), np.eye(sp.dim))
    psi = M.phase_gate(sp, np.pi) @ fock_state(sp, 0, 0, 1)
    assert np.allclose(psi, -fock_state(sp, 0, 0, 1))


@settings(max_examples=20, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_phase_gate_composes(a, b):
    sp = Space(4, 4)
    prod = M.phase_gate(sp, a) @ M.phase_gate(sp, b)
    assert np.max(np.abs(prod - M.phase_gate(sp, a + b))) < 1e-12


def test_exact_completion_maps_pairs():
    problem = M.closed_control_problem(4)
    u = M.exact_completion_unitary(problem.initial, problem.targets)
    assert np.max(np.abs(u.conj().T @ u - np.eye(problem.space.dim))) < 1e-12
    for psi, tgt in zip(problem.initial, problem.targets):
        assert np.max(np.abs(u @ psi - tgt)) < 1e-12
    assert np.max(np.abs(u @ fock_state(problem.space, 0, 0, 0) - noon_state(problem.space, 4))) < 1e-12


def test_exact_completion_rejects_non_orthonormal():
    sp = Space(3, 3)
    a = fock_state(sp, 0, 0, 0)
    with pytest.raises(ValueError):
        M.exact_completion_unitary([a, a], [a, fock_state(sp, 0, 1, 0)])


@pytest.mark.parametrize("n", [1, 2, 5])
def test_completion_independence(n):
    phi = M.phase_grid(64)
    a = M.protocol_states(M.exact_protocol(n), phi)
    b = M.protocol_states(M.exact_protocol(n, seed=17), phi)
    assert not np.allclose(M.exact_protocol(n).unitary, M.exact_protocol(n, seed=17).unitary)
    assert np.max(np.abs(a - b)) < 1e-10


def test_run_protocol_identity_at_zero(exact3):
    psi = M.run_protocol(exact3, 0.0)
    assert abs(abs(psi[0]) - 1) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(-np.pi, np.pi), st.integers(1, 4))
def test_run_protocol_amplitudes(phi, n):
    spec = M.exact_protocol(n)
    psi = M.run_protocol(spec, phi)
    e = np.exp(1j * n * phi)
    assert abs(psi[0] - (1 + e) / 2) < 1e-12
    assert abs(psi[spec.space.index(0, 0, n)] - (1 - e) / 2) < 1e-12
    assert abs(np.linalg.norm(psi) - 1) < 1e-12


def test_dark_fringe(exact3):
    psi = M.run_protocol(exact3, np.pi / 3)
    assert abs(abs(psi[exact3.space.index(0, 0, 3)]) - 1) < 1e-12


def test_photon_stats_examples():
    spec = M.exact_protocol(2)
    mean, mean2 = M.photon_stats(spec.space, M.run_protocol(spec, np.pi / 2))
    assert np.isclose(mean, 2) and np.isclose(mean2, 4)
    spec3 = M.exact_protocol(3)
    assert np.isclose(M.photon_stats(spec3.space, M.run_protocol(spec3, np.pi / 6))[0], 1.5)
    assert np.allclose(M.photon_stats(spec3.space, M.run_protocol(spec3, 0.0)), 0, atol=1e-24)


def test_photon_stats_agree_with_operator(exact3):
    psi = M.run_protocol(exact3, 0.37)
    n_tot = total_photon_operator(exact3.space)
    mean, mean2 = M.photon_stats(exact3.space, psi)
    assert np.isclose(mean, expectation(psi, n_tot))
    assert np.isclose(mean2, expectation(psi, n_tot @ n_tot))


def test_auxiliary_occupation():
    spec = M.exact_protocol(2, n_x=3)
    phi = 0.4
    mean, mean2 = M.photon_stats(spec.space, M.run_protocol(spec, phi))
    s = np.sin(phi) ** 2
    assert np.isclose(mean, 3 * s) and np.isclose(mean2, 9 * s)


def test_protocol_spec_validation():
    u = np.eye(Space(3, 3).dim)
    with pytest.raises(ValueError):
        M.ProtocolSpec(1, u, Space(3, 3), n_x=0)
    with pytest.raises(ValueError):
        M.ProtocolSpec(3, u, Space(3, 3))
    with pytest.raises(ValueError):
        M.ProtocolSpec(1, np.eye(4), Space(3, 3))


@pytest.mark.parametrize("n", [1, 2, 5])
def test_uncertainty_heisenberg(n):
    spec = M.exact_protocol(n)
    for phi in (0.3 / n, 1.1 / n, 2.0 / n):
        assert abs(1 / M.uncertainty(spec, phi) - n) < 1e-5 * n


def test_uncertainty_singular_point(exact3):
    with pytest.raises(M.SingularPointError):
        M.uncertainty(exact3, np.pi / 3)
    with pytest.raises(M.SingularPointError):
        M.uncertainty(exact3, 0.0)


def test_fisher_pure_constant():
    for n in (1, 4):
        spec = M.exact_protocol(n)
        f = M.fisher_pure(spec, M.phase_grid(50))
        assert np.max(np.abs(f - n ** 2)) < 1e-8 * n ** 2


def test_fisher_matches_finite_difference_of_states(exact3):
    phi, h = 0.7, 1e-5
    psi = M.protocol_states(exact3, phi)
    dpsi = (M.protocol_states(exact3, phi + h) - M.protocol_states(exact3, phi - h)) / (2 * h)
    assert np.max(np.abs(dpsi - M.protocol_derivatives(exact3, phi))) < 1e-8
    assert abs(M.pure_state_fisher(psi, dpsi) - 9) < 1e-6


def test_phase_grid():
    grid = M.phase_grid(6000)
    assert grid[0] == -np.pi and grid[-1] < np.pi
    assert np.allclose(np.diff(grid), 2 * np.pi / 6000)
    with pytest.raises(ValueError):
        M.phase_grid(1)


def test_sweep_exact(exact3):
    res = M.sweep(exact3, n_points=600, closed_form=True)
    keep = ~res.excluded
    assert res.excluded.sum() > 0
    assert np.all(np.isnan(res.delta_phi[res.excluded]))
    assert np.max(np.abs(res.inv_delta_phi[keep] - 3)) < 3e-5
    assert np.max(np.abs(res.delta_phi[keep] - res.delta_phi_closed[keep])) < 1e-8
    assert np.all(res.mean_N2 >= res.mean_N ** 2 - 1e-9)
    summary = res.summary()
    assert summary["n_points"] == 600 and np.isclose(summary["fisher_mean"], 9)
    json.dumps(summary)


def test_sweep_csv_columns(exact3):
    text = M.sweep(exact3, n_points=12).to_csv()
    lines = text.splitlines()
    assert lines[0] == "phi,mean_N,mean_N2,delta_phi,inv_delta_phi,fisher,excluded"
    assert len(lines) == 13
    assert lines[1].startswith("-3.1415926535897931,")


def test_scaling_fit_exact():
    fit = M.scaling_fit([M.sweep(M.exact_protocol(n), n_points=300) for n in (1, 2, 3, 4)])
    for key in ("max", "median", "mean"):
        assert abs(fit.slopes[key] - 1) < 1e-5
    assert abs(fit.slopes["fisher_vs_N2"] - 1) < 1e-9
    assert fit.as_dict()["N"] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        M.scaling_fit([M.sweep(M.exact_protocol(1), n_points=10)])


def test_imperfect_unitary_degrades_gracefully():
    # a short random pulse gives some unitary; the pipeline stays finite and F <= 4 Var bound holds
    problem = M.closed_control_problem(1, t_final=2.0, n_steps=20)
    rng = np.random.default_rng(0)
    u = ControlledSystem(problem.space).build_unitary(PulseSet(2.0, 0.3 * rng.standard_normal((4, 20))))
    spec = M.ProtocolSpec(1, u, problem.space, infidelity=0.5)
    res = M.sweep(spec, n_points=100)
    assert np.all(np.isfinite(res.fisher)) and np.all(res.fisher >= -1e-12)
    resource = spec.resource
    _, _, n2 = problem.space.quantum_numbers()
    var = np.sum(n2 ** 2 * np.abs(resource) ** 2) - np.sum(n2 * np.abs(resource) ** 2) ** 2
    assert np.allclose(res.fisher, 4 * var)
