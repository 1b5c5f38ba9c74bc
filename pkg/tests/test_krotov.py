import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm, expm_frechet

from revmetro import krotov as K
from revmetro.dynamics import ControlledSystem, PulseSet
from revmetro.hilbert import Space, fock_state
from revmetro.metrology import closed_control_problem


def toy_problem(n_steps=50, t_final=5.0):
    sp = Space(2, 2)
    return K.ControlProblem(sp, [fock_state(sp, 0, 0, 0)], [fock_state(sp, 1, 0, 0)],
                            t_final=t_final, n_steps=n_steps)


def final_infidelity(problem, pulse):
    system = ControlledSystem(problem.space, problem.drift)
    evolved = [system.propagate(psi, pulse).states[-1] for psi in problem.initial]
    return K.infidelity(evolved, problem.targets)


def test_shape_function_profile():
    t = np.array([-1.0, 0.0, 1.0, 2.0, 20.0, 38.0, 39.0, 40.0, 41.0])
    s = K.shape_function(0.05, t, 40.0)
    assert s[0] == s[1] == s[-1] == s[-2] == 0
    assert np.isclose(s[2], 0.5) and np.isclose(s[6], 0.5)
    assert s[3] == s[4] == s[5] == 1
    assert K.shape_function(0.05, 20.0, 40.0) == 1.0


def test_shape_function_rejects_ramp():
    with pytest.raises(ValueError):
        K.shape_function(0.6, 1.0, 40.0)


def test_infidelity_limits():
    sp = Space(2, 2)
    a, b = fock_state(sp, 0, 0, 0), fock_state(sp, 1, 0, 0)
    assert K.infidelity([a, b], [a, b]) == 0
    assert K.infidelity([a], [b]) == 1
    assert np.isclose(K.infidelity([(a + b) / np.sqrt(2)], [a]), 0.5)
    with pytest.raises(ValueError):
        K.infidelity([a], [a, b])


def test_terminal_costate():
    sp = Space(2, 2)
    target = fock_state(sp, 1, 0, 0)
    evolved = (fock_state(sp, 0, 0, 0) + 1j * target) / np.sqrt(2)
    chi = K.terminal_costate(evolved, target, 2)
    assert np.allclose(chi, 1j / np.sqrt(2) / 2 * target)


def test_problem_rejects_non_orthonormal():
    sp = Space(2, 2)
    a = fock_state(sp, 0, 0, 0)
    with pytest.raises(K.ProblemError):
        K.ControlProblem(sp, [a, a], [a, fock_state(sp, 1, 0, 0)])
    with pytest.raises(K.ProblemError):
        K.ControlProblem(sp, [a], [])


def test_config_validation():
    with pytest.raises(ValueError):
        K.KrotovConfig(lambda_a=0)
    with pytest.raises(ValueError):
        K.KrotovConfig(active_channels=("f_y",))
    cfg = K.KrotovConfig(lambda_a=[1, 2, 4, 8], active_channels=("f_x", "g2"))
    assert np.allclose(cfg.step_factors, [1, 0, 0, 0.125])


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 1.0))
def test_divided_differences_give_frechet_derivative(e0, e1, dt):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 2))
    v, _ = np.linalg.qr(a)
    h = v @ np.diag([e0, e1]) @ v.T
    dh = rng.standard_normal((2, 2))
    dh = dh + dh.T
    f = K.divided_differences(np.array([e0, e1]), dt)
    ours = v @ ((v.T @ dh @ v) * f) @ v.T
    _, ref = expm_frechet(-1j * dt * h, -1j * dt * dh)
    assert np.max(np.abs(ours - ref)) < 1e-12


def test_toy_gradient_matches_finite_differences():
    problem = toy_problem()
    rng = np.random.default_rng(11)
    pulse = PulseSet(problem.t_final, np.zeros((4, problem.n_steps)))
    pulse.samples[0] = 0.2 + 0.05 * rng.standard_normal(problem.n_steps)
    system = ControlledSystem(problem.space, problem.drift)
    integrand = K.gradient_integrand(system, pulse, problem)
    analytic = -2 * pulse.dt * integrand[0]
    h = 1e-5
    for k in (0, 7, 25, 49):
        plus, minus = pulse.copy(), pulse.copy()
        plus.samples[0, k] += h
        minus.samples[0, k] -= h
        fd = (final_infidelity(problem, plus) - final_infidelity(problem, minus)) / (2 * h)
        assert abs(fd - analytic[k]) <= 1e-6 * abs(fd)


def test_gradient_on_coupled_problem():
    problem = closed_control_problem(1, t_final=4.0, n_steps=40)
    rng = np.random.default_rng(3)
    pulse = PulseSet(4.0, 0.3 * rng.standard_normal((4, 40)))
    system = ControlledSystem(problem.space, problem.drift)
    analytic = -2 * pulse.dt * K.gradient_integrand(system, pulse, problem)
    h = 1e-5
    for l, k in [(0, 3), (1, 20), (2, 11), (3, 39)]:
        plus, minus = pulse.copy(), pulse.copy()
        plus.samples[l, k] += h
        minus.samples[l, k] -= h
        fd = (final_infidelity(problem, plus) - final_infidelity(problem, minus)) / (2 * h)
        assert abs(fd - analytic[l, k]) <= 1e-6 * abs(fd) + 1e-12


def test_integrand_small_dt_limit():
    # as dt -> 0 the integrand tends to Im <chi|G|phi>
    sp = Space(2, 2)
    system = ControlledSystem(sp)
    problem = K.ControlProblem(sp, [fock_state(sp, 0, 0, 0)], [fock_state(sp, 1, 0, 0)],
                               t_final=1e-6, n_steps=1)
    pulse = PulseSet(1e-6, np.zeros((4, 1)))
    integrand = K.gradient_integrand(system, pulse, problem)
    assert np.isclose(integrand[0, 0], 0.0, atol=1e-9)


def test_toy_optimization_monotone_and_converges():
    problem = toy_problem(n_steps=100, t_final=5.0)
    cfg = K.KrotovConfig(lambda_a=1.0, active_channels=("f_x",), target_infidelity=1e-6,
                         max_iters=200)
    guess = PulseSet(5.0, np.zeros((4, 100)))
    guess.samples[0] = 0.1 * K.interval_shape(cfg.ramp_fraction, guess)
    record = K.optimize(problem, cfg, guess=guess)
    assert record.converged
    values = [j for _, j, _ in record.iterations]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert np.all(record.final_pulse.samples[1:] == 0)
    assert np.isclose(final_infidelity(problem, record.final_pulse), record.final_infidelity,
                      atol=1e-12)
    assert record.history_csv().startswith("iter,J_T,max_update\n0,")


def test_update_respects_shape_function_boundaries():
    problem = toy_problem(n_steps=100)
    cfg = K.KrotovConfig(lambda_a=1.0, max_iters=3, target_infidelity=1e-9)
    guess = PulseSet(problem.t_final, np.zeros((4, 100)))
    guess.samples[0] = 0.1
    record = K.optimize(problem, cfg, guess=guess)
    delta = record.final_pulse.samples - guess.samples
    # |I| <= |chi| |G| |phi| <= 1 for sigma_x, so each sweep moves c by at most S / lambda
    shape = K.interval_shape(cfg.ramp_fraction, guess)
    assert np.all(np.abs(delta[0]) <= 3 * shape / cfg.lambda_a + 1e-15)
    assert np.max(np.abs(delta[0])) > 0.1


def test_monotonicity_violation_raises():
    problem = toy_problem(n_steps=20)
    cfg = K.KrotovConfig(lambda_a=1e-4, active_channels=("f_x",), max_iters=20)
    guess = PulseSet(problem.t_final, np.zeros((4, 20)))
    guess.samples[0] = 0.05
    with pytest.raises(K.MonotonicityError):
        K.optimize(problem, cfg, guess=guess)


def test_guess_pulse_is_seeded():
    problem = closed_control_problem(1, n_steps=200)
    cfg = K.KrotovConfig(guess_seed=4)
    a, b = K.guess_pulse(problem, cfg), K.guess_pulse(problem, cfg)
    assert np.array_equal(a.samples, b.samples)
    env = K.interval_shape(cfg.ramp_fraction, a)
    assert np.all(np.abs(a.samples) <= (cfg.guess_fx + 6 * cfg.guess_noise) * env)
    assert np.any(a.samples[0] != 0)


def test_guess_grid_mismatch():
    problem = toy_problem()
    with pytest.raises(K.ProblemError):
        K.optimize(problem, K.KrotovConfig(), guess=PulseSet.zeros(5.0, 10))


def test_unitary_from_optimized_pulse_is_unitary():
    problem = toy_problem(n_steps=30)
    rng = np.random.default_rng(9)
    pulse = PulseSet(problem.t_final, 0.3 * rng.standard_normal((4, 30)))
    u = ControlledSystem(problem.space).build_unitary(pulse)
    assert np.max(np.abs(u.conj().T @ u - np.eye(problem.space.dim))) < 1e-10
    h = ControlledSystem(problem.space).assemble(pulse, 0)
    assert np.allclose(expm(-1j * pulse.dt * h) @ problem.initial[0],
                       ControlledSystem(problem.space).propagate(
                           problem.initial[0], PulseSet(pulse.dt, pulse.samples[:, :1])).states[-1])
