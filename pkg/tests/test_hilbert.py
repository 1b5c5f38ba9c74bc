import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmetro.hilbert import (MODE1, MODE2, SIGMA_X, SIGMA_Z, TLS, Ensemble, InvalidCutoffError,
                              NumericalConsistencyError, Space, annihilation, embed, expectation,
                              fock_state, noon_state, number_operators, total_photon_operator)


def random_matrix(rng, d):
    return rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))


def test_annihilation_two_levels():
    assert np.array_equal(annihilation(2), [[0, 1], [0, 0]])


def test_annihilation_on_fock_two():
    a = annihilation(3)
    assert np.allclose(a @ [0, 0, 1], [0, np.sqrt(2), 0])


@pytest.mark.parametrize("d", [2, 3, 6])
def test_truncated_commutator(d):
    a = annihilation(d)
    comm = a @ a.conj().T - a.conj().T @ a
    expected = np.eye(d)
    expected[-1, -1] = -(d - 1)
    assert np.allclose(comm, expected, atol=1e-14)


def test_annihilation_rejects_small_cutoff():
    with pytest.raises(InvalidCutoffError):
        annihilation(1)
    with pytest.raises(InvalidCutoffError):
        Space(1, 3)


def test_space_dimension_and_index():
    sp = Space(3, 4)
    assert sp.dim == 24
    assert sp.index(1, 2, 3) == 1 * 12 + 2 * 4 + 3
    assert sorted(sp.index(*sp.labels(i)) for i in range(sp.dim)) == list(range(sp.dim))
    with pytest.raises(IndexError):
        sp.index(0, 3, 0)


def test_sigma_z_convention():
    sp = Space(3, 3)
    sz = embed(SIGMA_Z, TLS, sp)
    for n1 in range(3):
        for n2 in range(3):
            assert expectation(fock_state(sp, 0, n1, n2), sz) == 1
            assert expectation(fock_state(sp, 1, n1, n2), sz) == -1


def test_embed_mode2_lowering():
    n = 3
    sp = Space.for_noon(n)
    a2 = embed(annihilation(sp.cutoff2), MODE2, sp)
    assert np.allclose(a2 @ fock_state(sp, 0, 0, n), np.sqrt(n) * fock_state(sp, 0, 0, n - 1))


def test_embed_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        embed(np.eye(3), TLS, Space(3, 3))


def test_embed_different_modes_commute():
    rng = np.random.default_rng(1)
    sp = Space(3, 4)
    x = embed(random_matrix(rng, 3), MODE1, sp)
    y = embed(random_matrix(rng, 4), MODE2, sp)
    assert np.allclose(x @ y, y @ x, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([TLS, MODE1, MODE2]))
def test_embed_is_homomorphism(seed, slot):
    rng = np.random.default_rng(seed)
    sp = Space(3, 2)
    d = sp.slot_dim(slot)
    a, b = random_matrix(rng, d), random_matrix(rng, d)
    assert np.max(np.abs(embed(a @ b, slot, sp) - embed(a, slot, sp) @ embed(b, slot, sp))) < 1e-12


def test_fock_state_vacuum_and_excited():
    sp = Space.for_noon(2)
    vac = fock_state(sp, 0, 0, 0)
    assert vac[0] == 1 and np.linalg.norm(vac) == 1
    psi = fock_state(sp, 1, 2, 0)
    assert psi[sp.index(1, 2, 0)] == 1
    with pytest.raises(IndexError):
        fock_state(sp, 2, 0, 0)


def test_noon_state_n1():
    sp = Space.for_noon(1)
    psi = noon_state(sp, 1)
    assert np.isclose(psi[sp.index(0, 1, 0)], 1 / np.sqrt(2))
    assert np.isclose(psi[sp.index(0, 0, 1)], 1 / np.sqrt(2))
    assert np.count_nonzero(psi) == 2


@pytest.mark.parametrize("n", [1, 3, 5])
def test_noon_states_orthogonal_with_n_photons(n):
    sp = Space.for_noon(n)
    plus, minus = noon_state(sp, n, 1), noon_state(sp, n, -1)
    assert abs(np.vdot(plus, minus)) < 1e-15
    n_tot = total_photon_operator(sp)
    assert np.isclose(expectation(plus, n_tot), n)
    assert np.isclose(expectation(plus, n_tot @ n_tot) - n ** 2, 0)
    n1, _ = number_operators(sp)
    assert np.isclose(expectation(plus, n1), n / 2)


def test_noon_state_rejects_overflow():
    with pytest.raises(InvalidCutoffError):
        noon_state(Space(3, 3), 3)


def test_total_photon_operator():
    sp = Space(4, 5)
    n_tot = total_photon_operator(sp)
    psi = fock_state(sp, 0, 2, 3)
    assert np.allclose(n_tot @ psi, 5 * psi)
    sx = embed(SIGMA_X, TLS, sp)
    assert np.allclose(n_tot @ sx, sx @ n_tot)
    assert expectation(fock_state(sp, 0, 0, 0), n_tot) == 0


def test_expectation_of_ensemble():
    sp = Space(2, 2)
    ens = Ensemble([0.5, 0.5], [fock_state(sp, 0, 1, 0), fock_state(sp, 0, 0, 1)])
    assert expectation(ens, total_photon_operator(sp)) == pytest.approx(1.0)
    rho = ens.density_matrix()
    assert np.isclose(np.trace(rho), 1)
    assert np.allclose(rho, rho.conj().T)


def test_expectation_flags_inconsistent_hermitian_hint():
    sp = Space(2, 2)
    psi = (fock_state(sp, 0, 0, 0) + 1j * fock_state(sp, 1, 0, 0)) / np.sqrt(2)
    sp_op = np.zeros((sp.dim, sp.dim), dtype=complex)
    sp_op[sp.index(1, 0, 0), sp.index(0, 0, 0)] = 1
    with pytest.raises(NumericalConsistencyError):
        expectation(psi, sp_op, hermitian=True)
    assert isinstance(expectation(psi, sp_op), complex)


def test_ensemble_validates_weights():
    sp = Space(2, 2)
    with pytest.raises(ValueError):
        Ensemble([0.7, 0.7], [fock_state(sp, 0, 0, 0), fock_state(sp, 0, 1, 0)])


def test_unitary_preserves_norm():
    rng = np.random.default_rng(3)
    sp = Space(3, 3)
    q, _ = np.linalg.qr(random_matrix(rng, sp.dim))
    psi = noon_state(sp, 2)
    assert abs(np.linalg.norm(q @ psi) - 1) < 1e-10
