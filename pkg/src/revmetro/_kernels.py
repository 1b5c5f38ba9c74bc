"""Compiled inner loops for piecewise-constant propagation and the Krotov sweep.

Hamiltonians are real symmetric, so eigenvectors are real; complex states are
multiplied by them through their real and imaginary parts.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _rmul(v, z):
    return v @ np.ascontiguousarray(z.real) + 1j * (v @ np.ascontiguousarray(z.imag))


@njit(cache=True)
def hamiltonian(h0, gens, controls):
    h = h0.copy()
    for l in range(gens.shape[0]):
        if controls[l] != 0.0:
            h += controls[l] * gens[l]
    return h


@njit(cache=True)
def spectra(h0, gens, samples):
    n = samples.shape[1]
    d = h0.shape[0]
    energies = np.empty((n, d))
    vectors = np.empty((n, d, d))
    for k in range(n):
        e, v = np.linalg.eigh(hamiltonian(h0, gens, samples[:, k]))
        energies[k] = e
        vectors[k] = v
    return energies, vectors


@njit(cache=True)
def _step(e, v, psi, dt, sign):
    vt = np.ascontiguousarray(v.T)
    c = _rmul(vt, psi)
    ph = np.exp(sign * 1j * e * dt)
    for a in range(c.shape[0]):
        c[a] *= ph[a]
    return _rmul(v, c)


@njit(cache=True)
def forward(energies, vectors, psi0, dt):
    psi = psi0.copy()
    for k in range(energies.shape[0]):
        psi = _step(energies[k], vectors[k], psi, dt, -1.0)
    return psi


@njit(cache=True)
def backward(energies, vectors, chi_final, dt):
    n = energies.shape[0]
    out = np.empty((n + 1,) + chi_final.shape, dtype=np.complex128)
    out[n] = chi_final
    for k in range(n - 1, -1, -1):
        out[k] = _step(energies[k], vectors[k], out[k + 1], dt, 1.0)
    return out


@njit(cache=True)
def divided_differences(e, dt):
    """``F_ab = (p_a - p_b) / (E_a - E_b)`` with ``p = exp(-i E dt)``.

    Near-degenerate pairs use ``-i dt exp(-i (E_a + E_b) dt / 2) sinc`` to
    avoid cancellation.
    """
    d = e.shape[0]
    p = np.exp(-1j * e * dt)
    f = np.empty((d, d), dtype=np.complex128)
    for a in range(d):
        for b in range(d):
            x = 0.5 * (e[a] - e[b]) * dt
            if abs(x) > 1e-3:
                f[a, b] = (p[a] - p[b]) / (e[a] - e[b])
            else:
                f[a, b] = (-1j * dt * (1.0 - x * x / 6.0 + x ** 4 / 120.0)
                           * np.exp(-0.5j * (e[a] + e[b]) * dt))
    return f


@njit(cache=True)
def integrand(gen_sparse, e, v, chi_next, phi, dt):
    """``Re <chi|dU/dc_l|phi> / dt`` for every channel ``l``.

    ``gen_sparse = (owner, rows, cols, vals)`` lists the nonzero generator
    entries. With ``V`` real, ``Re(V M V^T) = V Re(M) V^T``, and only the
    entries where a generator is nonzero are needed.
    """
    owner, rows, cols, vals = gen_sparse
    vt = np.ascontiguousarray(v.T)
    x = _rmul(vt, chi_next)
    y = _rmul(vt, phi)
    m = np.ascontiguousarray((divided_differences(e, dt) * (np.conj(x) @ np.ascontiguousarray(y.T))).real)
    a = v @ m
    out = np.zeros(owner.max() + 1)
    d = v.shape[0]
    for k in range(owner.shape[0]):
        i, j = rows[k], cols[k]
        acc = 0.0
        for b in range(d):
            acc += a[i, b] * v[j, b]
        out[owner[k]] += vals[k] * acc
    return out / dt


@njit(cache=True)
def sweep(h0, gens, gen_sparse, samples, energies, vectors, chi, phi0, shape, inv_lam, dt):
    """Sequential update; modifies samples, energies and vectors in place."""
    phi = phi0.copy()
    max_update = 0.0
    for k in range(samples.shape[1]):
        if shape[k] > 0.0:
            delta = shape[k] * inv_lam * integrand(gen_sparse, energies[k], vectors[k],
                                                   chi[k + 1], phi, dt)
            if np.any(delta != 0.0):
                for l in range(delta.shape[0]):
                    samples[l, k] += delta[l]
                    if abs(delta[l]) > max_update:
                        max_update = abs(delta[l])
                e, v = np.linalg.eigh(hamiltonian(h0, gens, samples[:, k]))
                energies[k] = e
                vectors[k] = v
        phi = _step(energies[k], vectors[k], phi, dt, -1.0)
    return phi, max_update


@njit(cache=True)
def gradient(gen_sparse, energies, vectors, chi, phi0, dt):
    n = energies.shape[0]
    out = np.empty((gen_sparse[0].max() + 1, n))
    phi = phi0.copy()
    for k in range(n):
        out[:, k] = integrand(gen_sparse, energies[k], vectors[k], chi[k + 1], phi, dt)
        phi = _step(energies[k], vectors[k], phi, dt, -1.0)
    return out
