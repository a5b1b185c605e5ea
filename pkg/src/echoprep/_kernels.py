"""Compiled inner loops for matrix-free spin-1/2 operators.

Every operator handled here has the form

    (H x)[i] = diag[i] x[i] + sum_k coefs[k] x[i ^ masks[k]]
               + sum_e weights[e, i] x[i ^ extra_masks[e]]

i.e. a real diagonal, bit-flip terms with uniform real coefficients, and an
optional set of flip terms with per-basis-state complex weights (needed for
Pauli strings containing Y or mixed X/Z factors).  Weights are stored in
"pull" form: ``weights[e, i]`` multiplies the amplitude that lands on ``i``.
"""

import numpy as np
from numba import njit

_BREAKDOWN = 1e-14


@njit(cache=True)
def matvec(diag, masks, coefs, extra_masks, extra_weights, x, out):
    dim = x.shape[0]
    nflip = masks.shape[0]
    nextra = extra_masks.shape[0]
    for i in range(dim):
        acc = diag[i] * x[i]
        for k in range(nflip):
            acc += coefs[k] * x[i ^ masks[k]]
        for e in range(nextra):
            acc += extra_weights[e, i] * x[i ^ extra_masks[e]]
        out[i] = acc


@njit(cache=True)
def _tridiag_expm_e1(alpha, beta, m, dt):
    t = np.zeros((m, m))
    for i in range(m):
        t[i, i] = alpha[i]
        if i + 1 < m:
            t[i, i + 1] = beta[i]
            t[i + 1, i] = beta[i]
    evals, evecs = np.linalg.eigh(t)
    phase = np.exp(-1j * dt * evals)
    c = np.zeros(m, np.complex128)
    for i in range(m):
        acc = 0j
        for q in range(m):
            acc += evecs[i, q] * phase[q] * evecs[0, q]
        c[i] = acc
    return c


@njit(cache=True)
def expm_krylov(diag, masks, coefs, extra_masks, extra_weights, psi, dt, tol, max_dim, out):
    """Lanczos approximation of exp(-i dt H) psi written into ``out``.

    Returns ``(m, err)``: the Krylov dimension used and the a-posteriori
    error estimate relative to ``|psi|``.  ``m == -1`` signals that
    ``max_dim`` was exhausted before ``err <= tol``.
    """
    dim = psi.shape[0]
    beta0 = 0.0
    for i in range(dim):
        beta0 += psi[i].real ** 2 + psi[i].imag ** 2
    beta0 = np.sqrt(beta0)
    if beta0 == 0.0 or dt == 0.0:
        for i in range(dim):
            out[i] = psi[i]
        return 0, 0.0
    basis = np.empty((max_dim + 1, dim), np.complex128)
    for i in range(dim):
        basis[0, i] = psi[i] / beta0
    alpha = np.zeros(max_dim)
    beta = np.zeros(max_dim)
    w = np.empty(dim, np.complex128)
    err = np.inf
    for j in range(max_dim):
        matvec(diag, masks, coefs, extra_masks, extra_weights, basis[j], w)
        a = 0.0
        for i in range(dim):
            a += (basis[j, i].conjugate() * w[i]).real
        alpha[j] = a
        # one full Gram-Schmidt sweep against the whole basis
        for p in range(j + 1):
            c = 0j
            for i in range(dim):
                c += basis[p, i].conjugate() * w[i]
            for i in range(dim):
                w[i] -= c * basis[p, i]
        b = 0.0
        for i in range(dim):
            b += w[i].real ** 2 + w[i].imag ** 2
        b = np.sqrt(b)
        beta[j] = b
        m = j + 1
        c = _tridiag_expm_e1(alpha, beta, m, dt)
        err = b * abs(c[m - 1])
        if err <= tol or b < _BREAKDOWN:
            for i in range(dim):
                acc = 0j
                for q in range(m):
                    acc += c[q] * basis[q, i]
                out[i] = beta0 * acc
            return m, err
        for i in range(dim):
            basis[j + 1, i] = w[i] / b
    return -1, err


EMPTY_MASKS = np.zeros(0, dtype=np.int64)
EMPTY_WEIGHTS = np.zeros((0, 1), dtype=np.complex128)
