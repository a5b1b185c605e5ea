import functools

import numpy as np
import pytest

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.diag([1.0, -1.0]).astype(complex),
    "N": np.diag([0.0, 1.0]).astype(complex),
}


def dense_string(n_sites, string):
    """Kronecker-product matrix of a Pauli string; site j is bit j (rightmost factor = site 0)."""
    out = np.ones((1, 1), dtype=complex)
    for j in range(n_sites):
        out = np.kron(PAULI[string.get(j, "I")], out)
    return out


def dense_operator(spec):
    return sum(c * dense_string(spec.n_sites, dict(s)) for c, s in spec.terms)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_state(rng, dim):
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@functools.lru_cache(maxsize=None)
def ising_model(L, pert="Z"):
    from echoprep.models import ModelSpec

    return ModelSpec.ising(L, pert)
