"""State vectors and matrix-free Pauli-string operators on L two-level systems.

Basis convention: site ``j`` is bit ``j`` of the basis index.  Bit value 0
is the spin-up / ground state (|↑⟩, |g⟩); bit value 1 is spin-down /
Rydberg (|↓⟩, |r⟩).  So ``Z`` has eigenvalue +1 on a cleared bit and ``N``
(the Rydberg occupation) is 1 on a set bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

PAULI_LETTERS = frozenset("XYZN")


def basis_bits(n_sites: int) -> np.ndarray:
    """(2^L, L) array of 0/1 occupations, column j = bit j."""
    idx = np.arange(1 << n_sites)
    return (idx[:, None] >> np.arange(n_sites)) & 1


@dataclass(frozen=True, eq=False)
class StateVector:
    """Dense amplitudes over the 2^L computational basis."""

    n_sites: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if amps.ndim != 1 or amps.shape[0] != 1 << self.n_sites:
            raise ValueError(
                f"expected {1 << self.n_sites} amplitudes for {self.n_sites} sites, got shape {amps.shape}"
            )
        if not np.all(np.isfinite(amps)):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def basis_state(cls, n_sites: int, index: int) -> "StateVector":
        amps = np.zeros(1 << n_sites, dtype=np.complex128)
        amps[index] = 1.0
        return cls(n_sites, amps)

    @classmethod
    def from_bitstring(cls, bits: str) -> "StateVector":
        """``bits[j]`` is the value of site j, e.g. ``"100"`` excites site 0."""
        index = sum(1 << j for j, b in enumerate(bits) if b == "1")
        return cls.basis_state(len(bits), index)

    @classmethod
    def product(cls, site_state: Sequence[complex], n_sites: int) -> "StateVector":
        amps = np.ones(1, dtype=np.complex128)
        single = np.asarray(site_state, dtype=np.complex128)
        for _ in range(n_sites):
            # later sites are higher bits, so they go on the left of the kron
            amps = np.kron(single, amps)
        return cls(n_sites, amps)

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.n_sites, self.amplitudes / self.norm())

    def __add__(self, other: "StateVector") -> "StateVector":
        _check_same_space(self, other)
        return StateVector(self.n_sites, self.amplitudes + other.amplitudes)

    def __sub__(self, other: "StateVector") -> "StateVector":
        _check_same_space(self, other)
        return StateVector(self.n_sites, self.amplitudes - other.amplitudes)

    def __mul__(self, scalar: complex) -> "StateVector":
        return StateVector(self.n_sites, scalar * self.amplitudes)

    __rmul__ = __mul__


def _check_same_space(a: StateVector, b: StateVector) -> None:
    if a.dim != b.dim:
        raise ValueError(f"length mismatch: {a.dim} vs {b.dim}")


def _as_array(psi) -> np.ndarray:
    if isinstance(psi, StateVector):
        return psi.amplitudes
    return np.asarray(psi, dtype=np.complex128)


def inner(phi, psi) -> complex:
    """⟨phi|psi⟩, conjugate-linear in ``phi``."""
    a, b = _as_array(phi), _as_array(psi)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return complex(np.vdot(a, b))


def fidelity(phi, psi) -> float:
    return abs(inner(phi, psi)) ** 2


@dataclass(frozen=True)
class CompiledOperator:
    """Flip/diagonal form of a Hermitian operator, see :mod:`echoprep._kernels`."""

    n_sites: int
    diag: np.ndarray
    masks: np.ndarray
    coefs: np.ndarray
    extra_masks: np.ndarray = field(default_factory=lambda: _kernels.EMPTY_MASKS)
    extra_weights: np.ndarray = field(default_factory=lambda: _kernels.EMPTY_WEIGHTS)

    @property
    def dim(self) -> int:
        return 1 << self.n_sites

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.coefs) and self.extra_masks.size == 0

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.complex128)
        out = np.empty_like(x)
        _kernels.matvec(self.diag, self.masks, self.coefs, self.extra_masks, self.extra_weights, x, out)
        return out

    def to_dense(self) -> np.ndarray:
        eye = np.eye(self.dim, dtype=np.complex128)
        return np.column_stack([self.matvec(eye[:, i]) for i in range(self.dim)])

    def scaled(self, factor: float) -> "CompiledOperator":
        return CompiledOperator(
            self.n_sites,
            factor * self.diag,
            self.masks,
            factor * self.coefs,
            self.extra_masks,
            factor * self.extra_weights,
        )

    def __add__(self, other: "CompiledOperator") -> "CompiledOperator":
        if other.n_sites != self.n_sites:
            raise ValueError("operators act on different numbers of sites")
        merged: dict[int, float] = {}
        for m, c in zip(self.masks.tolist(), self.coefs.tolist()):
            merged[m] = merged.get(m, 0.0) + c
        for m, c in zip(other.masks.tolist(), other.coefs.tolist()):
            merged[m] = merged.get(m, 0.0) + c
        extra_masks = np.concatenate([self.extra_masks, other.extra_masks])
        if extra_masks.size:
            extra_weights = np.concatenate(
                [w for w in (self.extra_weights, other.extra_weights) if w.shape[0]]
            )
        else:
            extra_weights = _kernels.EMPTY_WEIGHTS
        return CompiledOperator(
            self.n_sites,
            self.diag + other.diag,
            np.array(list(merged), dtype=np.int64),
            np.array(list(merged.values()), dtype=np.float64),
            extra_masks,
            extra_weights,
        )

    def on_masks(self, masks: np.ndarray) -> np.ndarray:
        """Coefficients re-indexed onto a fixed mask table (zeros where absent)."""
        table = {int(m): k for k, m in enumerate(masks)}
        out = np.zeros(len(masks))
        for m, c in zip(self.masks.tolist(), self.coefs.tolist()):
            if m not in table:
                raise ValueError(f"flip mask {m} missing from the mask table")
            out[table[m]] += c
        return out


def _string_action(n_sites: int, string: Mapping[int, str]):
    """Return (mask, weight) with P|i⟩ = weight[i] |i ^ mask⟩."""
    bits = basis_bits(n_sites)
    mask = 0
    weight = np.ones(1 << n_sites, dtype=np.complex128)
    for site, letter in string.items():
        b = bits[:, site]
        if letter == "X":
            mask |= 1 << site
        elif letter == "Y":
            mask |= 1 << site
            weight *= np.where(b == 0, 1j, -1j)
        elif letter == "Z":
            weight *= 1 - 2 * b
        elif letter == "N":
            weight *= b
    return mask, weight


@dataclass(frozen=True)
class OperatorSpec:
    """Real-weighted sum of Pauli strings; Hermitian by construction.

    ``terms`` holds ``(coefficient, {site: letter})`` pairs with letters in
    ``X, Y, Z, N`` (``N`` = |1⟩⟨1|, the Rydberg occupation).
    """

    n_sites: int
    terms: tuple = ()
    tag: str = ""

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be positive")
        normalized = []
        for coef, string in self.terms:
            coef = float(coef)
            if not np.isfinite(coef):
                raise ValueError(f"non-finite coefficient {coef}")
            string = dict(string)
            for site, letter in string.items():
                if letter not in PAULI_LETTERS:
                    raise ValueError(f"unknown Pauli letter {letter!r}")
                if not 0 <= site < self.n_sites:
                    raise ValueError(f"site index {site} out of range for {self.n_sites} sites")
            normalized.append((coef, tuple(sorted(string.items()))))
        object.__setattr__(self, "terms", tuple(normalized))

    @classmethod
    def single(cls, n_sites: int, letter: str, sites: Iterable[int] | None = None,
               coef: float = 1.0, tag: str = "") -> "OperatorSpec":
        """``coef * sum_j letter_j`` over ``sites`` (default: all)."""
        sites = range(n_sites) if sites is None else sites
        return cls(n_sites, tuple((coef, {j: letter}) for j in sites), tag or f"sum {letter}")

    def __add__(self, other: "OperatorSpec") -> "OperatorSpec":
        if other.n_sites != self.n_sites:
            raise ValueError("operators act on different numbers of sites")
        return OperatorSpec(self.n_sites, self.terms + other.terms, self.tag or other.tag)

    def scaled(self, factor: float) -> "OperatorSpec":
        return OperatorSpec(self.n_sites, tuple((factor * c, dict(s)) for c, s in self.terms), self.tag)

    @cached_property
    def compiled(self) -> CompiledOperator:
        dim = 1 << self.n_sites
        diag = np.zeros(dim)
        uniform: dict[int, float] = {}
        extra: dict[int, np.ndarray] = {}
        for coef, string in self.terms:
            mask, weight = _string_action(self.n_sites, dict(string))
            if mask == 0:
                diag += coef * weight.real
            elif np.all(weight == 1.0):
                uniform[mask] = uniform.get(mask, 0.0) + coef
            else:
                # pull form: amplitude arriving at i came from i ^ mask
                pulled = weight[np.arange(dim) ^ mask]
                extra[mask] = extra.get(mask, 0.0) + coef * pulled
        if extra:
            extra_masks = np.array(list(extra), dtype=np.int64)
            extra_weights = np.array(list(extra.values()), dtype=np.complex128)
        else:
            extra_masks, extra_weights = _kernels.EMPTY_MASKS, _kernels.EMPTY_WEIGHTS
        return CompiledOperator(
            self.n_sites,
            diag,
            np.array(list(uniform), dtype=np.int64),
            np.array(list(uniform.values()), dtype=np.float64),
            extra_masks,
            extra_weights,
        )


def apply_operator(op, psi: StateVector) -> StateVector:
    """Return ``op @ psi`` for an :class:`OperatorSpec` or :class:`CompiledOperator`."""
    compiled = op.compiled if isinstance(op, OperatorSpec) else op
    if compiled.n_sites != psi.n_sites:
        raise ValueError(f"operator acts on {compiled.n_sites} sites, state has {psi.n_sites}")
    return StateVector(psi.n_sites, compiled.matvec(psi.amplitudes))


def expectation(op, psi) -> float:
    compiled = op.compiled if isinstance(op, OperatorSpec) else op
    x = _as_array(psi)
    return float(np.vdot(x, compiled.matvec(x)).real)


TARGET_KINDS = ("ising_ghz_plus", "rydberg_ghz_plus", "z3_cat", "z4_cat", "ground_state")


def sublattice_parity(positions: np.ndarray) -> np.ndarray:
    """Checkerboard label (0 = A, 1 = B) of integer lattice positions."""
    pos = np.asarray(positions, dtype=float)
    rounded = np.rint(pos)
    if not np.allclose(pos, rounded, atol=1e-9):
        raise ValueError("checkerboard sublattices need atoms on integer lattice sites")
    return (rounded.sum(axis=1).astype(int)) % 2


def _cat_state(n_sites: int, period: int) -> np.ndarray:
    if n_sites % period:
        raise ValueError(f"a Z{period} cat state needs L divisible by {period}, got L={n_sites}")
    amps = np.zeros(1 << n_sites, dtype=np.complex128)
    for shift in range(period):
        index = sum(1 << j for j in range(n_sites) if j % period == shift)
        amps[index] = 1.0
    return amps / np.sqrt(period)


def build_target(kind: str, model, s_final: float = 1.0) -> StateVector:
    """Target states for the preparation problems.

    ``ground_state`` diagonalizes the unperturbed Hamiltonian at ``s_final``
    (full Rabi drive for Rydberg models) in the symmetric sector.
    """
    L = model.n_sites
    if kind == "ising_ghz_plus":
        amps = np.zeros(1 << L, dtype=np.complex128)
        amps[0] = amps[-1] = 1 / np.sqrt(2)
        return StateVector(L, amps)
    if kind == "rydberg_ghz_plus":
        if model.kind != "rydberg":
            raise ValueError("rydberg_ghz_plus needs a Rydberg geometry")
        parity = sublattice_parity(np.asarray(model.positions))
        if parity.min() == parity.max():
            raise ValueError("geometry has a single sublattice")
        a_index = sum(1 << j for j in range(L) if parity[j] == 0)
        b_index = sum(1 << j for j in range(L) if parity[j] == 1)
        amps = np.zeros(1 << L, dtype=np.complex128)
        amps[a_index] = amps[b_index] = 1 / np.sqrt(2)
        return StateVector(L, amps)
    if kind == "z3_cat":
        return StateVector(L, _cat_state(L, 3))
    if kind == "z4_cat":
        return StateVector(L, _cat_state(L, 4))
    if kind == "ground_state":
        from .propagator import lowest_eigenpairs

        ham = model.hamiltonian.operator(s_final)
        sym = model.symmetry
        pair = lowest_eigenpairs(ham, 1, symmetry=sym, charge=0 if sym is not None else None)[0]
        return StateVector(L, pair.vector)
    raise ValueError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
