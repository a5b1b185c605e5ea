"""Ising and Rydberg Hamiltonians, geometries, perturbations and disorder.

Energies are in units of ``J0`` (Ising) or ``Ω0`` (Rydberg); lengths in
units of the lattice spacing ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .hilbert import CompiledOperator, OperatorSpec, StateVector, basis_bits, sublattice_parity

PERT_KINDS = ("Z", "ZZZ", "X", "XX")
GEOMETRY_KINDS = ("chain_ring", "square", "ladder", "ring")


def ising_couplings(s: float, J0: float = 1.0) -> tuple[float, float]:
    """Return ``(J, g) = (J0 sin(πs/2), J0 cos(πs/2))``."""
    return J0 * np.sin(np.pi * s / 2), J0 * np.cos(np.pi * s / 2)


def ising_coupling_derivatives(s: float, J0: float = 1.0) -> tuple[float, float]:
    return J0 * np.pi / 2 * np.cos(np.pi * s / 2), -J0 * np.pi / 2 * np.sin(np.pi * s / 2)


def ising_perturbation(n_sites: int, kind: str = "Z") -> OperatorSpec:
    """Translation-invariant perturbation strings on a periodic chain.

    ``Z``: Σ σz_j, ``ZZZ``: Σ σz_{j-1}σz_jσz_{j+1}, ``X``: Σ σx_j and
    ``XX``: Σ σx_jσx_{j+1}.
    """
    L = n_sites
    if kind == "Z":
        terms = [(1.0, {j: "Z"}) for j in range(L)]
    elif kind == "X":
        terms = [(1.0, {j: "X"}) for j in range(L)]
    elif kind == "ZZZ":
        if L < 3:
            raise ValueError("ZZZ needs at least 3 sites")
        terms = [(1.0, {(j - 1) % L: "Z", j: "Z", (j + 1) % L: "Z"}) for j in range(L)]
    elif kind == "XX":
        terms = [(1.0, {j: "X", (j + 1) % L: "X"}) for j in _ring_bonds(L)]
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}; expected one of {PERT_KINDS}")
    return OperatorSpec(L, tuple(terms), f"V^{kind}")


def _ring_bonds(L: int) -> range:
    # two sites share a single bond; counting it twice would double the coupling
    return range(L) if L > 2 else range(1)


def ising_zz_diagonal(n_sites: int) -> np.ndarray:
    """Σ_j σz_j σz_{j+1} with periodic boundaries, as a diagonal."""
    z = 1 - 2 * basis_bits(n_sites)
    L = n_sites
    return sum((z[:, j] * z[:, (j + 1) % L] for j in _ring_bonds(L)), np.zeros(1 << L)).astype(float)


def ising_operator(n_sites: int, s: float, h: float = 0.0, pert: OperatorSpec | None = None,
                   J0: float = 1.0) -> CompiledOperator:
    J, g = ising_couplings(s, J0)
    zz = ising_zz_diagonal(n_sites)
    op = CompiledOperator(
        n_sites,
        -J * zz,
        np.array([1 << j for j in range(n_sites)], dtype=np.int64),
        np.full(n_sites, -g),
    )
    if h != 0.0:
        pert = pert if pert is not None else ising_perturbation(n_sites, "Z")
        op = op + pert.compiled.scaled(h)
    return op


def ising_apply(s: float, h: float, pert: OperatorSpec | None, psi: StateVector,
                J0: float = 1.0) -> StateVector:
    """[H0(s) + h V] psi for the periodic transverse-field Ising chain."""
    op = ising_operator(psi.n_sites, s, h, pert, J0)
    return StateVector(psi.n_sites, op.matvec(psi.amplitudes))


# ---------------------------------------------------------------- geometry

def build_geometry(kind: str, dims) -> np.ndarray:
    """Atom positions (L, 2) in units of the lattice spacing.

    ``square`` takes ``(m, n)`` (m columns along x), ``ladder`` takes
    ``(n, 2)`` or ``n``, ``ring`` and ``chain_ring`` take ``L``.
    """
    dims = tuple(np.atleast_1d(dims).astype(int).tolist())
    if any(d <= 0 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    if kind == "square":
        if len(dims) != 2:
            raise ValueError("square geometry needs (m, n)")
        m, n = dims
        return np.array([(x, y) for y in range(n) for x in range(m)], dtype=float)
    if kind == "ladder":
        n = dims[0]
        if len(dims) > 1 and dims[1] != 2:
            raise ValueError("a ladder has two legs")
        return np.array([(x, y) for y in range(2) for x in range(n)], dtype=float)
    if kind == "chain_ring":
        return np.array([(x, 0) for x in range(dims[0])], dtype=float)
    if kind == "ring":
        L = dims[0]
        radius = 1 / (2 * np.sin(np.pi / L))
        phi = 2 * np.pi * np.arange(L) / L
        return np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
    raise ValueError(f"unsupported geometry kind {kind!r}; expected one of {GEOMETRY_KINDS}")


def write_geometry(path, positions) -> None:
    with open(path, "w") as fh:
        for j, (x, y) in enumerate(np.asarray(positions, dtype=float)):
            fh.write(f"{j} {x:.17g} {y:.17g}\n")


def read_geometry(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'id x y', got {line!r}")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: atom ids must be 0..L-1")
    return np.array([r[1:] for r in rows])


def _pair_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def interaction_matrix(positions, R_b: float, truncation_radius: float | None = None,
                       omega0: float = 1.0, mask_positions=None) -> np.ndarray:
    """Van der Waals couplings ``U_jk = Ω0 (R_b / r_jk)^6``.

    Pairs farther apart than ``truncation_radius`` are zeroed.  The cut is
    decided on ``mask_positions`` when given, so displaced copies of an
    array keep the same set of interacting pairs as the nominal one.
    """
    pos = np.asarray(positions, dtype=float)
    r = _pair_distances(pos)
    off = ~np.eye(len(pos), dtype=bool)
    if np.any(r[off] < 1e-12):
        j, k = np.argwhere((r < 1e-12) & off)[0]
        raise ValueError(f"atoms {j} and {k} coincide")
    U = np.zeros_like(r)
    U[off] = omega0 * (R_b / r[off]) ** 6
    if truncation_radius is not None:
        ref = r if mask_positions is None else _pair_distances(np.asarray(mask_positions, dtype=float))
        U[ref > truncation_radius + 1e-12] = 0.0
    return U


def pair_diagonal(U: np.ndarray) -> np.ndarray:
    """Σ_{j<k} U_jk n_j n_k as a diagonal over the basis."""
    n = basis_bits(U.shape[0]).astype(float)
    return 0.5 * np.einsum("ij,jk,ik->i", n, U, n)


def rydberg_operator(omega: float, delta: float, U: np.ndarray) -> CompiledOperator:
    L = U.shape[0]
    count = basis_bits(L).sum(axis=1).astype(float)
    return CompiledOperator(
        L,
        -delta * count + pair_diagonal(U),
        np.array([1 << j for j in range(L)], dtype=np.int64),
        np.full(L, omega / 2),
    )


def rydberg_apply(omega: float, delta: float, U: np.ndarray, psi: StateVector) -> StateVector:
    """Σ_j (Ω/2 σx_j − Δ n_j) + Σ_{j<k} U_jk n_j n_k applied to psi."""
    U = np.asarray(U, dtype=float)
    if not np.allclose(U, U.T):
        raise ValueError("interaction matrix must be symmetric")
    if U.shape[0] != psi.n_sites:
        raise ValueError(f"interaction matrix has {U.shape[0]} sites, state has {psi.n_sites}")
    op = rydberg_operator(omega, delta, U)
    return StateVector(psi.n_sites, op.matvec(psi.amplitudes))


def displacement_pair_shift(positions, dx, R_b: float, omega0: float = 1.0,
                            truncation_radius: float | None = None) -> np.ndarray:
    """Change of the pair couplings when atoms move by ``dx``."""
    pos = np.asarray(positions, dtype=float)
    moved = pos + np.asarray(dx, dtype=float)
    U_new = interaction_matrix(moved, R_b, truncation_radius, omega0, mask_positions=pos)
    U_old = interaction_matrix(pos, R_b, truncation_radius, omega0)
    return U_new - U_old


def displacement_perturbation(positions, dx, R_b: float, sigma: float, omega0: float = 1.0,
                              truncation_radius: float | None = None) -> OperatorSpec:
    """Diagonal pair operator V with H(displaced) = H(nominal) + σ V.

    The coefficient of n_j n_k is ``(1/σ) Ω0 [(R_b/r'_jk)^6 − (R_b/r_jk)^6]``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive to normalize the displacement operator")
    dU = displacement_pair_shift(positions, dx, R_b, omega0, truncation_radius) / sigma
    L = dU.shape[0]
    terms = tuple(
        (dU[j, k], {j: "N", k: "N"}) for j in range(L) for k in range(j + 1, L) if dU[j, k] != 0.0
    )
    return OperatorSpec(L, terms, "displacement")


# ---------------------------------------------------------------- symmetry

@dataclass(frozen=True, eq=False)
class Symmetry:
    """Unitary basis permutation S of finite order (S^order = 1).

    ``perm[i]`` is the image of basis state ``i``.
    """

    perm: np.ndarray
    order: int
    name: str = ""

    def apply(self, x: np.ndarray, power: int = 1) -> np.ndarray:
        out = np.asarray(x)
        for _ in range(power % self.order):
            nxt = np.empty_like(out)
            nxt[..., self.perm] = out
            out = nxt
        return out

    def character(self, charge: int, power: int = 1) -> complex:
        return np.exp(2j * np.pi * charge * power / self.order)

    def project(self, x: np.ndarray, charge: int) -> np.ndarray:
        """(1/r) Σ_m χ^{-m} S^m x, the projector onto S = exp(2πi q / r)."""
        acc = np.zeros(x.shape, dtype=np.complex128)
        y = np.asarray(x, dtype=np.complex128)
        for m in range(self.order):
            acc += np.conj(self.character(charge, m)) * y
            y = self.apply(y)
        return acc / self.order


def global_flip(n_sites: int) -> Symmetry:
    full = (1 << n_sites) - 1
    return Symmetry(np.arange(1 << n_sites) ^ full, 2, "global flip")


def site_permutation_symmetry(site_perm: Sequence[int], name: str = "") -> Symmetry:
    site_perm = np.asarray(site_perm)
    L = len(site_perm)
    bits = basis_bits(L)
    perm = (bits << site_perm[None, :]).sum(axis=1)
    order, p = 1, site_perm.copy()
    while not np.array_equal(p, np.arange(L)):
        p = site_perm[p]
        order += 1
    return Symmetry(perm, order, name)


def _match_sites(pos: np.ndarray, image: np.ndarray, atol: float = 1e-9) -> np.ndarray | None:
    d = _pair_distances(np.vstack([pos, image]))[: len(pos), len(pos):]
    match = d.argmin(axis=0)
    if np.all(d[match, np.arange(len(pos))] < atol) and len(set(match.tolist())) == len(pos):
        # image[j] sits on site match[j], i.e. site j moves to match[j]
        return match
    return None


def lattice_symmetries(positions: np.ndarray):
    """Point isometries of a finite array (reflections, 180° rotation)."""
    pos = np.asarray(positions, dtype=float)
    c = (pos.max(axis=0) + pos.min(axis=0)) / 2
    maps = {
        "reflect x": lambda p: np.column_stack([2 * c[0] - p[:, 0], p[:, 1]]),
        "reflect y": lambda p: np.column_stack([p[:, 0], 2 * c[1] - p[:, 1]]),
        "rotate 180": lambda p: 2 * c - p,
    }
    found = []
    for name, f in maps.items():
        m = _match_sites(pos, f(pos))
        if m is not None and not np.array_equal(m, np.arange(len(pos))):
            found.append((name, m))
    return found


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class ModelSpec:
    """Ising chain or Rydberg array description.

    Ising fields: ``J0`` and ``pert_kind``.  Rydberg fields: ``positions``,
    ``R_b``, ``omega0``, ``rise_fraction`` (window rise time as a fraction
    of ``T``), ``truncation_radius`` and the affine detuning map
    ``Δ(s) = delta_min + (delta_max − delta_min) s`` in units of ``Ω0``.
    """

    kind: str
    n_sites: int
    J0: float = 1.0
    pert_kind: str = "Z"
    positions: tuple | None = None
    R_b: float = 1.15
    omega0: float = 1.0
    rise_fraction: float = 0.25
    truncation_radius: float | None = None
    delta_min: float = -1.0
    delta_max: float = 3.0
    geometry: str = ""

    def __post_init__(self):
        if self.kind not in ("ising", "rydberg"):
            raise ValueError(f"model kind must be 'ising' or 'rydberg', got {self.kind!r}")
        if self.n_sites < 2:
            raise ValueError("a model needs at least 2 sites")
        if self.kind == "ising":
            if self.pert_kind not in PERT_KINDS:
                raise ValueError(f"unknown perturbation kind {self.pert_kind!r}")
            return
        if self.positions is None:
            raise ValueError("a Rydberg model needs atom positions")
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape != (self.n_sites, 2):
            raise ValueError(f"positions must have shape ({self.n_sites}, 2), got {pos.shape}")
        object.__setattr__(self, "positions", tuple(map(tuple, pos.tolist())))
        if not self.R_b > 0:
            raise ValueError("R_b must be positive")
        if not 0 < self.rise_fraction <= 0.5:
            raise ValueError("rise_fraction must lie in (0, 0.5]")
        r = _pair_distances(pos)
        if np.any(r[~np.eye(len(pos), dtype=bool)] < 1e-12):
            raise ValueError("atom positions must be pairwise distinct")
        if self.delta_max == self.delta_min:
            raise ValueError("detuning map must not be constant")

    @classmethod
    def ising(cls, n_sites: int, pert_kind: str = "Z", J0: float = 1.0) -> "ModelSpec":
        return cls("ising", n_sites, J0=J0, pert_kind=pert_kind, geometry="chain_ring")

    @classmethod
    def rydberg(cls, geometry: str, dims, **kw) -> "ModelSpec":
        pos = build_geometry(geometry, dims)
        return cls("rydberg", len(pos), positions=tuple(map(tuple, pos)), geometry=geometry, **kw)

    # ---- control maps
    def detuning(self, s):
        return self.omega0 * (self.delta_min + (self.delta_max - self.delta_min) * np.asarray(s))

    def control_from_detuning(self, delta):
        return (np.asarray(delta) / self.omega0 - self.delta_min) / (self.delta_max - self.delta_min)

    # ---- derived objects
    @cached_property
    def interactions(self) -> np.ndarray:
        if self.kind != "rydberg":
            raise ValueError("interactions are defined for Rydberg models only")
        return interaction_matrix(np.asarray(self.positions), self.R_b, self.truncation_radius, self.omega0)

    def perturbation(self) -> OperatorSpec:
        if self.kind != "ising":
            raise ValueError("Rydberg perturbations are sample-specific; use displacement_perturbation")
        return ising_perturbation(self.n_sites, self.pert_kind)

    @cached_property
    def symmetry(self) -> Symmetry | None:
        """Symmetry exchanging the two ordered states, or None if absent."""
        if self.kind == "ising":
            return global_flip(self.n_sites)
        pos = np.asarray(self.positions)
        if self.geometry == "ring":
            return site_permutation_symmetry(np.roll(np.arange(self.n_sites), 1), "translation")
        try:
            parity = sublattice_parity(pos)
        except ValueError:
            parity = None
        candidates = lattice_symmetries(pos)
        for name, m in candidates:
            if parity is not None and np.all(parity[m] != parity):
                return site_permutation_symmetry(m, name)
        return None

    @cached_property
    def hamiltonian(self) -> "ControlledHamiltonian":
        return ControlledHamiltonian(self)

    def initial_state(self) -> StateVector:
        if self.kind == "ising":
            return StateVector.product([1 / np.sqrt(2), 1 / np.sqrt(2)], self.n_sites)
        return StateVector.basis_state(self.n_sites, 0)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "n_sites": self.n_sites}
        if self.kind == "ising":
            out.update(J0=self.J0, pert_kind=self.pert_kind)
        else:
            out.update(
                geometry=self.geometry,
                positions=[list(p) for p in self.positions],
                R_b=self.R_b,
                omega0=self.omega0,
                rise_fraction=self.rise_fraction,
                truncation_radius=self.truncation_radius,
                delta_min=self.delta_min,
                delta_max=self.delta_max,
            )
        return out


def window(t, T: float, rise_fraction: float):
    """Cosine-tapered Rabi envelope: 0 at both ends, 1 on the plateau.

    Rises as ½[1 − cos(π t / (αT))] on [0, αT], stays at 1 up to T/2 and
    is mirrored about T/2.
    """
    t_arr = np.asarray(t, dtype=float)
    if not 0 < rise_fraction <= 0.5:
        raise ValueError("rise_fraction must lie in (0, 0.5]")
    tol = 1e-12 * max(T, 1.0)
    if np.any(t_arr < -tol) or np.any(t_arr > T + tol):
        raise ValueError(f"window time outside [0, {T}]")
    u = np.minimum(t_arr, T - t_arr)
    rise = rise_fraction * T
    w = np.where(u < rise, 0.5 * (1 - np.cos(np.pi * np.clip(u, 0, None) / rise)), 1.0)
    return float(w) if np.ndim(w) == 0 else w


class ControlledHamiltonian:
    """H0(s, t) on a fixed flip-mask table, plus its s-derivative.

    The flip table always lists the L single-site masks first; extra masks
    are appended when a perturbation needs them (e.g. σxσx bonds).
    """

    def __init__(self, model: ModelSpec):
        self.model = model
        L = model.n_sites
        self.n_sites = L
        self.dim = 1 << L
        self.single_masks = np.array([1 << j for j in range(L)], dtype=np.int64)
        if model.kind == "ising":
            self.zz = ising_zz_diagonal(L)
        else:
            self.count = basis_bits(L).sum(axis=1).astype(float)
            self.pairs = pair_diagonal(model.interactions)

    def masks_with(self, extra: np.ndarray | None = None) -> np.ndarray:
        if extra is None or len(extra) == 0:
            return self.single_masks
        new = [m for m in np.asarray(extra).tolist() if m not in set(self.single_masks.tolist())]
        return np.concatenate([self.single_masks, np.array(sorted(set(new)), dtype=np.int64)])

    def coefficients(self, s: float, t: float | None = None, T: float | None = None):
        """(diag, single-mask coefficients) of H0."""
        m = self.model
        if m.kind == "ising":
            J, g = ising_couplings(s, m.J0)
            return -J * self.zz, np.full(self.n_sites, -g)
        omega = m.omega0 if t is None else m.omega0 * window(t, T, m.rise_fraction)
        return -float(m.detuning(s)) * self.count + self.pairs, np.full(self.n_sites, omega / 2)

    def derivative(self, s: float, t: float | None = None, T: float | None = None):
        """(diag, single-mask coefficients) of dH0/ds."""
        m = self.model
        if m.kind == "ising":
            dJ, dg = ising_coupling_derivatives(s, m.J0)
            return -dJ * self.zz, np.full(self.n_sites, -dg)
        slope = m.omega0 * (m.delta_max - m.delta_min)
        return -slope * self.count, np.zeros(self.n_sites)

    def operator(self, s: float, t: float | None = None, T: float | None = None,
                 perturbation: CompiledOperator | None = None, strength: float = 0.0) -> CompiledOperator:
        diag, coefs = self.coefficients(s, t, T)
        op = CompiledOperator(self.n_sites, diag, self.single_masks, coefs)
        if perturbation is not None and strength != 0.0:
            op = op + perturbation.scaled(strength)
        return op

    def derivative_operator(self, s: float, t: float | None = None, T: float | None = None) -> CompiledOperator:
        diag, coefs = self.derivative(s, t, T)
        return CompiledOperator(self.n_sites, diag, self.single_masks, coefs)


# ---------------------------------------------------------------- disorder

@dataclass(frozen=True, eq=False)
class DisorderEnsemble:
    """Static perturbation samples.

    ``scalar_field`` samples are field strengths ε_ℓ (shape ``(N_s,)``);
    ``displacement`` samples are per-atom shifts δx (shape ``(N_s, L, 2)``).
    """

    kind: str
    samples: np.ndarray
    sigma: float
    master_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("scalar_field", "displacement"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        samples = np.asarray(self.samples, dtype=float)
        if samples.shape[0] < 1:
            raise ValueError("an ensemble needs at least one sample")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "scalar_field" and samples.ndim != 1:
            raise ValueError("scalar samples must be one-dimensional")
        if self.kind == "displacement" and (samples.ndim != 3 or samples.shape[2] != 2):
            raise ValueError("displacement samples must have shape (N_s, L, 2)")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def mirrored(self) -> "DisorderEnsemble":
        return DisorderEnsemble(self.kind, -self.samples, self.sigma, self.master_seed)

    @classmethod
    def scalar(cls, values: Sequence[float], sigma: float | None = None) -> "DisorderEnsemble":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls("scalar_field", values, float(np.max(np.abs(values))) if sigma is None else sigma)


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Independent, order-free stream for sample ``index``."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))


def sample_disorder(model: ModelSpec, sigma: float, n_samples: int, master_seed: int = 0) -> DisorderEnsemble:
    """Ising: symmetric grid on [−σ, σ]; Rydberg: gaussian 2D displacements."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if model.kind == "ising":
        if n_samples == 1 or sigma == 0:
            values = np.zeros(n_samples)
        else:
            values = -sigma + 2 * sigma * np.arange(n_samples) / (n_samples - 1)
        return DisorderEnsemble("scalar_field", values, sigma, master_seed)
    L = model.n_sites
    shifts = np.empty((n_samples, L, 2))
    for ell in range(n_samples):
        rng = np.random.default_rng(sample_seed(master_seed, ell))
        shifts[ell] = sigma * rng.standard_normal((L, 2))
    return DisorderEnsemble("displacement", shifts, sigma, master_seed)


@dataclass(frozen=True)
class SampleTerm:
    """Additive perturbation ``strength × term`` for one disorder sample.

    ``term`` lives on the mask table of the owning propagation; ``strength``
    is either a scalar or one value per time step (time-dependent noise).
    """

    diag: np.ndarray
    coefs: np.ndarray
    extra_masks: np.ndarray = field(default_factory=lambda: _kernels.EMPTY_MASKS)
    extra_weights: np.ndarray = field(default_factory=lambda: _kernels.EMPTY_WEIGHTS)
    strength: object = 1.0


def sample_terms(model: ModelSpec, ensemble: DisorderEnsemble | None,
                 perturbation: OperatorSpec | None = None):
    """Per-sample perturbation terms and the shared flip-mask table.

    Returns ``(masks, terms)``.  Scalar ensembles use ``perturbation``
    (default: the model's own V); displacement ensembles add the exact
    change of pair couplings for each displaced array.
    """
    ham = model.hamiltonian
    if ensemble is None:
        return ham.single_masks, [None]
    if ensemble.kind == "displacement":
        if model.kind != "rydberg":
            raise ValueError("displacement disorder needs a Rydberg model")
        if ensemble.samples.shape[1] != model.n_sites:
            raise ValueError("displacement samples do not match the number of atoms")
        masks = ham.single_masks
        terms = []
        pos = np.asarray(model.positions)
        for dx in ensemble.samples:
            if not np.any(dx):
                terms.append(None)
                continue
            dU = displacement_pair_shift(pos, dx, model.R_b, model.omega0, model.truncation_radius)
            terms.append(SampleTerm(pair_diagonal(dU), np.zeros(len(masks))))
        return masks, terms
    if perturbation is None:
        perturbation = model.perturbation()
    comp = perturbation.compiled
    if comp.n_sites != model.n_sites:
        raise ValueError("perturbation acts on a different number of sites")
    masks = ham.masks_with(comp.masks)
    coefs = comp.on_masks(masks)
    terms = []
    for eps in ensemble.samples:
        if eps == 0.0:
            terms.append(None)
        else:
            terms.append(SampleTerm(comp.diag, coefs, comp.extra_masks, comp.extra_weights, float(eps)))
    return masks, terms
