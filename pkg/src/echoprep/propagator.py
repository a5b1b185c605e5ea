"""Time evolution under piecewise-constant controls and a Lanczos eigensolver."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import _kernels
from .hilbert import CompiledOperator, StateVector
from .models import ModelSpec, SampleTerm, Symmetry

KRYLOV_TOL = 1e-12
KRYLOV_MAX_DIM = 40
MAX_SUBSTEPS = 1 << 10
FRECHET_MODES = ("exact_frechet", "first_order")


class KrylovError(RuntimeError):
    """Krylov iteration failed; ``residual`` is the best error estimate reached."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class EigensolverError(RuntimeError):
    def __init__(self, message: str, residuals):
        super().__init__(f"{message}; residuals {np.array2string(np.asarray(residuals), precision=3)}")
        self.residuals = np.asarray(residuals)


# ---------------------------------------------------------------- protocols

@dataclass(frozen=True, eq=False)
class ControlProtocol:
    """Control values ``s_j`` held constant on N steps of length T/N.

    Value ``j`` is attributed to the step midpoint ``t_j = (j + 1/2) dt``.
    """

    values: np.ndarray
    total_time: float
    s0_target: float = 0.0
    sf_target: float = 1.0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size < 1:
            raise ValueError("a protocol needs at least one step")
        if not self.total_time > 0 or not np.isfinite(self.total_time):
            raise ValueError(f"total time must be positive, got {self.total_time}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("protocol values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "total_time", float(self.total_time))

    @property
    def n_steps(self) -> int:
        return self.values.size

    @property
    def dt(self) -> float:
        return self.total_time / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    @classmethod
    def from_function(cls, func, total_time: float, n_steps: int, **kw) -> "ControlProtocol":
        t = (np.arange(n_steps) + 0.5) * total_time / n_steps
        return cls(np.asarray(func(t), dtype=float) * np.ones(n_steps), total_time, **kw)

    @classmethod
    def linear(cls, total_time: float, n_steps: int, s0: float = 0.0, sf: float = 1.0) -> "ControlProtocol":
        return cls.from_function(lambda t: s0 + (sf - s0) * t / total_time, total_time, n_steps,
                                 s0_target=s0, sf_target=sf)

    def with_values(self, values) -> "ControlProtocol":
        return ControlProtocol(values, self.total_time, self.s0_target, self.sf_target)

    def rescaled(self, total_time: float, n_steps: int | None = None) -> "ControlProtocol":
        """Same shape on the relative grid u = t/T, new duration."""
        n = self.n_steps if n_steps is None else n_steps
        if n == self.n_steps:
            vals = self.values
        else:
            u_old = (np.arange(self.n_steps) + 0.5) / self.n_steps
            u_new = (np.arange(n) + 0.5) / n
            vals = np.interp(u_new, u_old, self.values)
            if self.n_steps > 1:
                # extend the end segments linearly instead of clamping
                lo, hi = u_new < u_old[0], u_new > u_old[-1]
                v, u = self.values, u_old
                vals[lo] = v[0] + (u_new[lo] - u[0]) * (v[1] - v[0]) / (u[1] - u[0])
                vals[hi] = v[-1] + (u_new[hi] - u[-1]) * (v[-1] - v[-2]) / (u[-1] - u[-2])
        return ControlProtocol(vals, total_time, self.s0_target, self.sf_target)

    def write(self, path) -> None:
        lines = [f"# N {self.n_steps}", f"# T {self.total_time:.17g}",
                 f"# s0_target {self.s0_target:.17g}", f"# sf_target {self.sf_target:.17g}"]
        for j, (t, s) in enumerate(zip(self.times, self.values)):
            lines.append(f"{j} {t:.17g} {s:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "ControlProtocol":
        header, rows = {}, []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2:
                    header[parts[0]] = parts[1]
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'j t_j s_j'")
            rows.append((int(parts[0]), float(parts[2])))
        if "N" not in header or "T" not in header:
            raise ValueError(f"{path}: missing '# N' or '# T' header")
        n = int(header["N"])
        if [r[0] for r in rows] != list(range(n)):
            raise ValueError(f"{path}: expected rows j = 0..{n - 1}")
        return cls(
            [r[1] for r in rows],
            float(header["T"]),
            float(header.get("s0_target", 0.0)),
            float(header.get("sf_target", 1.0)),
        )


# ---------------------------------------------------------------- exponentials

def _expm_arrays(diag, masks, coefs, extra_masks, extra_weights, psi, dt,
                 tol=KRYLOV_TOL, max_dim=KRYLOV_MAX_DIM) -> np.ndarray:
    """exp(-i dt H) psi, splitting dt into substeps when Lanczos stalls."""
    psi = np.ascontiguousarray(psi, dtype=np.complex128)
    out = np.empty_like(psi)
    max_dim = int(min(max_dim, psi.size))
    m, err = _kernels.expm_krylov(diag, masks, coefs, extra_masks, extra_weights, psi, dt, tol, max_dim, out)
    if m >= 0:
        return out
    n_sub = 2
    while n_sub <= MAX_SUBSTEPS:
        cur = psi
        ok = True
        for _ in range(n_sub):
            nxt = np.empty_like(psi)
            m, err = _kernels.expm_krylov(diag, masks, coefs, extra_masks, extra_weights, cur,
                                          dt / n_sub, tol / n_sub, max_dim, nxt)
            if m < 0:
                ok = False
                break
            cur = nxt
        if ok:
            return cur
        n_sub *= 2
    raise KrylovError("Lanczos exponential did not converge", err)


def _as_amplitudes(psi) -> np.ndarray:
    return psi.amplitudes if isinstance(psi, StateVector) else np.asarray(psi, dtype=np.complex128)


def evolve_step(H: CompiledOperator, dt: float, psi, tol: float = KRYLOV_TOL,
                max_dim: int = KRYLOV_MAX_DIM):
    """Return exp(-i H dt) psi (same type as ``psi``)."""
    x = _as_amplitudes(psi)
    if x.shape[0] != H.dim:
        raise ValueError(f"state length {x.shape[0]} does not match operator dimension {H.dim}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    out = _expm_arrays(H.diag, H.masks, H.coefs, H.extra_masks, H.extra_weights, x, dt, tol, max_dim)
    return StateVector(psi.n_sites, out) if isinstance(psi, StateVector) else out


def _block_arnoldi_step(H: CompiledOperator, dH: CompiledOperator, dt: float, top, bottom,
                        tol: float, max_dim: int):
    """Apply exp([[X, E], [0, X]]) to (top, bottom), X = -i dt H, E = -i dt dH."""
    D = bottom.size

    def op(v):
        t, b = v[:D], v[D:]
        return np.concatenate([-1j * dt * (H.matvec(t) + dH.matvec(b)), -1j * dt * H.matvec(b)])

    v0 = np.concatenate([top, bottom])
    beta0 = np.linalg.norm(v0)
    if beta0 == 0.0 or dt == 0.0:
        return top.copy(), bottom.copy(), 0.0
    max_dim = int(min(max_dim, 2 * D))
    V = np.zeros((max_dim + 1, 2 * D), dtype=np.complex128)
    Hm = np.zeros((max_dim + 1, max_dim), dtype=np.complex128)
    V[0] = v0 / beta0
    err = np.inf
    for j in range(max_dim):
        w = op(V[j])
        for _ in range(2):
            c = V[: j + 1].conj() @ w
            w = w - c @ V[: j + 1]
            Hm[: j + 1, j] += c
        h = np.linalg.norm(w)
        Hm[j + 1, j] = h
        m = j + 1
        small = scipy.linalg.expm(Hm[:m, :m])[:, 0]
        err = h * abs(small[m - 1])
        if err <= tol or h < 1e-14:
            y = beta0 * (small @ V[:m])
            return y[:D], y[D:], err
        V[j + 1] = w / h
    return None, None, err


def step_with_derivative(H: CompiledOperator, dH_ds: CompiledOperator, dt: float, psi,
                         mode: str = "exact_frechet", tol: float = KRYLOV_TOL,
                         max_dim: int = KRYLOV_MAX_DIM):
    """Return ``(U psi, (dU/ds) psi)`` for ``U = exp(-i dt H(s))``.

    ``exact_frechet`` uses the block-triangular exponential identity; the
    ``first_order`` approximation is ``-i dt (dH/ds) U psi``.
    """
    x = _as_amplitudes(psi)
    if mode == "first_order":
        u = evolve_step(H, dt, x, tol, max_dim)
        return u, -1j * dt * dH_ds.matvec(u)
    if mode != "exact_frechet":
        raise ValueError(f"unknown derivative mode {mode!r}; expected one of {FRECHET_MODES}")
    top = np.zeros_like(x)
    bottom = x
    n_sub = 1
    while n_sub <= MAX_SUBSTEPS:
        t, b = top, bottom
        for _ in range(n_sub):
            t, b, err = _block_arnoldi_step(H, dH_ds, dt / n_sub, t, b, tol / n_sub, max_dim)
            if t is None:
                break
        if t is not None:
            return b, t
        n_sub *= 2
    raise KrylovError("augmented Arnoldi exponential did not converge", err)


# ---------------------------------------------------------------- protocol evolution

class ProtocolEvolution:
    """Step-by-step propagator for one (model, protocol, disorder sample).

    ``term`` is an optional :class:`SampleTerm` living on the flip-mask
    table ``masks`` (default: the single-site masks of the model).
    """

    def __init__(self, model: ModelSpec, protocol: ControlProtocol, term: SampleTerm | None = None,
                 masks: np.ndarray | None = None, tol: float = KRYLOV_TOL, max_dim: int = KRYLOV_MAX_DIM):
        self.model = model
        self.protocol = protocol
        self.ham = model.hamiltonian
        self.masks = self.ham.single_masks if masks is None else np.asarray(masks, dtype=np.int64)
        self.term = term
        self.tol = tol
        self.max_dim = max_dim
        N = protocol.n_steps
        self.strengths = None
        if term is not None:
            strength = np.asarray(term.strength, dtype=float)
            self.strengths = np.broadcast_to(strength, (N,)) if strength.ndim == 0 else strength
            if self.strengths.shape != (N,):
                raise ValueError(f"time-dependent strength needs {N} values, got {self.strengths.shape}")
        self._pad = len(self.masks) - model.n_sites

    def _pad_coefs(self, coefs):
        return np.concatenate([coefs, np.zeros(self._pad)]) if self._pad else coefs

    def arrays(self, j: int):
        p = self.protocol
        diag, coefs = self.ham.coefficients(p.values[j], p.times[j], p.total_time)
        coefs = self._pad_coefs(coefs)
        em, ew = _kernels.EMPTY_MASKS, _kernels.EMPTY_WEIGHTS
        if self.term is not None:
            g = self.strengths[j]
            if g != 0.0:
                diag = diag + g * self.term.diag
                coefs = coefs + g * self.term.coefs
                if self.term.extra_masks.size:
                    em, ew = self.term.extra_masks, g * self.term.extra_weights
        return diag, coefs, em, ew

    def operator(self, j: int) -> CompiledOperator:
        diag, coefs, em, ew = self.arrays(j)
        return CompiledOperator(self.model.n_sites, diag, self.masks, coefs, em, ew)

    def derivative_operator(self, j: int) -> CompiledOperator:
        p = self.protocol
        diag, coefs = self.ham.derivative(p.values[j], p.times[j], p.total_time)
        return CompiledOperator(self.model.n_sites, diag, self.masks, self._pad_coefs(coefs))

    def step(self, j: int, psi: np.ndarray, sign: float = 1.0) -> np.ndarray:
        diag, coefs, em, ew = self.arrays(j)
        return _expm_arrays(diag, self.masks, coefs, em, ew, psi, sign * self.protocol.dt, self.tol, self.max_dim)

    def forward(self, psi0: np.ndarray, store: bool = False):
        """Final state, or all N+1 intermediate states when ``store``."""
        psi = np.ascontiguousarray(psi0, dtype=np.complex128)
        states = [psi] if store else None
        for j in range(self.protocol.n_steps):
            psi = self.step(j, psi)
            if store:
                states.append(psi)
        return np.array(states) if store else psi


def propagate(model: ModelSpec, protocol: ControlProtocol, sample=None, perturbation=None,
              tol: float = KRYLOV_TOL) -> StateVector:
    """Evolve the model's initial product state through ``protocol``.

    ``sample`` may be None, a field strength ε (scalar ensembles, multiplies
    ``perturbation`` or the model's V), an array of per-step field values,
    a displacement array ``(L, 2)`` for Rydberg models, or a prebuilt
    :class:`SampleTerm`.
    """
    masks, term = resolve_sample(model, sample, perturbation)
    evo = ProtocolEvolution(model, protocol, term, masks, tol)
    return StateVector(model.n_sites, evo.forward(model.initial_state().amplitudes))


def resolve_sample(model: ModelSpec, sample, perturbation=None):
    from .models import DisorderEnsemble, sample_terms

    if sample is None:
        return model.hamiltonian.single_masks, None
    if isinstance(sample, SampleTerm):
        masks = model.hamiltonian.masks_with(None)
        return masks, sample
    arr = np.asarray(sample, dtype=float)
    if model.kind == "rydberg" and arr.ndim == 2:
        masks, terms = sample_terms(model, DisorderEnsemble("displacement", arr[None], 0.0))
        return masks, terms[0]
    if arr.ndim == 0:
        masks, terms = sample_terms(model, DisorderEnsemble("scalar_field", arr[None], 0.0), perturbation)
        return masks, terms[0]
    # per-step field values
    masks, terms = sample_terms(model, DisorderEnsemble("scalar_field", np.ones(1), 0.0), perturbation)
    t = terms[0]
    return masks, SampleTerm(t.diag, t.coefs, t.extra_masks, t.extra_weights, arr)


# ---------------------------------------------------------------- eigensolver

@dataclass(frozen=True, eq=False)
class EigenPair:
    energy: float
    vector: np.ndarray
    label: int | None = None
    residual: float = field(default=0.0)


def _lowest_ritz(alpha, beta):
    if len(alpha) == 1:
        return alpha[0], np.ones(1)
    w, v = scipy.linalg.eigh_tridiagonal(alpha, beta[: len(alpha) - 1], select="i", select_range=(0, 0))
    return w[0], v[:, 0]


def _lanczos_lowest(H: CompiledOperator, v0, locked, project, tol, max_krylov, max_restarts):
    dim = H.dim
    max_krylov = int(min(max_krylov, dim))
    v = v0
    best_res = np.inf
    for _ in range(max_restarts):
        for u in locked:
            v = v - np.vdot(u, v) * u
        if project is not None:
            v = project(v)
        nrm = np.linalg.norm(v)
        if nrm < 1e-14:
            return None, None, 0.0
        V = np.zeros((max_krylov + 1, dim), dtype=np.complex128)
        V[0] = v / nrm
        alpha, beta = [], []
        theta, y = None, None
        for j in range(max_krylov):
            w = H.matvec(V[j])
            alpha.append(float(np.vdot(V[j], w).real))
            for _ in range(2):
                w = w - (V[: j + 1].conj() @ w) @ V[: j + 1]
                for u in locked:
                    w = w - np.vdot(u, w) * u
            if project is not None:
                w = project(w)
            b = np.linalg.norm(w)
            beta.append(b)
            last = j + 1 == max_krylov
            breakdown = b < 1e-12 * max(1.0, abs(alpha[-1]))
            if breakdown or last or j % 4 == 3:
                theta, y = _lowest_ritz(np.array(alpha), np.array(beta))
                res = b * abs(y[-1])
                if res <= 0.1 * tol or breakdown:
                    break
            if breakdown or last:
                break
            V[j + 1] = w / b
        m = len(alpha)
        x = y @ V[:m]
        x /= np.linalg.norm(x)
        r = np.linalg.norm(H.matvec(x) - theta * x)
        best_res = min(best_res, r)
        if r <= tol:
            return theta, x, r
        v = x
    raise EigensolverError("Lanczos did not converge", [best_res])


def lowest_eigenpairs(H: CompiledOperator, k: int = 1, tol: float = 1e-10,
                      symmetry: Symmetry | None = None, charge: int | None = None,
                      v0: np.ndarray | None = None, seed: int = 0,
                      max_krylov: int = 300, max_restarts: int = 30) -> list[EigenPair]:
    """The ``k`` lowest eigenpairs of a Hermitian operator, ascending.

    Runs Lanczos with full reorthogonalization, locking one converged
    vector at a time so degenerate levels are all found.  With ``charge``
    the search is restricted to that symmetry sector; otherwise, when a
    ``symmetry`` is supplied, every pair is labeled with its charge and
    degenerate clusters (gap < 1e-10) are rotated onto symmetry eigenvectors.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > H.dim:
        raise ValueError(f"k={k} exceeds the dimension {H.dim}")
    project = None
    if charge is not None:
        if symmetry is None:
            raise ValueError("a charge needs a symmetry")
        project = lambda x: symmetry.project(x, charge)  # noqa: E731
    rng = np.random.default_rng(seed)
    found = []
    locked = []
    for idx in range(k):
        if idx == 0 and v0 is not None:
            start = np.asarray(v0, dtype=np.complex128)
        else:
            start = rng.standard_normal(H.dim) + 1j * rng.standard_normal(H.dim)
        theta, x, r = _lanczos_lowest(H, start, locked, project, tol, max_krylov, max_restarts)
        if x is None:
            break
        locked.append(x)
        found.append((theta, x, r))
    if len(found) < k and charge is None:
        raise EigensolverError(f"only {len(found)} of {k} eigenpairs found", [f[2] for f in found])
    found.sort(key=lambda f: f[0])
    energies = np.array([f[0] for f in found])
    vectors = [f[1] for f in found]
    residuals = [f[2] for f in found]
    labels: list[int | None] = [charge] * len(found)
    if symmetry is not None and charge is None:
        vectors, labels = _label_by_symmetry(energies, vectors, symmetry)
    return [EigenPair(float(e), v, lab, r) for e, v, lab, r in zip(energies, vectors, labels, residuals)]


def _label_by_symmetry(energies, vectors, symmetry: Symmetry, gap: float = 1e-10):
    clusters, start = [], 0
    for i in range(1, len(energies) + 1):
        if i == len(energies) or energies[i] - energies[i - 1] >= gap:
            clusters.append(range(start, i))
            start = i
    out_vecs, out_labels = list(vectors), [None] * len(vectors)
    r = symmetry.order
    for cl in clusters:
        block = np.array([vectors[i] for i in cl])
        S = block.conj() @ np.array([symmetry.apply(v) for v in block]).T
        if len(cl) > 1:
            evals, evecs = np.linalg.eig(S)
            order = np.argsort(np.mod(np.round(np.angle(evals) * r / (2 * np.pi)), r), kind="stable")
            evals, evecs = evals[order], evecs[:, order]
            q, _ = np.linalg.qr(evecs)
            block = q.T @ block
            S = block.conj() @ np.array([symmetry.apply(v) for v in block]).T
        for n, i in enumerate(cl):
            out_vecs[i] = block[n]
            diag = S[n, n]
            if abs(abs(diag) - 1) < 1e-6:
                out_labels[i] = int(np.round(np.angle(diag) * r / (2 * np.pi))) % r
    return out_vecs, out_labels
