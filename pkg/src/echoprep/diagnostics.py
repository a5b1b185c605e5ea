"""Locating the finite-size transition and checking infidelity scaling.

The control coordinate λ is s for Ising chains and Δ/Ω0 on the Rabi
plateau for Rydberg arrays.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .hilbert import CompiledOperator, expectation
from .models import ModelSpec, basis_bits
from .propagator import lowest_eigenpairs


class WindowError(RuntimeError):
    """A diagnostic peaks on the edge of the scanned range."""


def hamiltonian_at(model: ModelSpec, lam: float) -> CompiledOperator:
    if model.kind == "ising":
        return model.hamiltonian.operator(lam)
    return model.hamiltonian.operator(float(model.control_from_detuning(lam * model.omega0)))


def excitation_operator(model: ModelSpec) -> CompiledOperator:
    """Number of excitations above the model's initial product state.

    Rydberg: Σ n_j (atoms out of |g⟩).  Ising: Σ (1 − σx_j)/2 (spins out
    of |+⟩).
    """
    L = model.n_sites
    if model.kind == "rydberg":
        diag = basis_bits(L).sum(axis=1).astype(float)
        return CompiledOperator(L, diag, np.zeros(0, dtype=np.int64), np.zeros(0))
    return CompiledOperator(L, np.full(1 << L, L / 2), np.array([1 << j for j in range(L)], dtype=np.int64),
                            np.full(L, -0.5))


def ground_state(model: ModelSpec, lam: float, tol: float = 1e-12) -> np.ndarray:
    """Lowest state in the symmetric sector (the plain minimum without symmetry)."""
    H = hamiltonian_at(model, lam)
    sym = model.symmetry
    if sym is None:
        return lowest_eigenpairs(H, 1, tol=tol)[0].vector
    return lowest_eigenpairs(H, 1, tol=tol, symmetry=sym, charge=0)[0].vector


def _check_grid(lam_grid, dlam):
    lam = np.asarray(lam_grid, dtype=float)
    if not dlam > 0:
        raise ValueError("δλ must be positive")
    if lam.ndim != 1 or np.any(np.diff(lam) <= 0):
        raise ValueError("λ grid must be strictly ascending")
    return lam


def excitation_derivative(model: ModelSpec, lam_grid, dlam: float = 0.002) -> np.ndarray:
    """Forward difference (⟨N⟩(λ+δλ) − ⟨N⟩(λ))/δλ in the ground state."""
    lam = _check_grid(lam_grid, dlam)
    op = excitation_operator(model)
    out = np.empty(lam.size)
    for i, x in enumerate(lam):
        n0 = expectation(op, ground_state(model, x))
        n1 = expectation(op, ground_state(model, x + dlam))
        out[i] = (n1 - n0) / dlam
    return out


def fidelity_susceptibility(model: ModelSpec, lam_grid, dlam: float = 0.002) -> np.ndarray:
    """χ = −(2/δλ²) ln|⟨E0(λ)|E0(λ+δλ)⟩|."""
    lam = _check_grid(lam_grid, dlam)
    out = np.empty(lam.size)
    for i, x in enumerate(lam):
        ov = abs(np.vdot(ground_state(model, x), ground_state(model, x + dlam)))
        if ov < 1e-6:
            raise RuntimeError(f"ground-state overlap vanishes at λ={x}: degenerate or level crossing")
        out[i] = max(0.0, -2.0 * np.log(min(ov, 1.0)) / dlam ** 2)
    return out


@dataclass
class CriticalWindow:
    lam_lo: float
    lam_hi: float
    peak_excitation: float
    peak_susceptibility: float

    @property
    def center(self) -> float:
        return 0.5 * (self.lam_lo + self.lam_hi)

    def to_dict(self) -> dict:
        return {"lambda_lo": self.lam_lo, "lambda_hi": self.lam_hi,
                "peak_excitation": self.peak_excitation, "peak_susceptibility": self.peak_susceptibility}


def window_from_scans(lam_grid, dN, chi) -> CriticalWindow:
    lam = np.asarray(lam_grid, dtype=float)
    peaks = []
    for name, values in (("excitation derivative", dN), ("fidelity susceptibility", chi)):
        k = int(np.argmax(values))  # first index on ties, i.e. the smaller λ
        if k == 0 or k == lam.size - 1:
            raise WindowError(f"{name} peaks at the edge of the range (λ={lam[k]}); extend the scan")
        peaks.append(float(lam[k]))
    return CriticalWindow(min(peaks), max(peaks), peaks[0], peaks[1])


def critical_window(model: ModelSpec, lam_grid, dlam: float = 0.002):
    """Window bounded by the two diagnostic peaks; returns (window, dN, χ)."""
    dN = excitation_derivative(model, lam_grid, dlam)
    chi = fidelity_susceptibility(model, lam_grid, dlam)
    return window_from_scans(lam_grid, dN, chi), dN, chi


def critical_control(model: ModelSpec, window: CriticalWindow) -> float:
    """Control value s at the window centre."""
    if model.kind == "ising":
        return window.center
    return float(model.control_from_detuning(window.center * model.omega0))


def write_diagnostics_csv(path, lam_grid, dN, chi) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "dN_dlambda", "chi"])
        for row in zip(lam_grid, dN, chi):
            w.writerow([f"{x:.17g}" for x in row])


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residual: float
    n_points: int
    n_excluded: int
    poor_collapse: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def scaling_fit(h, L, infidelity, residual_flag: float = 0.1) -> ScalingFit:
    """Pooled least squares of log I against log(|h| L²).

    ``residual`` is the RMS deviation of log I from the pooled line; a
    collapse is flagged poor when it exceeds ``residual_flag``.
    """
    h, L, I = (np.asarray(a, dtype=float).ravel() for a in (h, L, infidelity))
    if not (h.size == L.size == I.size):
        raise ValueError("h, L and infidelity must have equal lengths")
    keep = (I > 0) & (h != 0)
    if (~keep).any():
        warnings.warn(f"excluding {int((~keep).sum())} points with non-positive infidelity or zero field")
    sizes = np.unique(L[keep])
    if sizes.size < 2:
        raise ValueError("need at least two system sizes")
    for size in sizes:
        if np.sum(L[keep] == size) < 3:
            raise ValueError(f"need at least three fields for L={size:g}")
    x = np.log(np.abs(h[keep]) * L[keep] ** 2)
    y = np.log(I[keep])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((y - A @ [slope, intercept]) ** 2)))
    return ScalingFit(float(slope), float(intercept), resid, int(keep.sum()), int((~keep).sum()),
                      resid > residual_flag)
