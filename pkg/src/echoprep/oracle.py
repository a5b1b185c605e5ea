"""First-order leakage estimates from gauge-fixed low-energy spectra.

The estimate for a weak static perturbation ε V is

    I ≈ ε² Σ_k | ∫ dt V_k0(s(t)) exp(-i ∫_t^T δE_k(s(τ)) dτ) |²,

with δE_k = E_k − E_0 and V_k0 = ⟨E_k|V|E_0⟩ taken along the adiabatic
path.  Index k runs over the lowest state of each symmetry sector other
than the ground-state sector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .hilbert import OperatorSpec
from .models import ModelSpec
from .propagator import ControlProtocol, lowest_eigenpairs

ISING_CRITICAL_POINT = 0.5


class GaugeTrackingError(RuntimeError):
    """Eigenvector tracking lost between two neighbouring grid points."""


@dataclass(frozen=True, eq=False)
class SpectralScan:
    """Low-energy data on an ascending grid of control values.

    ``energies[i, k]`` is E_k(s_i); ``matrix_elements[i, k]`` is
    ⟨E_k|V|E_0⟩ in the tracked gauge (column 0 holds ⟨E_0|V|E_0⟩).
    """

    s: np.ndarray
    energies: np.ndarray
    matrix_elements: np.ndarray
    overlaps: np.ndarray = field(default=None)

    @property
    def n_levels(self) -> int:
        return self.energies.shape[1]

    @property
    def gaps(self) -> np.ndarray:
        return self.energies - self.energies[:, :1]

    def interpolate(self, s, clip: bool = False):
        """Gaps and matrix elements at arbitrary ``s`` (linear in s)."""
        s = np.asarray(s, dtype=float)
        lo, hi = self.s[0], self.s[-1]
        if not clip and (np.any(s < lo - 1e-12) or np.any(s > hi + 1e-12)):
            raise ValueError(f"control values span [{s.min():.6g}, {s.max():.6g}] outside scan range [{lo:.6g}, {hi:.6g}]")
        s = np.clip(s, lo, hi)
        gaps = np.stack([np.interp(s, self.s, self.gaps[:, k]) for k in range(self.n_levels)], axis=-1)
        v = np.stack(
            [np.interp(s, self.s, self.matrix_elements[:, k].real)
             + 1j * np.interp(s, self.s, self.matrix_elements[:, k].imag) for k in range(self.n_levels)],
            axis=-1,
        )
        return gaps, v

    def write_csv(self, path) -> None:
        n = self.n_levels
        header = ["s"] + [f"E{k}" for k in range(n)]
        for k in range(1, n):
            header += [f"ReV{k}0", f"ImV{k}0"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, s in enumerate(self.s):
                row = [s] + list(self.energies[i])
                for k in range(1, n):
                    row += [self.matrix_elements[i, k].real, self.matrix_elements[i, k].imag]
                w.writerow([f"{x:.17g}" for x in row])


def _fix_first_gauge(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    # first index among the (numerically) largest amplitudes
    idx = int(np.flatnonzero(mag >= mag.max() * (1 - 1e-8))[0])
    return v * (np.conj(v[idx]) / mag[idx])


def scan_hamiltonian(model: ModelSpec, s: float, rabi: str = "plateau"):
    """Static H0 at control value ``s``.

    For Rydberg models ``rabi='plateau'`` uses Ω = Ω0 and ``'window'``
    uses Ω0 w(sT) with s read as the relative time of a linear ramp.
    """
    ham = model.hamiltonian
    if model.kind == "rydberg" and rabi == "window":
        return ham.operator(s, s, 1.0)
    if rabi not in ("plateau", "window"):
        raise ValueError(f"unknown Rabi profile {rabi!r}")
    return ham.operator(s)


def lowest_states(model: ModelSpec, s: float, V: OperatorSpec | None, n_levels: int = 2,
                  rabi: str = "plateau", tol: float = 1e-10):
    """Ground state plus the lowest state of each coupled symmetry sector.

    With a symmetry of order r, level k (1 ≤ k < n_levels) is the lowest
    state in the sector of charge k·r/n_levels that V connects to the
    ground state; when V does not connect them the plain sector minimum is
    used.  Without a symmetry the n_levels lowest eigenpairs are returned.
    """
    H = scan_hamiltonian(model, s, rabi)
    sym = model.symmetry
    if sym is None:
        pairs = lowest_eigenpairs(H, n_levels, tol=tol)
        return [p.energy for p in pairs], [p.vector for p in pairs]
    if sym.order % n_levels:
        raise ValueError(f"symmetry of order {sym.order} has no Z{n_levels} subgroup of charges")
    g = lowest_eigenpairs(H, 1, tol=tol, symmetry=sym, charge=0)[0]
    energies, vectors = [g.energy], [g.vector]
    Vg = V.compiled.matvec(g.vector) if V is not None else None
    for k in range(1, n_levels):
        q = k * sym.order // n_levels
        start = None
        if Vg is not None:
            proj = sym.project(Vg, q)
            if np.linalg.norm(proj) > 1e-8 * max(1.0, np.linalg.norm(Vg)):
                start = proj
        pair = lowest_eigenpairs(H, 1, tol=tol, symmetry=sym, charge=q, v0=start, seed=k)[0]
        energies.append(pair.energy)
        vectors.append(pair.vector)
    return energies, vectors


def spectral_scan(model: ModelSpec, V: OperatorSpec, s_grid, n_levels: int = 2,
                  rabi: str = "plateau", tol: float = 1e-10, min_overlap: float = 0.5) -> SpectralScan:
    """Gauge-tracked energies and matrix elements over ``s_grid``.

    Each eigenvector's phase is chosen so that its overlap with the same
    level at the previous grid point is real and positive; at the first
    point the largest amplitude is made real and positive.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if s_grid.ndim != 1 or s_grid.size < 1 or np.any(np.diff(s_grid) <= 0):
        raise ValueError("scan grid must be strictly ascending")
    if n_levels < 2:
        raise ValueError("n_levels must be at least 2")
    compiled = V.compiled
    energies = np.zeros((s_grid.size, n_levels))
    elements = np.zeros((s_grid.size, n_levels), dtype=np.complex128)
    overlaps = np.ones((s_grid.size, n_levels))
    prev = None
    for i, s in enumerate(s_grid):
        E, vecs = lowest_states(model, s, V, n_levels, rabi, tol)
        fixed = []
        for k, v in enumerate(vecs):
            if prev is None:
                fixed.append(_fix_first_gauge(v))
                continue
            ov = np.vdot(prev[k], v)
            if abs(ov) < min_overlap:
                raise GaugeTrackingError(
                    f"level {k} lost between s={s_grid[i - 1]:.6g} and s={s:.6g} (grid point {i}): overlap {abs(ov):.3f}"
                )
            overlaps[i, k] = abs(ov)
            fixed.append(v * (np.conj(ov) / abs(ov)))
        Vg = compiled.matvec(fixed[0])
        energies[i] = E
        elements[i] = [np.vdot(f, Vg) for f in fixed]
        prev = fixed
    return SpectralScan(s_grid, energies, elements, overlaps)


def _phase_to_end(gaps: np.ndarray, dt: float) -> np.ndarray:
    """∫_{t_j}^T δE dτ on a midpoint grid (trapezoid plus a half-step tail)."""
    seg = 0.5 * (gaps[:-1] + gaps[1:]) * dt
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return tail + gaps[-1] * dt / 2


def leakage_amplitudes(protocol: ControlProtocol, scan: SpectralScan, mask=None, clip: bool = False):
    """Per-step contributions ``V_k0(s_j) exp(-iΦ_k(t_j)) dt`` for k ≥ 1.

    Returns an array of shape (N, n_levels − 1).  ``mask`` zeroes steps
    excluded from the integral (e.g. the disordered phase).
    """
    gaps, v = scan.interpolate(protocol.values, clip=clip)
    dt = protocol.dt
    out = np.empty((protocol.n_steps, scan.n_levels - 1), dtype=np.complex128)
    for k in range(1, scan.n_levels):
        phi = _phase_to_end(gaps[:, k], dt)
        out[:, k - 1] = v[:, k] * np.exp(-1j * phi) * dt
    if mask is not None:
        out *= np.asarray(mask, dtype=float)[:, None]
    return out


def firstorder_infidelity(protocol: ControlProtocol, scan: SpectralScan, eps: float,
                          n_sectors: int | None = None, s_c: float | None = None,
                          clip: bool = False) -> float:
    """ε² Σ_k |A_k|² from time-dependent perturbation theory.

    With ``s_c`` only steps with s_j > s_c (the ordered phase) contribute.
    ``n_sectors`` limits the sum to the first n_sectors − 1 excited sectors.
    """
    mask = None if s_c is None else protocol.values > s_c
    contrib = leakage_amplitudes(protocol, scan, mask, clip)
    if n_sectors is not None:
        contrib = contrib[:, : n_sectors - 1]
    amps = contrib.sum(axis=0)
    return float(eps ** 2 * np.sum(np.abs(amps) ** 2))


def piecewise_protocol(T: float, s_II: float, s_III: float, N: int) -> ControlProtocol:
    """Piecewise-linear control through (0,0), (T/3,s_II), (2T/3,s_III), (T,1)."""
    if N < 3:
        raise ValueError("need at least 3 steps")
    knots_t = np.array([0.0, T / 3, 2 * T / 3, T])
    knots_s = np.array([0.0, s_II, s_III, 1.0])
    return ControlProtocol.from_function(lambda t: np.interp(t, knots_t, knots_s), T, N)


def piecewise_value(t, T: float, s_II: float, s_III: float):
    return np.interp(t, [0.0, T / 3, 2 * T / 3, T], [0.0, s_II, s_III, 1.0])


@dataclass
class EchoReport:
    """Segmentation of a protocol around the critical point.

    ``segments`` lists ``(t_start, t_end, ordered)``.  ``amplitudes`` are
    the plain integrals ∫ V10 dt over each ordered segment, ``phases_raw``
    the dynamical phases ∫ δE dτ accumulated over each trivial segment that
    separates two ordered ones (``phases`` holds them mod 2π).
    ``dressed_amplitudes`` include the phase factors of the full estimate,
    and ``predicted_infidelity`` = ε²|Σ dressed|².
    """

    s_c: float
    crossing_times: list
    segments: list
    amplitudes: list
    phases_raw: list
    phases: list
    dressed_amplitudes: list
    predicted_infidelity: float
    eps: float

    @property
    def n_crossings(self) -> int:
        return len(self.crossing_times)

    def to_dict(self) -> dict:
        c = lambda z: [float(np.real(z)), float(np.imag(z))]  # noqa: E731
        return {
            "s_c": self.s_c,
            "eps": self.eps,
            "crossing_times": [float(t) for t in self.crossing_times],
            "segments": [{"t_start": float(a), "t_end": float(b), "ordered": bool(o)} for a, b, o in self.segments],
            "amplitudes": [c(a) for a in self.amplitudes],
            "phases": [float(p) for p in self.phases],
            "phases_raw": [float(p) for p in self.phases_raw],
            "dressed_amplitudes": [c(a) for a in self.dressed_amplitudes],
            "predicted_infidelity": self.predicted_infidelity,
        }


def crossing_times(protocol: ControlProtocol, s_c: float) -> list:
    """Times where s(t) − s_c changes sign between neighbouring midpoints."""
    s, t = protocol.values, protocol.times
    side = s > s_c
    out = []
    for j in np.flatnonzero(side[1:] != side[:-1]):
        frac = (s_c - s[j]) / (s[j + 1] - s[j])
        out.append(float(t[j] + frac * protocol.dt))
    return out


def echo_conditions(protocol: ControlProtocol, scan: SpectralScan, s_c: float,
                    eps: float = 1.0, clip: bool = False) -> EchoReport:
    """Amplitudes and interference phases of the ordered-phase segments."""
    s, dt = protocol.values, protocol.dt
    side = s > s_c
    times = crossing_times(protocol, s_c)
    bounds = [0.0] + times + [protocol.total_time]
    # step index ranges per segment; a step belongs to the segment of its midpoint
    change = list(np.flatnonzero(side[1:] != side[:-1]) + 1)
    starts = [0] + change
    stops = change + [protocol.n_steps]
    segments = [(bounds[i], bounds[i + 1], bool(side[a])) for i, a in enumerate(starts)]
    gaps, v = scan.interpolate(s, clip=clip)
    contrib = leakage_amplitudes(protocol, scan, side, clip)[:, 0]
    amplitudes, dressed, phases_raw = [], [], []
    seen_ordered = False
    pending = 0.0
    for (a, b), (_, _, ordered) in zip(zip(starts, stops), segments):
        if ordered:
            if seen_ordered:
                phases_raw.append(pending)
            amplitudes.append(complex(np.sum(v[a:b, 1]) * dt))
            dressed.append(complex(np.sum(contrib[a:b])))
            seen_ordered = True
            pending = 0.0
        else:
            pending += float(np.sum(gaps[a:b, 1]) * dt)
    predicted = float(eps ** 2 * abs(np.sum(dressed)) ** 2) if dressed else 0.0
    return EchoReport(
        s_c=s_c,
        crossing_times=times,
        segments=segments,
        amplitudes=amplitudes,
        phases_raw=phases_raw,
        phases=[float(np.mod(p, 2 * np.pi)) for p in phases_raw],
        dressed_amplitudes=dressed,
        predicted_infidelity=predicted,
        eps=eps,
    )


def piecewise_segments(T: float, s_II: float, s_III: float, s_c: float) -> list:
    """Exact ``(t_start, t_end, ordered)`` segments of the continuous piecewise family."""
    knots_t = np.array([0.0, T / 3, 2 * T / 3, T])
    knots_s = np.array([0.0, s_II, s_III, 1.0])
    side = knots_s > s_c
    cuts = [0.0]
    for i in range(3):
        if side[i] != side[i + 1]:
            frac = (s_c - knots_s[i]) / (knots_s[i + 1] - knots_s[i])
            cuts.append(float(knots_t[i] + frac * (knots_t[i + 1] - knots_t[i])))
    cuts.append(T)
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b > a:
            out.append((a, b, bool(piecewise_value(0.5 * (a + b), T, s_II, s_III) > s_c)))
    return out


def _segment_integral(values, a: float, b: float, T: float, n_nodes: int) -> np.ndarray:
    """Gauss-Legendre ∫_a^b f(t) dt, split at the knots where s(t) has kinks."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    edges = [a] + [k for k in (T / 3, 2 * T / 3) if a < k < b] + [b]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        total = total + 0.5 * (hi - lo) * (w @ values(t))
    return total


def echo_fields(T: float, s_II: float, s_III: float, scan: SpectralScan, s_c: float, n_nodes: int = 64):
    """(α − π wrapped to (−π, π], |A_first| − |A_last|) for a piecewise protocol.

    Segment boundaries are the exact crossing times of the continuous
    control, so both fields vary smoothly with (s_II, s_III).  Both are NaN
    unless the protocol has exactly two ordered segments.
    """
    segs = piecewise_segments(T, s_II, s_III, s_c)
    if sum(o for _, _, o in segs) != 2:
        return np.nan, np.nan

    def v10(t):
        return scan.interpolate(piecewise_value(t, T, s_II, s_III), clip=True)[1][:, 1]

    def gap(t):
        return scan.interpolate(piecewise_value(t, T, s_II, s_III), clip=True)[0][:, 1]

    first = next(i for i, seg in enumerate(segs) if seg[2])
    last = max(i for i, seg in enumerate(segs) if seg[2])
    amp = [_segment_integral(v10, segs[i][0], segs[i][1], T, n_nodes) for i in (first, last)]
    alpha = sum(_segment_integral(gap, segs[i][0], segs[i][1], T, n_nodes) for i in range(first + 1, last))
    return float(np.angle(np.exp(1j * (alpha - np.pi)))), float(abs(amp[0]) - abs(amp[1]))


def echo_intersection(T: float, scan: SpectralScan, s_c: float, grid_II, grid_III, n_nodes: int = 64):
    """Points where α = π and the two ordered amplitudes have equal modulus.

    Sign changes of both fields are located on the grid and refined with a
    2D root finder on the continuous piecewise family.
    """
    from scipy.optimize import root

    gII, gIII = np.asarray(grid_II), np.asarray(grid_III)
    f1 = np.full((gII.size, gIII.size), np.nan)
    f2 = np.full_like(f1, np.nan)
    for i, a in enumerate(gII):
        for j, b in enumerate(gIII):
            f1[i, j], f2[i, j] = echo_fields(T, a, b, scan, s_c, n_nodes)
    points = []
    for i in range(gII.size - 1):
        for j in range(gIII.size - 1):
            c1, c2 = f1[i:i + 2, j:j + 2], f2[i:i + 2, j:j + 2]
            if np.isnan(c1).any() or np.isnan(c2).any():
                continue
            if c1.min() > 0 or c1.max() < 0 or c2.min() > 0 or c2.max() < 0:
                continue
            if c1.max() - c1.min() > np.pi:  # the wrap of α − π, not a zero
                continue
            x0 = [(gII[i] + gII[i + 1]) / 2, (gIII[j] + gIII[j + 1]) / 2]
            sol = root(lambda x: echo_fields(T, x[0], x[1], scan, s_c, n_nodes), x0, method="hybr")
            if sol.success and np.all(np.isfinite(sol.x)):
                if not any(np.allclose(sol.x, p, atol=1e-6) for p in points):
                    points.append(sol.x)
    return f1, f2, [tuple(map(float, p)) for p in points]


@dataclass
class Landscape:
    s_II: np.ndarray
    s_III: np.ndarray
    cost: np.ndarray
    alpha_minus_pi: np.ndarray | None = None
    amplitude_difference: np.ndarray | None = None
    intersections: list = field(default_factory=list)

    def argmin(self):
        i, j = np.unravel_index(np.argmin(self.cost), self.cost.shape)
        return float(self.s_II[i]), float(self.s_III[j])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sII", "sIII", "cost"])
            for i, a in enumerate(self.s_II):
                for j, b in enumerate(self.s_III):
                    w.writerow([f"{a:.17g}", f"{b:.17g}", f"{self.cost[i, j]:.17g}"])


def _landscape_point(args):
    from .optimizer import cost

    model, T, a, b, ensemble, target, N = args
    try:
        return cost(model, piecewise_protocol(T, a, b, N), ensemble, target)
    except Exception as exc:  # re-raised with coordinates
        raise RuntimeError(f"landscape point (s_II={a}, s_III={b}) failed: {exc}") from exc


def landscape(model: ModelSpec, T: float, grid_II, grid_III, ensemble, target, N: int = 150,
              scan: SpectralScan | None = None, s_c: float | None = None, jobs: int = 1) -> Landscape:
    """Ensemble-averaged infidelity of the piecewise family on a grid.

    When a spectral scan is supplied the two interference-condition fields
    and their intersections are attached.
    """
    from .parallel import parallel_map

    gII, gIII = np.asarray(grid_II, dtype=float), np.asarray(grid_III, dtype=float)
    if gII.min() < 0 or gII.max() > 1 or gIII.min() < 0 or gIII.max() > 1:
        raise ValueError("landscape grid must lie in [0, 1]^2")
    tasks = [(model, T, a, b, ensemble, target, N) for a in gII for b in gIII]
    values = np.array(parallel_map(_landscape_point, tasks, jobs)).reshape(gII.size, gIII.size)
    out = Landscape(gII, gIII, values)
    if scan is not None:
        s_c = ISING_CRITICAL_POINT if s_c is None else s_c
        f1, f2, pts = echo_intersection(T, scan, s_c, gII, gIII)
        out.alpha_minus_pi, out.amplitude_difference, out.intersections = f1, f2, pts
    return out
