"""Gaussian colored noise on the symmetry-breaking field and its benchmark.

The field h(t) has a flat-topped spectrum S(f) = A / (1 + (τc f)^16)
normalized so that ∫ S df over all real f equals σ².
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import ModelSpec, sample_seed
from .parallel import parallel_map
from .propagator import ControlProtocol, ProtocolEvolution, resolve_sample

SPECTRAL_ORDER = 16
STATIC_QUADRATURE_NODES = 24


def psd_amplitude(sigma: float, tau_c: float) -> float:
    """A = σ² τc · 8 sin(π/16)/π, since ∫ dx / (1 + x^16) = (π/8) / sin(π/16)."""
    return sigma ** 2 * tau_c * 8 * np.sin(np.pi / SPECTRAL_ORDER) / np.pi


@dataclass(frozen=True)
class NoiseModel:
    """Stationary noise with correlation time ``tau_c`` and RMS ``sigma``.

    ``delta_f`` defaults to 1/(10 max(T, τc)) for a run of duration T and
    ``f_max`` to 4/τc (where S has fallen by ~2e-10).
    """

    tau_c: float
    sigma: float
    delta_f: float | None = None
    f_max: float | None = None
    master_seed: int = 0

    def __post_init__(self):
        if not self.tau_c > 0:
            raise ValueError("tau_c must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.delta_f is not None and not self.delta_f > 0:
            raise ValueError("delta_f must be positive")
        if self.f_max is not None and self.f_max * self.tau_c < 2.5:
            raise ValueError("f_max must be at least 2.5/tau_c to keep S(f_max)/S(0) below 1e-6")

    @property
    def amplitude(self) -> float:
        return psd_amplitude(self.sigma, self.tau_c)

    def resolution(self, duration: float) -> float:
        if self.delta_f is not None:
            return self.delta_f
        return 1.0 / (10.0 * max(duration, self.tau_c))

    def cutoff(self) -> float:
        return 4.0 / self.tau_c if self.f_max is None else self.f_max

    def frequencies(self, duration: float) -> np.ndarray:
        df = self.resolution(duration)
        K = int(np.ceil(self.cutoff() / df))
        return np.arange(K + 1) * df

    def discrete_variance(self, duration: float) -> float:
        """Σ_{k=-K..K} S(f_k) Δf, the variance carried by the synthesized series."""
        f = self.frequencies(duration)
        S = psd(f, self)
        return float((S[0] + 2 * np.sum(S[1:])) * self.resolution(duration))

    def describe(self, duration: float) -> dict:
        return {"tau_c": self.tau_c, "sigma": self.sigma, "delta_f": self.resolution(duration),
                "f_max": self.cutoff(), "n_frequencies": int(self.frequencies(duration).size),
                "master_seed": self.master_seed}


def psd(f, model: NoiseModel):
    f = np.asarray(f, dtype=float)
    return model.amplitude / (1.0 + (model.tau_c * f) ** SPECTRAL_ORDER)


def synthesize(model: NoiseModel, duration: float, sample_times, seed) -> np.ndarray:
    """One realization of h(t) at ``sample_times``.

    h(t) = √(2S(0)Δf) cos φ0 + Σ_{k≥1} √(4S(f_k)Δf) cos(2π f_k t + φ_k)
    with independent uniform phases, so that Var h = Σ_{k=-K..K} S(f_k)Δf.
    ``seed`` is anything accepted by ``numpy.random.default_rng``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    t = np.asarray(sample_times, dtype=float)
    if model.sigma == 0:
        return np.zeros_like(t)
    f = model.frequencies(duration)
    df = model.resolution(duration)
    S = psd(f, model)
    amps = np.sqrt(4 * S * df)
    amps[0] = np.sqrt(2 * S[0] * df)
    phases = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, f.size)
    return np.cos(2 * np.pi * np.outer(t, f) + phases) @ amps


def realization(model: NoiseModel, duration: float, sample_times, index: int) -> np.ndarray:
    return synthesize(model, duration, sample_times, sample_seed(model.master_seed, index))


def _noisy_infidelity(args):
    model, protocol, field, target, perturbation = args
    try:
        masks, term = resolve_sample(model, field, perturbation)
        psi = ProtocolEvolution(model, protocol, term, masks).forward(model.initial_state().amplitudes)
        return 1.0 - abs(np.vdot(target, psi)) ** 2
    except Exception:
        return np.nan


def static_average(model: ModelSpec, protocol: ControlProtocol, sigma: float, target,
                   perturbation=None, n_nodes: int = STATIC_QUADRATURE_NODES) -> float:
    """⟨I(ε)⟩ over a frozen gaussian field ε ~ N(0, σ²) by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    tgt = getattr(target, "amplitudes", target)
    vals = []
    for xi in x:
        eps = np.sqrt(2) * sigma * xi
        masks, term = resolve_sample(model, float(eps), perturbation)
        psi = ProtocolEvolution(model, protocol, term, masks).forward(model.initial_state().amplitudes)
        vals.append(1.0 - abs(np.vdot(tgt, psi)) ** 2)
    return float(np.dot(w, vals) / np.sqrt(np.pi))


@dataclass
class BenchmarkRow:
    tau_c: float
    protocol_id: str
    mean_infidelity: float
    stderr: float
    n_ok: int
    n_failed: int
    static_reference: float


def noise_benchmark(model: ModelSpec, protocols: dict, tau_c_values, n_realizations: int, sigma: float,
                    target, master_seed: int = 0, perturbation=None, delta_f: float | None = None,
                    f_max: float | None = None, jobs: int = 1) -> list:
    """Mean infidelity under time-dependent noise, per (τc, protocol).

    Realization ``i`` uses the same seed for every protocol and τc, so
    protocol comparisons share their noise draws.  Failed propagations are
    skipped and counted.
    """
    tgt = getattr(target, "amplitudes", target)
    rows = []
    statics = {pid: static_average(model, p, sigma, tgt, perturbation) for pid, p in protocols.items()}
    for tau_c in tau_c_values:
        for pid, protocol in protocols.items():
            nm = NoiseModel(tau_c, sigma, delta_f, f_max, master_seed)
            tasks = [
                (model, protocol, realization(nm, protocol.total_time, protocol.times, i), tgt, perturbation)
                for i in range(n_realizations)
            ]
            vals = np.array(parallel_map(_noisy_infidelity, tasks, jobs))
            ok = vals[np.isfinite(vals)]
            n_ok = ok.size
            mean = float(np.sum(ok) / n_ok) if n_ok else float("nan")
            err = float(np.std(ok, ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan")
            rows.append(BenchmarkRow(float(tau_c), pid, mean, err, n_ok, vals.size - n_ok, statics[pid]))
    return rows


def write_benchmark_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_c", "protocol_id", "mean_infidelity", "stderr", "n_ok"])
        for r in rows:
            w.writerow([f"{r.tau_c:.17g}", r.protocol_id, f"{r.mean_infidelity:.17g}", f"{r.stderr:.17g}", r.n_ok])
