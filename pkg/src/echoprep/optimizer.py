"""Disorder-averaged infidelity, its GRAPE gradient and the optimization drivers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .hilbert import StateVector
from .models import DisorderEnsemble, ModelSpec, sample_terms
from .parallel import parallel_map
from .propagator import FRECHET_MODES, ControlProtocol, ProtocolEvolution, step_with_derivative

DEFAULT_ETA = 1e-3
DEFAULT_MU = 1.0


class SampleFailure(RuntimeError):
    def __init__(self, index: int, exc: Exception):
        super().__init__(f"disorder sample {index} failed: {exc}")
        self.index = index


def _target_array(target) -> np.ndarray:
    return target.amplitudes if isinstance(target, StateVector) else np.asarray(target, dtype=np.complex128)


def _prepare(model: ModelSpec, ensemble: DisorderEnsemble | None, perturbation=None):
    if ensemble is not None:
        if ensemble.kind == "displacement" and model.kind != "rydberg":
            raise ValueError("displacement ensembles need a Rydberg model")
        if ensemble.kind == "scalar_field" and model.kind != "ising" and perturbation is None:
            raise ValueError("scalar-field ensembles on Rydberg models need an explicit perturbation")
    return sample_terms(model, ensemble, perturbation)


def _sample_overlap(args):
    idx, model, protocol, term, masks, target = args
    try:
        evo = ProtocolEvolution(model, protocol, term, masks)
        return np.vdot(target, evo.forward(model.initial_state().amplitudes))
    except Exception as exc:
        raise SampleFailure(idx, exc) from exc


def _sample_gradient(args):
    """Overlap a = ⟨target|ψ(T)⟩ and da/ds_j for one sample."""
    idx, model, protocol, term, masks, target, mode = args
    try:
        evo = ProtocolEvolution(model, protocol, term, masks)
        N, dt = protocol.n_steps, protocol.dt
        psi0 = model.initial_state().amplitudes
        da = np.zeros(N, dtype=np.complex128)
        if mode == "first_order":
            states = evo.forward(psi0, store=True)
            chi = target.copy()
            a = np.vdot(chi, states[-1])
            for j in range(N - 1, -1, -1):
                dH = evo.derivative_operator(j)
                da[j] = -1j * dt * np.vdot(chi, dH.matvec(states[j + 1]))
                if j:
                    chi = evo.step(j, chi, sign=-1.0)
            return a, da
        if mode != "exact_frechet":
            raise ValueError(f"unknown gradient mode {mode!r}; expected one of {FRECHET_MODES}")
        psi = np.ascontiguousarray(psi0, dtype=np.complex128)
        derivs = np.empty((N, psi.size), dtype=np.complex128)
        for j in range(N):
            psi, derivs[j] = step_with_derivative(evo.operator(j), evo.derivative_operator(j), dt, psi, "exact_frechet")
        chi = target.copy()
        a = np.vdot(chi, psi)
        for j in range(N - 1, -1, -1):
            da[j] = np.vdot(chi, derivs[j])
            if j:
                chi = evo.step(j, chi, sign=-1.0)
        return a, da
    except SampleFailure:
        raise
    except Exception as exc:
        raise SampleFailure(idx, exc) from exc


def sample_overlaps(model, protocol, ensemble, target, perturbation=None, jobs: int | None = 1) -> np.ndarray:
    masks, terms = _prepare(model, ensemble, perturbation)
    tgt = _target_array(target)
    tasks = [(i, model, protocol, t, masks, tgt) for i, t in enumerate(terms)]
    return np.array(parallel_map(_sample_overlap, tasks, jobs))


def sample_infidelities(model, protocol, ensemble, target, perturbation=None, jobs: int | None = 1) -> np.ndarray:
    return 1.0 - np.abs(sample_overlaps(model, protocol, ensemble, target, perturbation, jobs)) ** 2


def cost(model: ModelSpec, protocol: ControlProtocol, ensemble: DisorderEnsemble | None, target,
         perturbation=None, jobs: int | None = 1) -> float:
    """C = 1 − (1/N_s) Σ_ℓ |⟨target|U_ℓ(T)|ψ0⟩|² (fixed-order mean)."""
    fid = np.abs(sample_overlaps(model, protocol, ensemble, target, perturbation, jobs)) ** 2
    return float(1.0 - np.sum(fid) / fid.size)


def cost_gradient(model: ModelSpec, protocol: ControlProtocol, ensemble: DisorderEnsemble | None, target,
                  mode: str = "first_order", perturbation=None, jobs: int | None = 1):
    """Return ``(C, dC/ds, per-sample fidelities)``.

    One forward sweep storing the intermediate states and one backward
    adjoint sweep per sample; dC/ds_j = −(2/N_s) Σ Re(a* da/ds_j).
    """
    if mode not in FRECHET_MODES:
        raise ValueError(f"unknown gradient mode {mode!r}; expected one of {FRECHET_MODES}")
    masks, terms = _prepare(model, ensemble, perturbation)
    tgt = _target_array(target)
    tasks = [(i, model, protocol, t, masks, tgt, mode) for i, t in enumerate(terms)]
    results = parallel_map(_sample_gradient, tasks, jobs)
    B = len(results)
    fids = np.array([abs(a) ** 2 for a, _ in results])
    grad = np.zeros(protocol.n_steps)
    for a, da in results:
        grad += np.real(np.conj(a) * da)
    return float(1.0 - np.sum(fids) / B), -2.0 * grad / B, fids


def penalized_cost(base_cost: float, base_grad: np.ndarray, protocol: ControlProtocol,
                   eta: float, mu: float, s0_target: float | None = None, sf_target: float | None = None):
    """Add ηN Σ(s_{j+1}−s_j)² and μ[(s_0−s0)² + (s_{N−1}−sf)²] with gradients."""
    if eta < 0 or mu < 0:
        raise ValueError("penalty weights must be non-negative")
    s = protocol.values
    N = s.size
    s0 = protocol.s0_target if s0_target is None else s0_target
    sf = protocol.sf_target if sf_target is None else sf_target
    diff = np.diff(s)
    value = base_cost + eta * N * np.sum(diff ** 2)
    grad = np.array(base_grad, dtype=float, copy=True)
    if N > 1:
        grad[:-1] -= 2 * eta * N * diff
        grad[1:] += 2 * eta * N * diff
    if mu:
        value += mu * ((s[0] - s0) ** 2 + (s[-1] - sf) ** 2)
        grad[0] += 2 * mu * (s[0] - s0)
        grad[-1] += 2 * mu * (s[-1] - sf)
    return float(value), grad


@dataclass
class OptConfig:
    """Settings for one GRAPE run.

    ``mu=None`` applies the boundary penalty (weight 1) for Ising models
    and none for Rydberg models; ``bounds=None`` leaves Ising controls free
    and confines Rydberg controls to [0, 1].
    """

    model: ModelSpec
    target: StateVector
    ensemble: DisorderEnsemble | None
    n_steps: int = 150
    total_time: float = 10.0
    eta: float = DEFAULT_ETA
    mu: float | None = None
    gradient_mode: str = "first_order"
    gtol: float = 1e-8
    ftol: float = 1e-12
    max_iter: int = 1000
    initial: ControlProtocol | None = None
    perturbation: object = None
    bounds: tuple | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.eta < 0 or (self.mu is not None and self.mu < 0):
            raise ValueError("penalty weights must be non-negative")
        if self.n_steps < 1 or not self.total_time > 0:
            raise ValueError("n_steps and total_time must be positive")
        if self.gradient_mode not in FRECHET_MODES:
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")

    @property
    def boundary_weight(self) -> float:
        if self.mu is not None:
            return self.mu
        return DEFAULT_MU if self.model.kind == "ising" else 0.0

    @property
    def control_bounds(self):
        if self.bounds is not None:
            return self.bounds
        return (0.0, 1.0) if self.model.kind == "rydberg" else None

    def initial_protocol(self) -> ControlProtocol:
        if self.initial is None:
            return ControlProtocol.linear(self.total_time, self.n_steps)
        p = self.initial
        if p.n_steps != self.n_steps or p.total_time != self.total_time:
            p = p.rescaled(self.total_time, self.n_steps)
        return p

    def summary(self) -> dict:
        ens = self.ensemble
        return {
            "model": self.model.to_dict(),
            "n_steps": self.n_steps,
            "total_time": self.total_time,
            "eta": self.eta,
            "mu": self.boundary_weight,
            "gradient_mode": self.gradient_mode,
            "gtol": self.gtol,
            "ftol": self.ftol,
            "max_iter": self.max_iter,
            "ensemble": None if ens is None else {
                "kind": ens.kind, "sigma": ens.sigma, "n_samples": len(ens), "master_seed": ens.master_seed},
        }


@dataclass
class OptimizationReport:
    protocol: ControlProtocol
    cost: float
    penalized_cost: float
    cost_trace: list
    penalized_trace: list
    grad_norm_trace: list
    sample_fidelities: np.ndarray
    wall_clock: float
    config: dict
    termination: str
    success: bool
    n_evaluations: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "penalized_cost": self.penalized_cost,
            "cost_trace": [float(c) for c in self.cost_trace],
            "penalized_trace": [float(c) for c in self.penalized_trace],
            "grad_norm_trace": [float(g) for g in self.grad_norm_trace],
            "sample_fidelities": [float(f) for f in self.sample_fidelities],
            "wall_clock": self.wall_clock,
            "termination": self.termination,
            "success": self.success,
            "n_evaluations": self.n_evaluations,
            "total_time": self.protocol.total_time,
            "n_steps": self.protocol.n_steps,
            "values": [float(v) for v in self.protocol.values],
            "config": self.config,
            **self.extra,
        }


def _minimize(fun_and_grad, x0, bounds, gtol, ftol, max_iter):
    """L-BFGS-B; returns the scipy result and the accepted iterates.

    ``fun_and_grad(x)`` returns ``(value, gradient, info)``.  Each trace
    entry is ``(x, value, gradient, info)``.
    """
    last = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in last:
            last.clear()
            last[key] = fun_and_grad(x.copy())
        return last[key]

    def wrapped(x):
        value, grad, _ = evaluate(x)
        return value, grad

    x0 = np.asarray(x0, dtype=float)
    trace = [(x0.copy(), *evaluate(x0))]

    def callback(xk):
        trace.append((xk.copy(), *evaluate(xk)))

    res = minimize(
        wrapped,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=None if bounds is None else [bounds] * len(x0),
        callback=callback,
        options={"maxcor": 10, "gtol": gtol, "ftol": ftol, "maxiter": max_iter, "maxls": 40},
    )
    if not np.array_equal(trace[-1][0], res.x):
        value, grad, info = evaluate(res.x)
        if value < trace[-1][1]:
            trace.append((res.x.copy(), value, grad, info))
    return res, trace


def _report(proto0, trace, res, start, config_summary, n_evals, extra=None) -> "OptimizationReport":
    best = min(range(len(trace)), key=lambda i: trace[i][1])
    x, pc, _, (c, fids) = trace[best]
    return OptimizationReport(
        protocol=proto0.with_values(x),
        cost=c,
        penalized_cost=pc,
        cost_trace=[t[3][0] for t in trace],
        penalized_trace=[t[1] for t in trace],
        grad_norm_trace=[float(np.linalg.norm(t[2])) for t in trace],
        sample_fidelities=fids,
        wall_clock=time.perf_counter() - start,
        config=config_summary,
        termination=str(res.message),
        success=bool(res.success),
        n_evaluations=n_evals,
        extra=extra or {},
    )


def grape(config: OptConfig) -> OptimizationReport:
    """Minimize the penalized ensemble cost over all N control values."""
    start = time.perf_counter()
    proto0 = config.initial_protocol()
    mu = config.boundary_weight
    n_evals = [0]

    def evaluate(x):
        n_evals[0] += 1
        p = proto0.with_values(x)
        c, g, fids = cost_gradient(config.model, p, config.ensemble, config.target, config.gradient_mode,
                                   config.perturbation, config.jobs)
        pc, pg = penalized_cost(c, g, p, config.eta, mu)
        return pc, pg, (c, fids)

    res, trace = _minimize(evaluate, proto0.values, config.control_bounds, config.gtol,
                           config.ftol, config.max_iter)
    return _report(proto0, trace, res, start, config.summary(), n_evals[0])


def continuation_T(config: OptConfig, T_values, direction: str = "forward",
                   initial: ControlProtocol | None = None) -> list:
    """Chained GRAPE runs over a grid of total times.

    Each leg starts from the previous optimum rescaled to the new duration
    (same values on the relative grid u = t/T).  ``reverse`` walks the grid
    from the largest T down.  A failing leg is recorded with its exception
    in place of the report, and the next leg restarts from the last
    successful optimum.
    """
    T_values = sorted(float(T) for T in T_values)
    if not T_values:
        raise ValueError("empty T grid")
    if direction == "reverse":
        T_values = T_values[::-1]
    elif direction != "forward":
        raise ValueError("direction must be 'forward' or 'reverse'")
    reports = []
    warm = initial if initial is not None else config.initial
    for T in T_values:
        leg = OptConfig(**{**config.__dict__, "total_time": T,
                           "initial": None if warm is None else warm.rescaled(T, config.n_steps)})
        try:
            rep = grape(leg)
        except Exception as exc:  # keep sweeping from the last good profile
            rep = None
            reports.append((T, exc))
            continue
        reports.append((T, rep))
        warm = rep.protocol
    return reports


def crossover_time(T_values, robust_costs, reference_costs, margin: float = 0.1):
    """Smallest T with robust cost below (1 − margin) × reference cost.

    Linear interpolation of log(robust / reference) between grid points
    locates the crossing.  Returns None when it never happens.
    """
    T = np.asarray(T_values, dtype=float)
    r = np.log(np.asarray(robust_costs, dtype=float) / np.asarray(reference_costs, dtype=float))
    level = np.log(1.0 - margin)
    below = r < level
    if not below.any():
        return None
    k = int(np.argmax(below))
    if k == 0:
        return float(T[0])
    f = (level - r[k - 1]) / (r[k] - r[k - 1])
    return float(T[k - 1] + f * (T[k] - T[k - 1]))


@dataclass
class GoatAnsatz:
    """s(t) = t/T + Σ_n c_n sin(2πn t/T)."""

    coefficients: np.ndarray
    total_time: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        if not np.all(np.isfinite(c)):
            raise ValueError("GOAT coefficients must be finite")
        self.coefficients = c

    @property
    def n_c(self) -> int:
        return self.coefficients.size

    def basis(self, t) -> np.ndarray:
        n = np.arange(1, self.n_c + 1)
        return np.sin(2 * np.pi * np.outer(np.asarray(t, dtype=float), n) / self.total_time)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return t / self.total_time + self.basis(np.atleast_1d(t)).reshape(t.shape + (self.n_c,)) @ self.coefficients

    def protocol(self, n_steps: int) -> ControlProtocol:
        t = (np.arange(n_steps) + 0.5) * self.total_time / n_steps
        return ControlProtocol(self.value(t), self.total_time)


def goat_eval_and_grad(ansatz: GoatAnsatz, model, ensemble, target, n_steps: int = 150,
                       mode: str = "first_order", perturbation=None, jobs: int = 1):
    """Cost and dC/dc_n = Σ_j sin(2πn t_j/T) dC/ds_j."""
    p = ansatz.protocol(n_steps)
    c, g, fids = cost_gradient(model, p, ensemble, target, mode, perturbation, jobs)
    return c, ansatz.basis(p.times).T @ g, fids


def goat_continuation(model, ensemble, target, T: float, n_c_max: int, c1_init: float = 0.0,
                      n_steps: int = 150, mode: str = "first_order", gtol: float = 1e-8,
                      ftol: float = 1e-12, max_iter: int = 500, jobs: int = 1) -> list:
    """Optimize GOAT coefficients for N_c = 1..n_c_max, appending a zero each time."""
    if n_c_max < 1:
        raise ValueError("n_c_max must be at least 1")
    coeffs = np.array([c1_init], dtype=float)
    reports = []
    summary = {"model": model.to_dict(), "total_time": T, "n_steps": n_steps, "gradient_mode": mode}
    for n_c in range(1, n_c_max + 1):
        start = time.perf_counter()
        n_evals = [0]

        def evaluate(c):
            n_evals[0] += 1
            value, grad, fids = goat_eval_and_grad(GoatAnsatz(c, T), model, ensemble, target, n_steps,
                                                   mode, jobs=jobs)
            return value, grad, (value, fids)

        try:
            res, trace = _minimize(evaluate, coeffs, None, gtol, ftol, max_iter)
        except Exception as exc:
            reports.append((n_c, exc))
            coeffs = np.append(coeffs, 0.0)
            continue
        best = min(range(len(trace)), key=lambda i: trace[i][1])
        coeffs = trace[best][0]
        rep = _report(GoatAnsatz(coeffs, T).protocol(n_steps), trace, res, start,
                      {**summary, "n_c": n_c}, n_evals[0], {"coefficients": [float(c) for c in coeffs]})
        rep.protocol = GoatAnsatz(coeffs, T).protocol(n_steps)
        reports.append((n_c, rep))
        coeffs = np.append(coeffs, 0.0)
    return reports
