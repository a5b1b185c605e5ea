import numpy as np
import pytest

from echoprep import diagnostics
from echoprep.diagnostics import (
    CriticalWindow,
    WindowError,
    critical_control,
    critical_window,
    excitation_derivative,
    excitation_operator,
    fidelity_susceptibility,
    ground_state,
    scaling_fit,
    window_from_scans,
    write_diagnostics_csv,
)
from echoprep.hilbert import expectation
from echoprep.models import ModelSpec


def test_excitation_operators():
    ising = ModelSpec.ising(4)
    op = excitation_operator(ising)
    assert expectation(op, ising.initial_state()) == pytest.approx(0.0, abs=1e-14)
    ryd = ModelSpec.rydberg("ladder", 2)
    assert expectation(excitation_operator(ryd), np.eye(16)[15]) == 4


def test_deep_negative_detuning_is_empty():
    model = ModelSpec.rydberg("ladder", 2)
    lam = np.array([-60.0, -59.0])
    assert expectation(excitation_operator(model), ground_state(model, lam[0])) < 1e-3
    assert np.all(np.abs(excitation_derivative(model, lam)) < 1e-3)


def test_static_hamiltonian_gives_flat_diagnostics(monkeypatch):
    model = ModelSpec.ising(4)
    fixed = model.hamiltonian.operator(0.3)
    monkeypatch.setattr(diagnostics, "hamiltonian_at", lambda m, lam: fixed)
    lam = np.linspace(0.1, 0.9, 5)
    assert np.allclose(excitation_derivative(model, lam), 0, atol=1e-6)
    assert np.allclose(fidelity_susceptibility(model, lam), 0, atol=1e-3)


def test_susceptibility_is_non_negative():
    chi = fidelity_susceptibility(ModelSpec.ising(6), np.linspace(0.05, 0.95, 10))
    assert np.all(chi >= 0)


def test_ising_window_brackets_the_transition():
    model = ModelSpec.ising(10)
    lam = np.round(np.arange(0.40, 0.601, 0.01), 10)
    window, dN, chi = critical_window(model, lam)
    assert abs(window.lam_lo - 0.5) <= 0.05 and abs(window.lam_hi - 0.5) <= 0.05
    assert critical_control(model, window) == window.center


def test_ladder_window_is_a_single_interior_interval():
    model = ModelSpec.rydberg("ladder", 4)
    lam = np.round(np.arange(0.0, 2.01, 0.05), 10)
    window, dN, chi = critical_window(model, lam)
    assert lam[0] < window.lam_lo <= window.lam_hi < lam[-1]
    s_c = critical_control(model, window)
    assert model.detuning(s_c) == pytest.approx(window.center, abs=1e-12)


def test_window_from_identical_scans_has_zero_width():
    lam = np.linspace(0, 1, 5)
    bump = np.array([0, 1, 3, 1, 0.0])
    w = window_from_scans(lam, bump, bump)
    assert w.lam_lo == w.lam_hi == 0.5
    assert isinstance(w, CriticalWindow) and w.to_dict()["lambda_lo"] == 0.5


def test_edge_peak_is_rejected():
    lam = np.linspace(0, 1, 5)
    with pytest.raises(WindowError, match="edge"):
        window_from_scans(lam, np.arange(5.0), np.array([0, 1, 3, 1, 0.0]))


def test_grid_validation():
    with pytest.raises(ValueError, match="ascending"):
        excitation_derivative(ModelSpec.ising(3), [0.5, 0.4])
    with pytest.raises(ValueError, match="positive"):
        fidelity_susceptibility(ModelSpec.ising(3), [0.5], dlam=0.0)


def test_diagnostics_csv(tmp_path):
    write_diagnostics_csv(tmp_path / "d.csv", [0.1, 0.2], [1.0, 2.0], [3.0, 4.0])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "lambda,dN_dlambda,chi" and len(lines) == 3


def test_scaling_fit_recovers_quadratic_collapse():
    h = np.tile([1e-4, 3e-4, 1e-3, 3e-3], 3)
    L = np.repeat([8, 10, 12], 4)
    fit = scaling_fit(h, L, (h * L ** 2) ** 2)
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.residual < 1e-12 and not fit.poor_collapse


def test_scaling_fit_flags_wrong_size_dependence():
    h = np.tile([1e-4, 3e-4, 1e-3], 3)
    L = np.repeat([4, 8, 16], 3)
    fit = scaling_fit(h, L, 0.5 * h * L ** 3)
    assert fit.poor_collapse


def test_scaling_fit_input_checks():
    with pytest.raises(ValueError, match="two system sizes"):
        scaling_fit([1, 2, 3], [8, 8, 8], [1, 2, 3])
    with pytest.raises(ValueError, match="three fields"):
        scaling_fit([1, 2, 1, 2], [8, 8, 10, 10], [1, 2, 3, 4])
    with pytest.warns(UserWarning, match="excluding 1"):
        scaling_fit([1, 2, 3, 1, 2, 3, 4], [8, 8, 8, 10, 10, 10, 10], [1, 4, 9, 1, 4, 9, 0])
