import numpy as np
import pytest

from rbmspectra.ed import SectorBasis, build_hamiltonian, exact_ground_state
from rbmspectra.groundstate import (OptimizationError, SrSettings, VmcSamples, draw,
                                    estimate_forces, metric_matvec, natural_gradient_update,
                                    optimize_ground_state, sr_step)
from rbmspectra.hamiltonian import ModelSpec
from rbmspectra.rbm import flat_index, init_random, log_derivatives_batch, log_psi_batch
from rbmspectra.sampler import SamplerPlan


def dense_energy(model, params, basis, H):
    psi = np.exp(log_psi_batch(params, basis.configs))
    return (np.vdot(psi, H @ psi) / np.vdot(psi, psi)).real


def wirtinger_fd(f, params, k, h=1e-6):
    """d f / d alpha_k^* = (df/dx + i df/dy) / 2 for real f."""
    e = np.zeros(params.n_params, dtype=complex)
    e[k] = h
    dx = (f(params.shifted(e)) - f(params.shifted(-e))) / (2 * h)
    dy = (f(params.shifted(1j * e)) - f(params.shifted(-1j * e))) / (2 * h)
    return 0.5 * (dx + 1j * dy)


@pytest.mark.parametrize("L,j2", [(4, 0.0), (6, 0.2)])
def test_forces_match_finite_differences(L, j2):
    model = ModelSpec(L, 1.0, j2)
    basis = SectorBasis.build(L, 0.0)
    H = build_hamiltonian(model, basis=basis).matrix
    params = init_random(L, 2, 0.3, seed=L)
    forces = estimate_forces(draw(model, params, None, basis.configs))
    N, M = L, 2
    for k in (flat_index(N, M, "a", 1), flat_index(N, M, "b", 0), flat_index(N, M, "W", 2, 1)):
        fd = wirtinger_fd(lambda p: dense_energy(model, p, basis, H), params, k)
        assert forces[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_metric_matvec_equals_dense_covariance():
    model = ModelSpec(4)
    basis = SectorBasis.build(4, 0.0)
    params = init_random(4, 3, 0.3, seed=0)
    samples = draw(model, params, None, basis.configs)
    psi = np.exp(log_psi_batch(params, basis.configs))
    D = log_derivatives_batch(params, basis.configs) * psi[:, None]
    n = np.vdot(psi, psi).real
    g = D.conj().T @ D / n - np.outer(D.conj().T @ psi, psi.conj() @ D) / n ** 2
    v = np.random.default_rng(0).standard_normal(params.n_params) + 0j
    assert np.allclose(metric_matvec(samples, v, 0.5), g @ v + 0.5 * v, atol=1e-12)
    assert np.allclose(g, g.conj().T)
    assert np.linalg.eigvalsh(g).min() > -1e-12


def test_refuses_too_few_samples():
    samples = VmcSamples(np.full(10, 0.1), np.zeros((10, 3)), np.zeros(10))
    with pytest.raises(ValueError, match="100"):
        estimate_forces(samples)


def test_settings_validation():
    with pytest.raises(ValueError):
        SrSettings(learning_rate=0)
    with pytest.raises(ValueError):
        SrSettings(diag_shift_initial=1e-5, diag_shift_floor=1e-4)
    assert SrSettings().shift(0) == 100


def test_cg_failure_retries_then_aborts():
    calls = []

    def matvec(v, shift):
        calls.append(shift)
        return -v  # not positive definite: CG cannot converge
    with pytest.raises(OptimizationError, match="twice"):
        natural_gradient_update(matvec, np.ones(3), 0.1, 1.0, SrSettings(cg_max_iterations=5))
    assert 1.0 in calls and 10.0 in calls


def test_exact_mode_six_sites():
    model = ModelSpec(6)
    basis = SectorBasis.build(6, 0.0)
    settings = SrSettings(learning_rate=0.05, max_steps=1500, energy_tolerance=1e-8)
    res = optimize_ground_state(model, init_random(6, 12, 0.01, seed=1), settings, None,
                                basis.configs)
    exact = exact_ground_state(model).energy
    assert abs(res.e0_estimate.real - exact) / abs(exact) < 1e-3
    assert res.converged
    energies = [t["energy"] for t in res.energy_trace]
    assert energies[-1] < energies[0]


def test_restart_at_fixed_point_stops_within_window(ground4, chain4, basis4):
    settings = SrSettings(learning_rate=0.05, max_steps=500, energy_tolerance=1e-7)
    res = optimize_ground_state(chain4, ground4.params, settings, None, basis4.configs)
    assert res.converged and res.steps == settings.convergence_window


def test_monte_carlo_step_lowers_energy():
    model = ModelSpec(6)
    params = init_random(6, 12, 0.01, seed=2)
    plan = SamplerPlan(8, 100, 6, 50, seed=1)
    settings = SrSettings(learning_rate=0.05, diag_shift_initial=1.0)
    samples = draw(model, params, plan, None)
    # the near-uniform start sits close to the ferromagnetic eigenstate, so progress starts slowly
    for step in range(60):
        params = sr_step(params, settings, draw(model, params, plan.with_seed(step)), step)
    later = draw(model, params, plan.with_seed(999))
    assert later.energy.real < samples.energy.real - 0.5


def test_divergence_is_reported(monkeypatch):
    import rbmspectra.groundstate as gs
    model = ModelSpec(4)
    basis = SectorBasis.build(4, 0.0)
    real_draw = gs.draw
    calls = []

    def exploding(*args, **kwargs):
        samples = real_draw(*args, **kwargs)
        calls.append(1)
        if len(calls) > 3:
            samples.e_loc = samples.e_loc + 1e3
        return samples
    monkeypatch.setattr(gs, "draw", exploding)
    with pytest.raises(OptimizationError, match="diverged") as info:
        optimize_ground_state(model, init_random(4, 8, 0.1, seed=0), SrSettings(), None,
                              basis.configs)
    assert len(info.value.trace) == 3
