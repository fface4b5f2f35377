"""Ground-state optimization by stochastic reconfiguration.

Each step solves (g + eps I) dalpha = -tau f with the log-derivative
covariance g applied matrix-free by conjugate gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import ModelSpec, local_energy_batch
from .linalg import conjugate_gradient, diagonal_shift
from .rbm import RbmParameters, log_derivatives_batch
from .sampler import (RbmAmplitude, SampleBatch, SamplerPlan, exact_distribution, sample)

log = logging.getLogger(__name__)

MIN_SAMPLES = 100


class OptimizationError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SrSettings:
    learning_rate: float = 0.01
    diag_shift_initial: float = 100.0
    diag_shift_decay: float = 0.9
    diag_shift_floor: float = 1e-4
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 1000
    max_steps: int = 1000
    convergence_window: int = 50
    energy_tolerance: float = 1e-5

    def __post_init__(self):
        for name in ("learning_rate", "diag_shift_initial", "diag_shift_decay",
                     "diag_shift_floor", "cg_tolerance", "energy_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.diag_shift_floor > self.diag_shift_initial:
            raise ValueError("diag_shift_floor must not exceed diag_shift_initial")
        if self.cg_max_iterations < 1 or self.max_steps < 1 or self.convergence_window < 2:
            raise ValueError("iteration counts must be positive (window >= 2)")

    def shift(self, step: int) -> float:
        return diagonal_shift(step, self.diag_shift_initial, self.diag_shift_decay,
                              self.diag_shift_floor)


@dataclass
class VmcSamples:
    """Per-sample log-derivatives and local energies with their weights."""

    weights: np.ndarray
    O: np.ndarray
    e_loc: np.ndarray
    exact: bool = False

    def __len__(self):
        return self.weights.size

    @property
    def energy(self) -> complex:
        return complex(self.weights @ self.e_loc)

    @property
    def energy_variance(self) -> float:
        return float(self.weights @ np.abs(self.e_loc - self.energy) ** 2)

    @property
    def centered(self) -> np.ndarray:
        return self.O - self.weights @ self.O


def measure(model: ModelSpec, params: RbmParameters, batch: SampleBatch,
            exact: bool = False) -> VmcSamples:
    provider = RbmAmplitude(params)
    e_loc = local_energy_batch(model, provider.log_amplitude, batch.configs, batch.log_amp)
    return VmcSamples(batch.weights, log_derivatives_batch(params, batch.configs), e_loc, exact)


def draw(model: ModelSpec, params: RbmParameters, plan: SamplerPlan | None,
         basis_configs=None) -> VmcSamples:
    """Monte Carlo samples when ``plan`` is given, otherwise exact enumeration."""
    provider = RbmAmplitude(params)
    if plan is None:
        return measure(model, params, exact_distribution(basis_configs, provider), exact=True)
    return measure(model, params, sample(plan, provider, model.length))


def estimate_forces(samples: VmcSamples) -> np.ndarray:
    """f_k = <O_k^* E_loc> - <O_k^*><E_loc>."""
    if not samples.exact and len(samples) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    w = samples.weights
    de = samples.e_loc - w @ samples.e_loc
    return (w * de) @ samples.centered.conj()


def metric_matvec(samples: VmcSamples, v, shift: float = 0.0, centered=None) -> np.ndarray:
    """(g + shift I) v with g the weighted covariance of O, never formed explicitly."""
    Oc = samples.centered if centered is None else centered
    v = np.asarray(v, dtype=np.complex128)
    return (samples.weights * (Oc @ v)) @ Oc.conj() + shift * v


def metric_scale(samples: VmcSamples, centered=None) -> float:
    """Mean diagonal of g; the diagonal shift is expressed in these units."""
    Oc = samples.centered if centered is None else centered
    scale = float(samples.weights @ (np.abs(Oc) ** 2).mean(axis=1))
    return scale if scale > 0 else 1.0


def natural_gradient_update(matvec, gradient, rate: float, shift: float,
                            settings: SrSettings):
    """Solve (g + shift) d = -rate * gradient; retry once with 10x the shift."""
    rhs = -rate * np.asarray(gradient)
    for attempt, eps in enumerate((shift, 10.0 * shift)):
        res = conjugate_gradient(lambda v: matvec(v, eps), rhs, settings.cg_tolerance,
                                 settings.cg_max_iterations)
        if res.converged:
            return res.x, eps, res
        log.warning("CG did not converge (residual %.3g, shift %.3g)", res.residual, eps)
    raise OptimizationError(
        f"CG failed twice: residual {res.residual:.3g} after {res.iterations} iterations")


def sr_step(params: RbmParameters, settings: SrSettings, samples: VmcSamples,
            step: int = 0) -> RbmParameters:
    return _sr_update(params, settings, samples, step)[0]


def _sr_update(params, settings, samples, step):
    Oc = samples.centered
    scale = metric_scale(samples, Oc)
    f = estimate_forces(samples)
    delta, eps, cg = natural_gradient_update(
        lambda v, s: metric_matvec(samples, v, s, Oc), f, settings.learning_rate,
        settings.shift(step) * scale, settings)
    new = params.shifted(delta)
    if not new.is_finite():
        raise OptimizationError("parameter update produced non-finite values")
    return new, {"shift": eps, "cg_iterations": cg.iterations, "force_norm": float(np.linalg.norm(f))}


@dataclass
class GroundStateResult:
    params: RbmParameters
    e0_estimate: complex
    e0_error: float
    energy_trace: list = field(default_factory=list)
    converged: bool = False
    steps: int = 0


def _window_stats(trace, window, n_samples):
    recent = trace[-window:]
    means = np.array([t["energy"] for t in recent])
    variances = np.array([t["variance"] for t in recent])
    e0 = complex(means.mean())
    err = float(np.sqrt(variances.sum() / max(n_samples, 1)) / len(recent))
    return e0, err


def optimize_ground_state(model: ModelSpec, init: RbmParameters, settings: SrSettings,
                          plan: SamplerPlan | None, basis_configs=None,
                          callback=None) -> GroundStateResult:
    """Iterate sample -> forces -> SR step until the windowed energy settles.

    ``plan=None`` selects exact enumeration over ``basis_configs``.
    Convergence compares the two halves of the last ``convergence_window``
    steps.
    """
    if plan is None and basis_configs is None:
        raise ValueError("exact mode needs the sector basis")
    params = init
    trace: list[dict] = []
    window = settings.convergence_window
    n_samples = 0 if plan is None else plan.n_samples
    converged = False
    e_init = None
    for step in range(settings.max_steps):
        samples = draw(model, params, None if plan is None else plan.with_seed(step),
                       basis_configs)
        energy = samples.energy
        entry = {"step": step, "energy": energy.real, "energy_imag": energy.imag,
                 "variance": samples.energy_variance}
        if e_init is None:
            e_init = energy.real
        if energy.real > e_init + 10.0 * max(abs(e_init), 1.0) or not np.isfinite(energy):
            raise OptimizationError(f"energy diverged at step {step}: {energy.real:.6g}", trace)
        trace.append(entry)
        if len(trace) >= window:
            half = window // 2
            recent = [t["energy"] for t in trace[-window:]]
            if abs(np.mean(recent[:half]) - np.mean(recent[half:])) < settings.energy_tolerance:
                converged = True
                break
        params, info = _sr_update(params, settings, samples, step)
        entry.update(info)
        if callback is not None:
            callback(step, entry)
    e0, err = _window_stats(trace, window, n_samples)
    imag = float(np.mean([t["energy_imag"] for t in trace[-window:]]))
    return GroundStateResult(params, complex(e0.real, imag), err, trace, converged, len(trace))
