"""Correction vectors (z - H)|chi> = S^z_j|psi> by natural gradient descent.

The objective is the squared Fubini-Study angle gamma^2 = arccos^2(sqrt(x))
between Q|chi> and |A>, so only the ray of chi is optimized; the complex
normalization beta is fitted afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .groundstate import OptimizationError, natural_gradient_update
from .hamiltonian import ModelSpec, SzSource, q_rows, row_ratios
from .linalg import diagonal_shift
from .rbm import RbmParameters, log_psi_batch, weighted_row_derivatives
from .sampler import (AmplitudeProvider, RbmAmplitude, SamplerPlan, exact_distribution,
                      sample)

log = logging.getLogger(__name__)

X_CONVERGED = 1.0 - 1e-12
X_ORTHOGONAL = 1e-12


class OrthogonalStartError(OptimizationError):
    pass


@dataclass(frozen=True)
class CorrectionVectorProblem:
    model: ModelSpec
    z: complex
    site: int
    psi: RbmParameters

    def __post_init__(self):
        if self.z.imag == 0:
            raise ValueError("the shift z needs a nonzero imaginary part")
        if not 0 <= self.site < self.model.length:
            raise IndexError(f"source site {self.site} out of range")

    @classmethod
    def at_frequency(cls, model, psi, e0: float, omega: float, eta: float, site: int = 0,
                     adjoint: bool = False) -> "CorrectionVectorProblem":
        """Q = z - H with z = E0 + omega + i eta, or its adjoint (z -> z*)."""
        if eta <= 0:
            raise ValueError("eta must be positive")
        z = complex(e0 + omega, -eta if adjoint else eta)
        return cls(model, z, site, psi)

    @property
    def source(self) -> SzSource:
        return SzSource(self.site)

    @property
    def eta(self) -> float:
        return abs(self.z.imag)

    def adjoint(self) -> "CorrectionVectorProblem":
        return CorrectionVectorProblem(self.model, self.z.conjugate(), self.site, self.psi)


@dataclass(frozen=True)
class CvSettings:
    learning_rate: float = 0.02
    diag_shift_initial: float = 100.0
    diag_shift_decay: float = 0.9
    diag_shift_floor: float = 1e-4
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 1000
    tolerance: float = 1e-4
    max_iterations: int = 500
    patience: int = 100

    def shift(self, step: int) -> float:
        return diagonal_shift(step, self.diag_shift_initial, self.diag_shift_decay,
                              self.diag_shift_floor)


class QAmplitude(AmplitudeProvider):
    """log <sigma|(z - H)|chi> for an RBM chi; used to sample P_1."""

    def __init__(self, model: ModelSpec, z: complex, chi: RbmParameters):
        self.model, self.z, self.chi = model, z, chi

    def log_amplitude(self, configs):
        configs = np.atleast_2d(configs)

        def f(c):
            return log_psi_batch(self.chi, c)
        log_chi = f(configs)
        neighbors, q = q_rows(self.model, self.z, configs)
        s = (q * row_ratios(f, neighbors, log_chi, q)).sum(axis=1)
        with np.errstate(divide="ignore"):
            return log_chi + np.log(s)


def q_action_terms(model: ModelSpec, z: complex, chi: RbmParameters, configs):
    """Per configuration: log chi, (Q chi)/chi and (Q d_k chi)/chi for every parameter k."""
    configs = np.atleast_2d(configs)

    def f(c):
        return log_psi_batch(chi, c)
    log_chi = f(configs)
    neighbors, q = q_rows(model, z, configs)
    coeffs = q * row_ratios(f, neighbors, log_chi, q)
    return log_chi, coeffs.sum(axis=1), weighted_row_derivatives(chi, neighbors, coeffs)


@dataclass
class OverlapSamples:
    """R and O-type quantities on P_0 (|A|^2) and P_1 (|Q chi|^2) samples.

    ``R0`` holds R = <s|Q|chi>/<s|A> on P_0 samples and ``OR0`` the products
    O_k R = <s|Q|d_k chi>/<s|A>, evaluated directly so configurations where
    Q chi vanishes need no special treatment. ``O1`` holds O_k on P_1.
    R values are stored scaled by exp(-log_offset).
    """

    w0: np.ndarray
    R0: np.ndarray
    OR0: np.ndarray
    w1: np.ndarray
    O1: np.ndarray
    log_offset: float = 0.0
    exact: bool = False

    @property
    def n_params(self) -> int:
        return self.O1.shape[1]


def _p0_terms(problem: CorrectionVectorProblem, chi: RbmParameters, configs, log_psi):
    log_chi, s, dq = q_action_terms(problem.model, problem.z, chi, configs)
    a = problem.source.values(configs)
    d = log_chi - log_psi
    offset = float(np.median(d.real))
    chi_over_a = np.exp(d - offset) / a
    return s * chi_over_a, dq * chi_over_a[:, None], offset


def _p1_terms(problem: CorrectionVectorProblem, chi: RbmParameters, configs):
    _, s, dq = q_action_terms(problem.model, problem.z, chi, configs)
    keep = s != 0
    return dq[keep] / s[keep, None], keep


def sample_ratios(problem: CorrectionVectorProblem, chi: RbmParameters,
                  plan: SamplerPlan | None, basis_configs=None) -> OverlapSamples:
    """Draw P_0 and P_1 samples (equal budgets) and evaluate R, O R and O.

    ``plan=None`` enumerates ``basis_configs`` with exact weights instead.
    """
    psi = RbmAmplitude(problem.psi)
    q_provider = QAmplitude(problem.model, problem.z, chi)
    if plan is None:
        if basis_configs is None:
            raise ValueError("exact mode needs the sector basis")
        # |A|^2 = |psi|^2 / 4 for S^z sources, so P_0 is the psi distribution
        b0 = exact_distribution(basis_configs, psi)
        b1 = exact_distribution(basis_configs, q_provider)
    else:
        b0 = sample(plan.with_seed(0), psi, problem.model.length)
        b1 = sample(plan.with_seed(1), q_provider, problem.model.length)
    R0, OR0, offset = _p0_terms(problem, chi, b0.configs, b0.log_amp)
    O1, keep = _p1_terms(problem, chi, b1.configs)
    w1 = b1.weights[keep]
    return OverlapSamples(b0.weights, R0, OR0, w1 / w1.sum(), O1, offset, plan is None)


def estimate_x(samples: OverlapSamples) -> float:
    """x = |<R>_0|^2 / <|R|^2>_0, clamped to [0, 1]."""
    mean = samples.w0 @ samples.R0
    denom = samples.w0 @ np.abs(samples.R0) ** 2
    if not denom > 0:
        raise ValueError("degenerate correction vector: <|R|^2> vanishes")
    return float(min(max(abs(mean) ** 2 / denom, 0.0), 1.0))


def estimate_gamma_gradient(samples: OverlapSamples, x: float) -> np.ndarray:
    """d gamma^2 / d alpha_k^* = gamma sqrt(x/(1-x)) [<O_k^*>_1 - <O_k^* R^*>_0 / <R^*>_0]."""
    if x >= X_CONVERGED:
        return np.zeros(samples.n_params, dtype=np.complex128)
    if x <= X_ORTHOGONAL:
        raise OrthogonalStartError("orthogonal start: Q|chi> has no overlap with |A>")
    gamma = np.arccos(np.sqrt(x))
    bracket = (samples.w1 @ samples.O1.conj()
               - (samples.w0 @ samples.OR0.conj()) / np.conj(samples.w0 @ samples.R0))
    return gamma * np.sqrt(x / (1.0 - x)) * bracket


def cv_metric_matvec(samples: OverlapSamples, v, shift: float = 0.0, centered=None):
    """(g + shift I) v, g the P_1 covariance of O."""
    Oc = _centered(samples) if centered is None else centered
    v = np.asarray(v, dtype=np.complex128)
    return (samples.w1 * (Oc @ v)) @ Oc.conj() + shift * v


def _centered(samples: OverlapSamples):
    return samples.O1 - samples.w1 @ samples.O1


def estimate_beta(samples: OverlapSamples) -> complex:
    """beta = <R>_0^* / <|R|^2>_0 so that beta * chi approximates Q^-1 A."""
    denom = samples.w0 @ np.abs(samples.R0) ** 2
    if not denom > 0:
        raise ValueError("degenerate correction vector: <|R|^2> vanishes")
    return complex(np.conj(samples.w0 @ samples.R0) / denom * np.exp(-samples.log_offset))


def ngd_step(chi: RbmParameters, settings: CvSettings, samples: OverlapSamples,
             step: int = 0, x: float | None = None) -> RbmParameters:
    return _ngd_update(chi, settings, samples, step, x)[0]


def _ngd_update(chi, settings, samples, step, x=None):
    x = estimate_x(samples) if x is None else x
    grad = estimate_gamma_gradient(samples, x)
    if settings.learning_rate == 0 or not np.any(grad):
        return chi, {"shift": 0.0, "cg_iterations": 0}
    Oc = _centered(samples)
    scale = float(samples.w1 @ (np.abs(Oc) ** 2).mean(axis=1)) or 1.0
    delta, eps, cg = natural_gradient_update(
        lambda v, s: cv_metric_matvec(samples, v, s, Oc), grad, settings.learning_rate,
        settings.shift(step) * scale, settings)
    new = chi.shifted(delta)
    if not new.is_finite():
        raise OptimizationError("correction-vector update produced non-finite values")
    return new, {"shift": eps, "cg_iterations": cg.iterations}


@dataclass
class CvSolution:
    chi_params: RbmParameters
    beta: complex
    gamma_sq_final: float
    x_final: float
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def source_ansatz(psi: RbmParameters, site: int) -> RbmParameters:
    """RBM for S^z_site|psi> up to a constant: exp(i pi/2 sigma) = i sigma."""
    a = psi.a.copy()
    a[site] += 0.5j * np.pi
    return RbmParameters(a, psi.b.copy(), psi.W.copy())


def solve_correction_vector(problem: CorrectionVectorProblem, init: RbmParameters | None,
                            settings: CvSettings, plan: SamplerPlan | None,
                            basis_configs=None, callback=None) -> CvSolution:
    """Minimize gamma^2 until 1 - x < tolerance; returns the best iterate seen."""
    chi = source_ansatz(problem.psi, problem.site) if init is None else init
    trace = []
    best = None
    since_best = 0
    converged = False
    for step in range(settings.max_iterations + 1):
        step_plan = None if plan is None else plan.with_seed(step)
        samples = sample_ratios(problem, chi, step_plan, basis_configs)
        x = estimate_x(samples)
        entry = {"step": step, "x": x, "gamma_sq": float(np.arccos(np.sqrt(x)) ** 2),
                 "beta": estimate_beta(samples)}
        trace.append(entry)
        if best is None or x > best[1]:
            best = (chi, x, samples)
            since_best = 0
        else:
            since_best += 1
        if 1.0 - x < settings.tolerance:
            converged = True
            break
        if since_best >= settings.patience or step == settings.max_iterations:
            log.info("correction vector stalled at 1-x = %.3g", 1.0 - best[1])
            break
        chi, info = _ngd_update(chi, settings, samples, step, x)
        entry.update(info)
        if callback is not None:
            callback(step, entry)
    chi, x, samples = best
    beta = estimate_beta(samples)
    return CvSolution(chi, beta, float(np.arccos(np.sqrt(x)) ** 2), x, trace, converged,
                      len(trace) - 1)
