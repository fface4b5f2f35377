"""Run orchestration: ground state, frequency sweeps, oracle spectra and comparison."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .cvsolver import CorrectionVectorProblem, CvSettings, solve_correction_vector
from .ed import SectorBasis, Spectrum, check_cap
from .greens import (SpectrumTable, displacement_to_site, estimate_overlaps, momenta,
                     momentum_assemble, spectral_value, write_atomic)
from .groundstate import OptimizationError, optimize_ground_state
from .hamiltonian import ModelSpec, SzSource
from .rbm import RbmParameters, init_random, load_checkpoint, save_checkpoint
from .sampler import RbmAmplitude, SamplerPlan

log = logging.getLogger(__name__)

NONCONVERGED_LIMIT = 0.25
EXACT_MODE_LIMIT = 20_000


class ConvergenceFailure(RuntimeError):
    pass


class GridMismatchError(ValueError):
    pass


# manifest -------------------------------------------------------------------

@dataclass
class RunManifest:
    """Record of one command. ``timings`` is the only non-reproducible field."""

    command: str
    config: str
    seeds: dict
    outputs: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    convergence: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def add_output(self, name: str, path):
        self.outputs[name] = _file_record(path)

    def add_input(self, name: str, path):
        self.inputs[name] = _file_record(path)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=_json_default) + "\n"

    def write(self, path):
        write_atomic(path, self.to_json())

    def verify(self) -> bool:
        """True when every named output still exists with its recorded size and hash."""
        for rec in self.outputs.values():
            p = Path(rec["path"])
            if not p.exists() or p.stat().st_size != rec["size"] or _sha256(p) != rec["sha256"]:
                return False
        return True


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _file_record(path) -> dict:
    p = Path(path)
    return {"path": str(p), "size": p.stat().st_size, "sha256": _sha256(p)}


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _basis_configs(cfg: RunConfig):
    if cfg.sampler.mode != "exact":
        return None
    basis = SectorBasis.build(cfg.model.length, 0.0)
    if len(basis) > EXACT_MODE_LIMIT:
        raise ValueError(f"exact mode needs {len(basis)} configurations; use mode = mc")
    return basis.configs


# ground state ------------------------------------------------------------------

@dataclass
class GroundStateOutcome:
    checkpoint: Path
    manifest: RunManifest
    e0: float
    e0_error: float
    converged: bool
    steps: int


def cmd_ground_state(cfg: RunConfig, checkpoint) -> GroundStateOutcome:
    started = time.perf_counter()
    model = cfg.model_spec()
    init = init_random(model.length, cfg.rbm.n_hidden, cfg.rbm.init_scale, cfg.rbm.seed)
    result = optimize_ground_state(model, init, cfg.sr_settings(), cfg.plan(), _basis_configs(cfg))
    checkpoint = Path(checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    e0 = float(result.e0_estimate.real)
    save_checkpoint(checkpoint, result.params, 0, e0)
    energies = [t["energy"] for t in result.energy_trace]
    manifest = RunManifest(
        "ground-state", cfg.to_text(),
        {"rbm": cfg.rbm.seed, "sampler": cfg.sampler.seed},
        summary={"e0": e0, "e0_error": result.e0_error, "e0_imag": result.e0_estimate.imag,
                 "converged": result.converged, "steps": result.steps,
                 "energy_first": energies[0], "energy_last": energies[-1]})
    manifest.add_output("checkpoint", checkpoint)
    manifest.timings["ground_state"] = time.perf_counter() - started
    manifest.write(manifest_path(checkpoint))
    return GroundStateOutcome(checkpoint, manifest, e0, result.e0_error, result.converged,
                              result.steps)


# frequency sweep ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepBlock:
    """A contiguous run of frequencies solved by one worker with warm starts."""

    model: ModelSpec
    psi: RbmParameters
    e0: float
    eta: float
    site: int
    indices: tuple
    omegas: tuple
    settings: CvSettings
    warm_start: bool
    cv_plan: SamplerPlan | None
    overlap_plan: SamplerPlan | None
    exact: bool


@dataclass
class PointResult:
    index: int
    omega: float
    g_combined: np.ndarray
    g_first: np.ndarray
    g_raw: np.ndarray
    x_plus: float
    x_minus: float
    converged: bool
    iterations: int


def frequency_blocks(n: int, block_size: int):
    """Contiguous index ranges; fixed by the configuration, never by the worker count."""
    return [tuple(range(s, min(s + block_size, n))) for s in range(0, n, block_size)]


def _solve(problem, init, settings, plan, basis):
    try:
        return solve_correction_vector(problem, init, settings, plan, basis)
    except OptimizationError as exc:
        if init is None:
            raise
        log.warning("warm start failed at z=%s (%s); cold restart", problem.z, exc)
        return solve_correction_vector(problem, None, settings, plan, basis)


def solve_block(block: SweepBlock) -> list[PointResult]:
    basis = SectorBasis.build(block.model.length, 0.0).configs if block.exact else None
    psi = RbmAmplitude(block.psi)
    source = SzSource(block.site)
    results = []
    warm_plus = warm_minus = None
    for index, omega in zip(block.indices, block.omegas):
        plus = CorrectionVectorProblem.at_frequency(block.model, block.psi, block.e0, omega,
                                                    block.eta, block.site)
        minus = plus.adjoint()
        plan_p = None if block.cv_plan is None else block.cv_plan.with_seed(index, 0)
        plan_m = None if block.cv_plan is None else block.cv_plan.with_seed(index, 1)
        L = block.model.length
        try:
            sol_p = _solve(plus, warm_plus, block.settings, plan_p, basis)
            sol_m = _solve(minus, warm_minus, block.settings, plan_m, basis)
        except OptimizationError as exc:
            log.warning("omega=%.4g failed: %s", omega, exc)
            nan = np.full(L, np.nan, dtype=np.complex128)
            results.append(PointResult(index, omega, nan, nan, nan, 0.0, 0.0, False, 0))
            warm_plus = warm_minus = None
            continue
        if block.warm_start:
            warm_plus, warm_minus = sol_p.chi_params, sol_m.chi_params
        oplan = None if block.overlap_plan is None else block.overlap_plan.with_seed(index, 2)
        est = estimate_overlaps(block.model, plus.z, psi, RbmAmplitude(sol_p.chi_params),
                                sol_p.beta, RbmAmplitude(sol_m.chi_params), sol_m.beta,
                                oplan, basis, source)
        results.append(PointResult(index, float(omega), est.combined, est.first_order,
                                   est.a_chi, sol_p.x_final, sol_m.x_final,
                                   sol_p.converged and sol_m.converged,
                                   sol_p.iterations + sol_m.iterations))
    return results


def _site_resolved(g_m0, site: int):
    """G_{j+d, j} for d = 0..L-1 (from one source j) mapped to G_{0n}."""
    g_m0 = np.asarray(g_m0)
    L = g_m0.size
    return displacement_to_site(g_m0[(site + np.arange(L)) % L])


def _assemble(g_m0, site, k_values):
    if not np.all(np.isfinite(g_m0)):
        nan = np.full(len(k_values), np.nan)
        return nan + 0j, nan
    Gk, S, _ = momentum_assemble(_site_resolved(g_m0, site), k_values)
    return Gk, S


def table_from_points(points: list[PointResult], k_index, omegas, site: int) -> SpectrumTable:
    k_index, k_values = momenta(len(points[0].g_combined), k_index)
    table = SpectrumTable.empty(k_index, k_values, omegas)
    for p in points:
        b = p.index
        Gk, S = _assemble(p.g_combined, site, k_values)
        table.G[:, b], table.S[:, b] = Gk, S
        table.S_first[:, b] = _assemble(p.g_first, site, k_values)[1]
        table.S_raw[:, b] = _assemble(p.g_raw, site, k_values)[1]
        table.x_plus[b], table.x_minus[b] = p.x_plus, p.x_minus
        table.converged[b] = p.converged
    return table


@dataclass
class SpectrumOutcome:
    table: SpectrumTable
    path: Path
    manifest: RunManifest
    nonconverged_fraction: float

    @property
    def failed(self) -> bool:
        return self.nonconverged_fraction > NONCONVERGED_LIMIT


def sweep_blocks(cfg: RunConfig, psi: RbmParameters, e0: float) -> list[SweepBlock]:
    omegas = cfg.omegas()
    model = cfg.model_spec()
    exact = cfg.sampler.mode == "exact"
    return [SweepBlock(model, psi, e0, cfg.sweep.eta, cfg.sweep.source_site, idx,
                       tuple(float(omegas[i]) for i in idx), cfg.cv_settings(),
                       cfg.cv.warm_start, cfg.plan(), cfg.overlap_plan(), exact)
            for idx in frequency_blocks(len(omegas), cfg.sweep.block_size)]


def cmd_spectrum(cfg: RunConfig, checkpoint, output, workers: int = 1) -> SpectrumOutcome:
    started = time.perf_counter()
    psi, _, e0 = load_checkpoint(checkpoint)
    if e0 is None:
        raise ValueError(f"{checkpoint}: checkpoint carries no ground-state energy")
    if psi.n_visible != cfg.model.length:
        raise ValueError(f"checkpoint has {psi.n_visible} sites, config has {cfg.model.length}")
    omegas = cfg.omegas()
    if omegas.size == 0:
        raise ValueError("empty frequency grid")
    _basis_configs(cfg)
    blocks = sweep_blocks(cfg, psi, e0)
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(solve_block, blocks))
    else:
        chunks = [solve_block(b) for b in blocks]
    points = sorted((p for chunk in chunks for p in chunk), key=lambda p: p.index)
    table = table_from_points(points, cfg.k_indices(), omegas, cfg.sweep.source_site)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(output)
    flags = [bool(p.converged) for p in points]
    frac = 1.0 - sum(flags) / len(flags)
    manifest = RunManifest(
        "spectrum", cfg.to_text(),
        {"rbm": cfg.rbm.seed, "sampler": cfg.sampler.seed},
        convergence=[{"omega": p.omega, "converged": p.converged, "x_plus": p.x_plus,
                      "x_minus": p.x_minus, "iterations": p.iterations} for p in points],
        summary={"e0": e0, "points": len(points), "nonconverged_fraction": frac,
                 "blocks": len(blocks)})
    manifest.add_input("checkpoint", checkpoint)
    manifest.add_output("spectrum", output)
    manifest.timings["spectrum"] = time.perf_counter() - started
    manifest.timings["workers"] = workers
    manifest.write(manifest_path(output))
    return SpectrumOutcome(table, output, manifest, frac)


# oracle -------------------------------------------------------------------------

def oracle_table(cfg: RunConfig, spectrum: Spectrum | None = None) -> SpectrumTable:
    """Exact S(k, omega) on the configured grid, through the same assembly path."""
    model = cfg.model_spec()
    spectrum = spectrum or Spectrum.from_model(model)
    L, site = model.length, cfg.sweep.source_site
    omegas = cfg.omegas()
    points = []
    for b, omega in enumerate(omegas):
        z = complex(spectrum.e0 + omega, cfg.sweep.eta)
        g = np.array([spectrum.greens(z, (site + d) % L, site) for d in range(L)])
        g_m0 = np.empty(L, dtype=np.complex128)
        g_m0[(site + np.arange(L)) % L] = g
        points.append(PointResult(b, float(omega), g_m0, g_m0, g_m0, 1.0, 1.0, True, 0))
    return table_from_points(points, cfg.k_indices(), omegas, site)


def cmd_ed(cfg: RunConfig, output) -> SpectrumTable:
    started = time.perf_counter()
    model = cfg.model_spec()
    check_cap(SectorBasis.build(model.length, 0.0), EXACT_MODE_LIMIT)
    spectrum = Spectrum.from_model(model)
    table = oracle_table(cfg, spectrum)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(output)
    manifest = RunManifest("ed", cfg.to_text(), {}, summary={"e0": spectrum.e0})
    manifest.add_output("oracle", output)
    manifest.timings["ed"] = time.perf_counter() - started
    manifest.write(manifest_path(output))
    return table


# comparison --------------------------------------------------------------------

def local_peaks(values, fraction: float):
    """Indices of interior local maxima at least ``fraction`` of the column maximum."""
    v = np.asarray(values)
    top = np.nanmax(v)
    if not top > 0:
        return np.array([], dtype=int)
    inner = np.arange(1, v.size - 1)
    is_peak = (v[inner] >= v[inner - 1]) & (v[inner] > v[inner + 1]) & (v[inner] >= fraction * top)
    return inner[is_peak]


def lorentzian_window_mass(centers, eta: float, lo: float, hi: float):
    """Fraction of a unit Lorentzian (half-width eta) centred at each pole inside [lo, hi]."""
    c = np.asarray(centers)
    return (np.arctan((hi - c) / eta) - np.arctan((lo - c) / eta)) / np.pi


def _check_grids(var: SpectrumTable, oracle: SpectrumTable):
    if (var.omega.shape != oracle.omega.shape or not np.allclose(var.omega, oracle.omega,
                                                                  rtol=0, atol=1e-12)):
        raise GridMismatchError("frequency grids differ")
    if not np.array_equal(var.k_index, oracle.k_index):
        raise GridMismatchError("momentum lists differ")


def compare_tables(var: SpectrumTable, oracle: SpectrumTable, cfg: RunConfig,
                   spectrum: Spectrum | None = None) -> dict:
    """Error report of a spectrum against the oracle; ``verdict`` is the overall pass flag."""
    _check_grids(var, oracle)
    tol = cfg.compare
    omega, eta = var.omega, cfg.sweep.eta
    spectrum = spectrum or Spectrum.from_model(cfg.model_spec())
    global_max = float(np.nanmax(oracle.S))
    var_max = float(np.nanmax(var.S))
    norms = np.sqrt(np.nansum(oracle.S ** 2, axis=1))
    per_k = []
    checks = []
    order_wins = order_total = 0
    for a, (ki, k) in enumerate(zip(var.k_index, var.k)):
        s_v, s_o, s_1 = var.S[a], oracle.S[a], var.S_first[a]
        entry = {"k_index": int(ki), "k": float(k)}
        # momenta without spectral weight (k = 0) are judged by the symmetry check only
        weighted = norms[a] > 1e-8 * norms.max()
        if weighted:
            rel = float(np.linalg.norm(s_v - s_o) / norms[a])
            entry["rel_l2"] = rel
            checks.append(rel < tol.rel_l2_tol)
        else:
            entry["rel_l2"] = None
        empty = np.array([], dtype=int)
        o_peaks = local_peaks(s_o, tol.peak_fraction) if weighted else empty
        v_peaks = local_peaks(s_v, tol.peak_fraction) if weighted else empty
        deltas = []
        for p in o_peaks:
            d = float(np.min(np.abs(omega[v_peaks] - omega[p]))) if v_peaks.size else np.inf
            deltas.append({"omega": float(omega[p]), "delta": d})
            checks.append(d <= tol.peak_tol + 1e-9)
        spurious = [float(omega[p]) for p in v_peaks
                    if not o_peaks.size or np.min(np.abs(omega[o_peaks] - omega[p])) > tol.peak_tol + 1e-9]
        checks.append(not spurious)
        entry["peaks"] = deltas
        entry["spurious_peaks"] = spurious
        order = []
        for p in o_peaks:
            e2, e1 = abs(s_v[p] - s_o[p]), abs(s_1[p] - s_o[p])
            order.append({"omega": float(omega[p]), "second_order_error": float(e2),
                          "first_order_error": float(e1)})
            order_total += 1
            order_wins += e2 <= e1
        entry["order_comparison"] = order
        dE, w = spectrum.pole_weights(float(k))
        static = float(w.sum())
        expected = float(w @ lorentzian_window_mass(dE, eta, omega[0], omega[-1]))
        i_v = float(np.trapezoid(np.nan_to_num(s_v), omega))
        i_o = float(np.trapezoid(s_o, omega))
        bound = abs(i_o - expected) + tol.sum_rule_allowance * max(static, 1e-12 * global_max) + 1e-12
        entry["sum_rule"] = {"static": static, "expected_in_window": expected,
                             "integral": i_v, "oracle_integral": i_o, "drift": i_v - i_o,
                             "bound": bound, "ok": abs(i_v - expected) <= bound}
        if weighted:
            checks.append(entry["sum_rule"]["ok"])
        per_k.append(entry)
    k0 = [a for a, ki in enumerate(var.k_index) if ki == 0]
    k0_ratio = float(np.nanmax(np.abs(var.S[k0[0]])) / var_max) if k0 and var_max > 0 else 0.0
    negative = float(-min(np.nanmin(var.S), 0.0) / var_max) if var_max > 0 else 0.0
    symmetry = {"k0_max_ratio": k0_ratio, "most_negative_ratio": negative,
                "ok": k0_ratio < 0.01 and negative <= 0.02}
    finite = bool(np.all(np.isfinite(var.S)))
    orders_ok = order_wins == order_total
    verdict = bool(all(checks) and symmetry["ok"] and finite and orders_ok)
    return {"per_k": per_k, "symmetry": symmetry, "global_max": global_max,
            "second_order_wins": order_wins, "oracle_peaks": order_total,
            "finite": finite, "verdict": verdict}


def cmd_compare(cfg: RunConfig, variational, oracle, output) -> dict:
    model = cfg.model_spec()
    check_cap(SectorBasis.build(model.length, 0.0), EXACT_MODE_LIMIT)
    report = compare_tables(SpectrumTable.read_csv(variational), SpectrumTable.read_csv(oracle),
                            cfg)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(output, json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    return report
