"""Green's functions from paired correction vectors.

Raw convention: ``G`` is the resolvent element <A_i|(z - H)^-1|A_j> itself;
the spectral weight -Im G / pi is taken only in :func:`spectral_value` and
:func:`momentum_assemble`.

With chi+ solving Q chi+ = A and chi- solving Q^dagger chi- = A, and errors
d+ / d-, the three estimates combine as

    <A|chi+> + <chi-|A> - <chi-|Q|chi+>             = G - <d-|Q|d+>
    <A|A> + <chi-|Q^2|chi+> - <A|Q|chi+> - <chi-|Q|A> = <d-|Q^2|d+>

and G1 + (second line) / (i eta) cancels the error component sitting on
the eigenstate in resonance with omega.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import ModelSpec, SzSource, q_rows
from .sampler import AmplitudeProvider, SamplerPlan, exact_distribution, sample

CSV_SCHEMA = "rbmspectra-spectrum/1"
CSV_COLUMNS = ["k_index", "k", "omega", "re_G", "im_G", "S", "x_plus", "x_minus",
               "converged", "S_first_order", "S_raw"]


class ScaledAmplitude(AmplitudeProvider):
    """c * f(sigma)."""

    def __init__(self, inner: AmplitudeProvider, factor: complex):
        if factor == 0:
            raise ValueError("zero normalization: the correction vector is degenerate")
        self.inner, self.log_factor = inner, np.log(complex(factor))

    def log_amplitude(self, configs):
        return self.inner.log_amplitude(configs) + self.log_factor


class TranslatedAmplitude(AmplitudeProvider):
    """(T^m f)(sigma) = f(sigma shifted by m sites), with T moving site i to i + 1."""

    def __init__(self, inner: AmplitudeProvider, shift: int):
        self.inner, self.shift = inner, shift

    def log_amplitude(self, configs):
        return self.inner.log_amplitude(np.roll(np.asarray(configs), -self.shift, axis=-1))


def _over_psi(provider, configs, log_psi):
    with np.errstate(under="ignore"):
        return np.exp(provider.log_amplitude(configs) - log_psi)


def _q_over_psi(model, z, provider, configs, log_psi):
    """<sigma|(z - H)|f> / psi(sigma), never dividing by f itself."""
    neighbors, q = q_rows(model, z, configs)
    B, K, L = neighbors.shape
    vals = np.zeros((B, K), dtype=np.complex128)
    nz = q != 0
    rows, cols = np.nonzero(nz)
    with np.errstate(under="ignore"):
        vals[rows, cols] = np.exp(provider.log_amplitude(neighbors[rows, cols]) - log_psi[rows])
    return (q * vals).sum(axis=1)


@dataclass
class GreensEstimates:
    """Overlap estimates for G_{m,0}(z), m = 0..L-1, each divided by <psi|psi>.

    Field names: ``a_chi`` <A_m|chi+>, ``chi_a`` <chi-_m|A_0>, ``chi_q_chi``
    <chi-_m|Q|chi+>, ``a_q_chi`` <A_m|Q|chi+>, ``chi_q_a`` <chi-_m|Q|A_0>,
    ``chi_q2_chi`` <chi-_m|Q^2|chi+>, ``a_a`` <A_m|A_0>. chi-_m is chi-
    translated by m sites.
    """

    z: complex
    a_chi: np.ndarray
    chi_a: np.ndarray
    chi_q_chi: np.ndarray
    a_q_chi: np.ndarray
    chi_q_a: np.ndarray
    chi_q2_chi: np.ndarray
    a_a: np.ndarray
    source_norm: float = 0.25
    first_order: np.ndarray | None = None
    combined: np.ndarray | None = None

    @property
    def eta(self) -> float:
        return abs(self.z.imag)

    def finalize(self) -> "GreensEstimates":
        self.first_order = first_order_combined(self)
        self.combined = second_order_combined(self, self.eta)
        return self


def estimate_overlaps(model: ModelSpec, z: complex, psi: AmplitudeProvider,
                      chi_plus: AmplitudeProvider, beta_plus: complex,
                      chi_minus: AmplitudeProvider, beta_minus: complex,
                      plan: SamplerPlan | None, basis_configs=None,
                      source: SzSource = SzSource(0)) -> GreensEstimates:
    """All overlaps as P_0 averages anchored at A_0 = S^z_0 psi.

    <A_0|X>/<A_0|A_0> = <X(sigma)/A_0(sigma)>_{P_0}; for S^z sources
    A_m/A_0 = sigma_m sigma_0 and <A_0|A_0>/<psi|psi> = 1/4 exactly.
    """
    if plan is None:
        if basis_configs is None:
            raise ValueError("exact mode needs the sector basis")
        batch = exact_distribution(basis_configs, psi)
    else:
        batch = sample(plan, psi, model.length)
    configs, log_psi, w = batch.configs, batch.log_amp, batch.weights
    L = model.length
    j = source.site
    inv_a = 1.0 / source.values(configs)

    plus = ScaledAmplitude(chi_plus, beta_plus)
    minus = ScaledAmplitude(chi_minus, beta_minus)
    p = _over_psi(plus, configs, log_psi) * inv_a
    qp = _q_over_psi(model, z, plus, configs, log_psi) * inv_a

    rel = configs * configs[:, [j]]  # A_m / A_0
    shifts = [(m - j) % L for m in range(L)]
    cm = np.empty((L, len(w)), dtype=np.complex128)
    rm = np.empty((L, len(w)), dtype=np.complex128)
    for m, shift in enumerate(shifts):
        tm = TranslatedAmplitude(minus, shift)
        cm[m] = np.conj(_over_psi(tm, configs, log_psi) * inv_a)
        rm[m] = np.conj(_q_over_psi(model, np.conj(z), tm, configs, log_psi) * inv_a)

    norm = source.norm_ratio
    bad = ~(np.isfinite(p) & np.isfinite(qp) & np.all(np.isfinite(cm), axis=0)
            & np.all(np.isfinite(rm), axis=0))
    if bad.any():
        if plan is not None and bad.sum() > 1e-3 * len(w):
            raise FloatingPointError(f"{int(bad.sum())} non-finite overlap samples")
        w = np.where(bad, 0.0, w)
        w = w / w.sum()
        p, qp = np.where(bad, 0, p), np.where(bad, 0, qp)
        cm, rm = np.where(bad, 0, cm), np.where(bad, 0, rm)

    def avg(v):
        return norm * (v @ w)

    return GreensEstimates(
        z=complex(z),
        a_chi=avg(rel.T * p),
        chi_a=avg(cm),
        chi_q_chi=avg(cm * qp),
        a_q_chi=avg(rel.T * qp),
        chi_q_a=avg(rm),
        chi_q2_chi=avg(rm * qp),
        a_a=avg(rel.T.astype(np.float64)),
        source_norm=norm,
    ).finalize()


def first_order_combined(raw: GreensEstimates):
    """<A|chi+> + <chi-|A> - <chi-|Q|chi+>: first-order errors cancel."""
    return raw.a_chi + raw.chi_a - raw.chi_q_chi


def second_error_term(raw: GreensEstimates):
    return raw.a_a + raw.chi_q2_chi - raw.a_q_chi - raw.chi_q_a


def second_order_combined(raw: GreensEstimates, eta: float):
    """First-order estimate plus the isolated second-order error over (i eta)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return first_order_combined(raw) + second_error_term(raw) / (1j * eta)


def spectral_value(G):
    """-Im G / pi."""
    return -np.imag(G) / np.pi


def displacement_to_site(g_m0):
    """G_{0,n} = G_{-n,0} by translation invariance."""
    g_m0 = np.asarray(g_m0)
    return g_m0[(-np.arange(g_m0.size)) % g_m0.size]


def momenta(length: int, k_indices=None):
    idx = np.arange(length) if k_indices is None else np.asarray(k_indices, dtype=int)
    return idx, 2.0 * np.pi * idx / length


def momentum_assemble(g_0n, k_values):
    """G(k) = (1/L) sum_n e^{ikn} G_{0n}; returns (G(k), S(k), imaginary residue).

    S(k) = -Im G(k) / pi. The residue is the imaginary part of
    (1/L) sum_n e^{ikn} (-Im G_{0n} / pi), which vanishes for reflection
    symmetric data.
    """
    g_0n = np.asarray(g_0n, dtype=np.complex128)
    if g_0n.ndim != 1 or not np.all(np.isfinite(g_0n)):
        raise ValueError("site-resolved Green's function is incomplete")
    L = g_0n.size
    phases = np.exp(1j * np.outer(np.asarray(k_values), np.arange(L)))
    Gk = phases @ g_0n / L
    residue = np.imag(phases @ spectral_value(g_0n)) / L
    return Gk, spectral_value(Gk), residue


@dataclass
class SpectrumTable:
    k_index: np.ndarray
    k: np.ndarray
    omega: np.ndarray
    G: np.ndarray
    S: np.ndarray
    S_first: np.ndarray
    S_raw: np.ndarray
    x_plus: np.ndarray
    x_minus: np.ndarray
    converged: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.omega.size > 1 and not np.all(np.diff(self.omega) > 0):
            raise ValueError("frequency grid must be strictly increasing")

    @classmethod
    def empty(cls, k_index, k, omega):
        K, W = len(k_index), len(omega)
        c = np.zeros((K, W), dtype=np.complex128)
        r = np.zeros((K, W))
        return cls(np.asarray(k_index), np.asarray(k, dtype=float), np.asarray(omega, dtype=float),
                   c, r.copy(), r.copy(), r.copy(), np.ones(W), np.ones(W),
                   np.ones(W, dtype=bool))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {CSV_SCHEMA}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        f = _fmt
        for a, (ki, k) in enumerate(zip(self.k_index, self.k)):
            for b, w in enumerate(self.omega):
                writer.writerow([int(ki), f(k), f(w), f(self.G[a, b].real), f(self.G[a, b].imag),
                                 f(self.S[a, b]), f(self.x_plus[b]), f(self.x_minus[b]),
                                 int(bool(self.converged[b])), f(self.S_first[a, b]),
                                 f(self.S_raw[a, b])])
        return buf.getvalue()

    def write_csv(self, path):
        write_atomic(path, self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "SpectrumTable":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        if not rows:
            raise ValueError(f"{path}: no spectrum rows")
        missing = set(CSV_COLUMNS) - set(rows[0])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        k_index = sorted({int(r["k_index"]) for r in rows})
        omega = sorted({float(r["omega"]) for r in rows})
        kpos = {ki: a for a, ki in enumerate(k_index)}
        wpos = {w: b for b, w in enumerate(omega)}
        t = cls.empty(k_index, np.zeros(len(k_index)), omega)
        for r in rows:
            a, b = kpos[int(r["k_index"])], wpos[float(r["omega"])]
            t.k[a] = float(r["k"])
            t.G[a, b] = complex(float(r["re_G"]), float(r["im_G"]))
            t.S[a, b] = float(r["S"])
            t.S_first[a, b] = float(r["S_first_order"])
            t.S_raw[a, b] = float(r["S_raw"])
            t.x_plus[b] = float(r["x_plus"])
            t.x_minus[b] = float(r["x_minus"])
            t.converged[b] = bool(int(r["converged"]))
        return t


def _fmt(v) -> str:
    return repr(float(v))


def write_atomic(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
