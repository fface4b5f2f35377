"""Exact diagonalization reference for small chains."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hamiltonian import ModelSpec, connected_states, hamiltonian_rows
from .sampler import AmplitudeProvider, n_up_spins

DEFAULT_CAP = 20_000
DENSE_EIGH_LIMIT = 5_000


class OracleCapError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SectorBasis:
    """All configurations of one S^z_tot sector, ordered by their bit codes.

    Bit i of a code is set when sigma_i = +1.
    """

    length: int
    sector: float
    codes: np.ndarray
    configs: np.ndarray

    @classmethod
    def build(cls, length: int, sector: float = 0.0) -> "SectorBasis":
        n_up = n_up_spins(length, sector)
        codes = sorted(sum(1 << i for i in ups)
                       for ups in itertools.combinations(range(length), n_up))
        codes = np.array(codes, dtype=np.int64)
        configs = np.where((codes[:, None] >> np.arange(length)) & 1, 1, -1).astype(np.int8)
        return cls(length, sector, codes, configs)

    def __len__(self):
        return self.codes.size

    def encode(self, configs) -> np.ndarray:
        configs = np.asarray(configs)
        return ((configs > 0).astype(np.int64) << np.arange(self.length)).sum(axis=-1)

    def index(self, configs) -> np.ndarray:
        codes = self.encode(configs)
        idx = np.searchsorted(self.codes, codes)
        idx = np.minimum(idx, self.codes.size - 1)
        if not np.all(self.codes[idx] == codes):
            raise KeyError("configuration outside the sector basis")
        return idx


@dataclass(frozen=True, eq=False)
class DenseOperator:
    basis: SectorBasis
    matrix: np.ndarray


def check_cap(basis: SectorBasis, cap: int):
    if len(basis) > cap:
        raise OracleCapError(f"sector dimension {len(basis)} exceeds the oracle cap {cap}")


def build_hamiltonian(model: ModelSpec, sector: float = 0.0, cap: int = DEFAULT_CAP,
                      basis: SectorBasis | None = None) -> DenseOperator:
    """Dense H assembled row by row from :func:`connected_states`."""
    basis = basis or SectorBasis.build(model.length, sector)
    check_cap(basis, cap)
    H = np.zeros((len(basis), len(basis)))
    for col, config in enumerate(basis.configs):
        row = connected_states(model, config)
        H[basis.index(np.array(row.configs)), col] += row.elements
    return DenseOperator(basis, H)


def sparse_hamiltonian(model: ModelSpec, basis: SectorBasis) -> sp.csr_matrix:
    neighbors, elements = hamiltonian_rows(model, basis.configs)
    D, K = elements.shape
    cols = np.repeat(np.arange(D), K)
    nz = elements.ravel() != 0
    rows = basis.index(neighbors.reshape(D * K, -1)[nz])
    return sp.csr_matrix((elements.ravel()[nz], (rows, cols[nz])), shape=(D, D))


def lanczos_ground_energy(model: ModelSpec, sector: float = 0.0) -> float:
    basis = SectorBasis.build(model.length, sector)
    H = sparse_hamiltonian(model, basis)
    if len(basis) < 3:
        return float(np.linalg.eigvalsh(H.toarray())[0])
    v0 = np.ones(len(basis)) / np.sqrt(len(basis))
    return float(spla.eigsh(H, k=1, which="SA", v0=v0, tol=1e-12)[0][0])


@dataclass(frozen=True, eq=False)
class ExactGroundState:
    energy: float
    vector: np.ndarray
    basis: SectorBasis
    hamiltonian: np.ndarray | sp.csr_matrix


def exact_ground_state(model: ModelSpec, sector: float | None = 0.0,
                       cap: int = DEFAULT_CAP) -> ExactGroundState:
    """Lowest eigenpair of one sector, or over all sectors when ``sector`` is None."""
    if sector is None:
        L = model.length
        sectors = [n - L / 2 for n in range(L + 1)]
        return min((exact_ground_state(model, s, cap) for s in sectors), key=lambda g: g.energy)
    basis = SectorBasis.build(model.length, sector)
    check_cap(basis, cap)
    if len(basis) <= DENSE_EIGH_LIMIT:
        H = build_hamiltonian(model, sector, cap, basis).matrix
        w, v = np.linalg.eigh(H)
        vec = v[:, 0]
        energy = w[0]
    else:
        H = sparse_hamiltonian(model, basis)
        v0 = np.ones(len(basis)) / np.sqrt(len(basis))
        w, v = spla.eigsh(H, k=1, which="SA", v0=v0, tol=1e-12)
        vec = v[:, 0]
        energy = w[0]
    # fix the global phase so the largest component is positive
    vec = vec * np.sign(vec[np.argmax(np.abs(vec))])
    return ExactGroundState(float(energy), vec.astype(np.complex128), basis, H)


def sz_vector(basis: SectorBasis, site: int, state) -> np.ndarray:
    return basis.configs[:, site] / 2.0 * np.asarray(state)


def exact_greens(model: ModelSpec, e0: float, psi0, z: complex, i: int, j: int,
                 basis: SectorBasis | None = None, hamiltonian=None) -> complex:
    """<S^z_i psi0| (z - H)^-1 |S^z_j psi0> by a direct shifted solve."""
    basis = basis or SectorBasis.build(model.length, 0.0)
    H = hamiltonian if hamiltonian is not None else build_hamiltonian(model, basis=basis).matrix
    H = H.toarray() if sp.issparse(H) else H
    psi0 = np.asarray(psi0, dtype=np.complex128)
    psi0 = psi0 / np.linalg.norm(psi0)
    rhs = sz_vector(basis, j, psi0)
    x = np.linalg.solve(z * np.eye(len(basis)) - H, rhs)
    return complex(np.vdot(sz_vector(basis, i, psi0), x))


def resolvent_solution(hamiltonian, z: complex, rhs) -> np.ndarray:
    H = hamiltonian.toarray() if sp.issparse(hamiltonian) else np.asarray(hamiltonian)
    return np.linalg.solve(z * np.eye(H.shape[0]) - H, rhs)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Eigen-decomposition of H with S^z_n matrix elements from the ground state."""

    e0: float
    energies: np.ndarray
    # amplitudes[site, n] = <n|S^z_site|psi0>
    amplitudes: np.ndarray
    vectors: np.ndarray | None = None
    basis: SectorBasis | None = None
    hamiltonian: np.ndarray | None = None
    ground: np.ndarray | None = None

    @classmethod
    def from_model(cls, model: ModelSpec, cap: int = DEFAULT_CAP) -> "Spectrum":
        gs = exact_ground_state(model, 0.0, cap)
        H = gs.hamiltonian.toarray() if sp.issparse(gs.hamiltonian) else gs.hamiltonian
        w, v = np.linalg.eigh(H)
        psi = gs.vector / np.linalg.norm(gs.vector)
        amps = np.stack([v.conj().T @ sz_vector(gs.basis, s, psi)
                         for s in range(model.length)])
        return cls(gs.energy, w, amps, v, gs.basis, H, psi)

    def greens(self, z: complex, i: int, j: int) -> complex:
        return complex(np.sum(self.amplitudes[i].conj() * self.amplitudes[j] / (z - self.energies)))

    def pole_weights(self, k: float, tol: float = 1e-12):
        """(excitation energies, weights) of S(k, omega) = sum_n w_n delta(omega - dE_n).

        Weights follow S(k, omega) = -(1/(L pi)) Im sum_n e^{ikn} G_0n, so
        w_n = |sum_b e^{ikb} <n|S^z_b|psi0>|^2 / L^2.
        """
        L = self.amplitudes.shape[0]
        phase = np.exp(1j * k * np.arange(L)) / L
        ak = phase @ self.amplitudes
        w = np.abs(ak) ** 2
        keep = w > tol
        return self.energies[keep] - self.e0, w[keep]

    def static_structure_factor(self, k: float) -> float:
        return float(self.pole_weights(k, 0.0)[1].sum())


def perturb_and_project(chi, epsilon: float, direction="random", *, seed: int = 0,
                        eigvecs=None) -> np.ndarray:
    """chi + epsilon * d with d a unit vector.

    ``direction`` is ``"random"`` (complex Gaussian, seeded), an integer
    eigenstate index (requires ``eigvecs``), or an explicit vector.
    """
    chi = np.asarray(chi, dtype=np.complex128)
    if isinstance(direction, str):
        if direction != "random":
            raise ValueError(f"unknown direction {direction!r}")
        rng = np.random.default_rng(seed)
        d = rng.standard_normal(chi.size) + 1j * rng.standard_normal(chi.size)
    elif np.isscalar(direction):
        d = np.asarray(eigvecs)[:, int(direction)].astype(np.complex128)
    else:
        d = np.asarray(direction, dtype=np.complex128)
    return chi + epsilon * d / np.linalg.norm(d)


class DenseAmplitude(AmplitudeProvider):
    """Amplitude provider backed by a dense vector over a sector basis."""

    def __init__(self, basis: SectorBasis, vector):
        self.basis = basis
        self.vector = np.asarray(vector, dtype=np.complex128)

    def log_amplitude(self, configs):
        configs = np.atleast_2d(configs)
        shape = configs.shape[:-1]
        vals = self.vector[self.basis.index(configs.reshape(-1, self.basis.length))]
        with np.errstate(divide="ignore"):
            return np.log(vals).reshape(shape)
