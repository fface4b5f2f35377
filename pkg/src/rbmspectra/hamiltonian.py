"""J1-J2 Heisenberg chain in the S^z basis.

Spins are stored as sigma = +-1 (S^z = sigma / 2). A bond (i, j) with
coupling J contributes J sigma_i sigma_j / 4 on the diagonal and J / 2 for
every antiparallel pair it exchanges.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .rbm import RbmParameters, ChainState, log_psi_batch


@dataclass(frozen=True)
class ModelSpec:
    length: int
    j1: float = 1.0
    j2: float = 0.0
    periodic: bool = True

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("chain length must be at least 2")
        if self.periodic and self.j2 != 0.0 and self.length < 4:
            raise ValueError("periodic chains with next-nearest couplings need length >= 4")

    @cached_property
    def bonds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(i, j, J) arrays with every unordered pair appearing once.

        Pairs generated twice by the periodic sum (e.g. J2 on L=4) are merged
        by adding their couplings.
        """
        L = self.length
        merged: dict[tuple[int, int], float] = {}
        for dist, J in ((1, self.j1), (2, self.j2)):
            if J == 0.0:
                continue
            last = L if self.periodic else L - dist
            for i in range(max(last, 0)):
                j = (i + dist) % L
                key = (min(i, j), max(i, j))
                merged[key] = merged.get(key, 0.0) + J
        pairs = sorted(merged)
        i = np.array([p[0] for p in pairs], dtype=np.intp)
        j = np.array([p[1] for p in pairs], dtype=np.intp)
        J = np.array([merged[p] for p in pairs], dtype=np.float64)
        return i, j, J

    @property
    def n_bonds(self) -> int:
        return self.bonds[0].size


@dataclass
class SparseRow:
    configs: list
    elements: list

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(zip(self.configs, self.elements))


def diagonal_energy(model: ModelSpec, configs) -> np.ndarray:
    configs = np.asarray(configs)
    i, j, J = model.bonds
    return (configs[..., i] * configs[..., j]) @ J / 4.0


def connected_states(model: ModelSpec, config) -> SparseRow:
    """All sigma' with <sigma'|H|sigma> != 0, diagonal entry first."""
    config = np.asarray(config, dtype=np.int8)
    if config.size != model.length:
        raise ValueError(f"configuration length {config.size} != L={model.length}")
    configs = [config.copy()]
    elements = [float(diagonal_energy(model, config))]
    for i, j, J in zip(*model.bonds):
        if config[i] != config[j]:
            swapped = config.copy()
            swapped[i], swapped[j] = config[j], config[i]
            configs.append(swapped)
            elements.append(J / 2.0)
    return SparseRow(configs, elements)


def hamiltonian_rows(model: ModelSpec, configs):
    """Fixed-width sparse rows for a batch of configurations.

    Returns ``(neighbors, elements)`` of shapes (B, 1 + n_bonds, L) and
    (B, 1 + n_bonds). Column 0 is the diagonal; column 1 + b is the
    configuration with bond b exchanged, whose element is zero when the bond
    is parallel (the neighbor is then a harmless copy of the input).
    """
    configs = np.asarray(configs, dtype=np.int8)
    if configs.ndim == 1:
        configs = configs[None, :]
    bi, bj, J = model.bonds
    B, L = configs.shape
    K = 1 + bi.size
    neighbors = np.repeat(configs[:, None, :], K, axis=1)
    si = configs[:, bi]
    sj = configs[:, bj]
    idx = np.arange(bi.size)
    neighbors[:, 1 + idx, bi] = sj
    neighbors[:, 1 + idx, bj] = si
    elements = np.empty((B, K), dtype=np.float64)
    elements[:, 0] = (si * sj) @ J / 4.0
    elements[:, 1:] = np.where(si != sj, J / 2.0, 0.0)
    return neighbors, elements


def q_rows(model: ModelSpec, z: complex, configs):
    """Sparse rows of Q = z - H (same layout as :func:`hamiltonian_rows`)."""
    neighbors, elements = hamiltonian_rows(model, configs)
    q = -elements.astype(np.complex128)
    q[:, 0] += z
    return neighbors, q


def row_ratios(log_amplitude, neighbors, log_amp, elements):
    """exp(log f(sigma') - log f(sigma)) on every nonzero entry, zero elsewhere."""
    B, K, L = neighbors.shape
    nz = elements != 0
    nz[:, 0] = True
    ratios = np.zeros((B, K), dtype=np.complex128)
    ratios[:, 0] = 1.0
    rows, cols = np.nonzero(nz[:, 1:])
    if rows.size:
        vals = log_amplitude(neighbors[rows, cols + 1])
        ratios[rows, cols + 1] = np.exp(vals - log_amp[rows])
    return ratios


def local_energy_batch(model: ModelSpec, log_amplitude, configs, log_amp=None) -> np.ndarray:
    """E_loc(sigma) = <sigma|H|f>/f(sigma) for an arbitrary log-amplitude callable."""
    configs = np.atleast_2d(np.asarray(configs, dtype=np.int8))
    if log_amp is None:
        log_amp = log_amplitude(configs)
    neighbors, elements = hamiltonian_rows(model, configs)
    ratios = row_ratios(log_amplitude, neighbors, log_amp, elements)
    return (elements * ratios).sum(axis=1)


def local_energy(model: ModelSpec, params: RbmParameters, state: ChainState) -> complex:
    def f(c):
        return log_psi_batch(params, c)
    return complex(local_energy_batch(model, f, state.config[None, :],
                                      np.array([state.log_amp]))[0])


@dataclass(frozen=True)
class SzSource:
    """The diagonal source operator S^z at one site."""

    site: int

    def values(self, configs) -> np.ndarray:
        """<sigma|S^z_j|f>/f(sigma) = sigma_j / 2."""
        return np.asarray(configs)[..., self.site] / 2.0

    @property
    def norm_ratio(self) -> float:
        """<A|A>/<psi|psi>; exact because |sigma_j / 2|^2 = 1/4 everywhere."""
        return 0.25


def local_operator_ratio(op: SzSource, params: RbmParameters, state: ChainState) -> float:
    if not 0 <= op.site < state.config.size:
        raise IndexError(f"source site {op.site} out of range")
    return float(op.values(state.config))


def local_q_action_batch(model: ModelSpec, z: complex, log_amplitude, configs, log_amp=None):
    """log <sigma|(z - H)|f> for each configuration (complex log, -inf when zero)."""
    configs = np.atleast_2d(np.asarray(configs, dtype=np.int8))
    if log_amp is None:
        log_amp = log_amplitude(configs)
    e_loc = local_energy_batch(model, log_amplitude, configs, log_amp)
    with np.errstate(divide="ignore"):
        return log_amp + np.log(z - e_loc + 0j)


def local_q_action(model: ModelSpec, z: complex, chi_params: RbmParameters, config) -> complex:
    """<sigma|(z - H)|chi> computed from amplitude ratios anchored at chi(sigma)."""
    config = np.asarray(config, dtype=np.int8)

    def f(c):
        return log_psi_batch(chi_params, c)
    log_amp = f(config[None, :])
    e_loc = local_energy_batch(model, f, config[None, :], log_amp)[0]
    return complex(np.exp(log_amp[0]) * (z - e_loc))
