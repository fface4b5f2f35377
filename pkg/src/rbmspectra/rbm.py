"""Complex restricted Boltzmann machine amplitudes.

The hidden layer is traced out analytically:

    log psi(s) = sum_i a_i s_i + sum_j log(2 cosh theta_j),
    theta_j    = b_j + sum_i W_ij s_i

Flat parameter layout (used by every optimizer and by checkpoints):
``[a (N) | b (M) | W (N*M, row-major)]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REFRESH_INTERVAL = 10_000

CHECKPOINT_MAGIC = b"RBMSPCK\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIiBd")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RbmParameters:
    a: np.ndarray
    b: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.complex128)
        b = np.asarray(self.b, dtype=np.complex128)
        W = np.asarray(self.W, dtype=np.complex128)
        if a.ndim != 1 or b.ndim != 1 or W.shape != (a.size, b.size):
            raise DimensionError(
                f"inconsistent RBM shapes a{a.shape} b{b.shape} W{W.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "W", W)

    @property
    def n_visible(self) -> int:
        return self.a.size

    @property
    def n_hidden(self) -> int:
        return self.b.size

    @property
    def n_params(self) -> int:
        return n_params(self.n_visible, self.n_hidden)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a, self.b, self.W.ravel()])

    @classmethod
    def from_flat(cls, n_visible: int, n_hidden: int, alpha) -> "RbmParameters":
        alpha = np.asarray(alpha, dtype=np.complex128)
        if alpha.shape != (n_params(n_visible, n_hidden),):
            raise DimensionError(
                f"flat vector of length {alpha.size} does not fit N={n_visible}, M={n_hidden}")
        N, M = n_visible, n_hidden
        return cls(alpha[:N].copy(), alpha[N:N + M].copy(),
                   alpha[N + M:].reshape(N, M).copy())

    def shifted(self, delta) -> "RbmParameters":
        return RbmParameters.from_flat(self.n_visible, self.n_hidden, self.flat() + delta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def __eq__(self, other):
        if not isinstance(other, RbmParameters):
            return NotImplemented
        return (self.a.shape == other.a.shape and self.b.shape == other.b.shape
                and np.array_equal(self.flat(), other.flat()))


def n_params(n_visible: int, n_hidden: int) -> int:
    return n_visible + n_hidden + n_visible * n_hidden


def flat_index(n_visible: int, n_hidden: int, block: str, i: int, j: int | None = None) -> int:
    """Map ``("a", i)``, ``("b", j)`` or ``("W", i, j)`` to the flat position."""
    if block == "a":
        return i
    if block == "b":
        return n_visible + i
    if block == "W":
        return n_visible + n_hidden + i * n_hidden + j
    raise KeyError(block)


def init_random(n_visible: int, n_hidden: int, scale: float, seed: int) -> RbmParameters:
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    size = n_params(n_visible, n_hidden)
    alpha = scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))
    return RbmParameters.from_flat(n_visible, n_hidden, alpha)


def log_cosh2(theta):
    """log(2 cosh theta) for complex theta without overflow.

    Uses 2 cosh t = e^{s t} (1 + e^{-2 s t}) with s = sign(Re t), so the
    exponential argument always has non-positive real part.
    """
    theta = np.asarray(theta, dtype=np.complex128)
    s = np.where(theta.real >= 0, 1.0, -1.0)
    st = s * theta
    return st + np.log1p(np.exp(-2.0 * st))


def _check(params: RbmParameters, configs: np.ndarray):
    if configs.shape[-1] != params.n_visible:
        raise DimensionError(
            f"configuration length {configs.shape[-1]} != n_visible {params.n_visible}")


def theta_batch(params: RbmParameters, configs) -> np.ndarray:
    configs = np.asarray(configs)
    _check(params, configs)
    return configs @ params.W + params.b


def log_psi_batch(params: RbmParameters, configs) -> np.ndarray:
    """Log-amplitudes for an array of configurations of shape (..., N)."""
    configs = np.asarray(configs)
    theta = theta_batch(params, configs)
    return configs @ params.a + log_cosh2(theta).sum(axis=-1)


def log_psi(params: RbmParameters, config) -> complex:
    config = np.asarray(config)
    if config.ndim != 1:
        raise DimensionError("log_psi expects a single configuration")
    return complex(log_psi_batch(params, config))


def log_derivatives_batch(params: RbmParameters, configs) -> np.ndarray:
    """O_k(s) = d log psi / d alpha_k for each configuration, shape (B, P)."""
    configs = np.atleast_2d(np.asarray(configs))
    t = np.tanh(theta_batch(params, configs))
    B = configs.shape[0]
    sw = (configs[:, :, None] * t[:, None, :]).reshape(B, -1)
    return np.concatenate([configs.astype(np.complex128), t, sw], axis=1)


def log_derivatives(params: RbmParameters, config) -> np.ndarray:
    config = np.asarray(config)
    if config.ndim != 1:
        raise DimensionError("log_derivatives expects a single configuration")
    return log_derivatives_batch(params, config[None, :])[0]


def weighted_row_derivatives(params: RbmParameters, neighbors, coeffs) -> np.ndarray:
    """sum_k coeffs[b, k] * O(neighbors[b, k]) for every row b, shape (B, P).

    Avoids materialising O for every neighbor: the W block factorises as
    sum_k (c_k s'_k) outer tanh(theta'_k).
    """
    neighbors = np.asarray(neighbors)
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    B = neighbors.shape[0]
    t = np.tanh(theta_batch(params, neighbors))
    cs = coeffs[:, :, None] * neighbors
    grad_a = cs.sum(axis=1)
    grad_b = np.einsum("bk,bkm->bm", coeffs, t)
    grad_W = np.einsum("bkn,bkm->bnm", cs, t).reshape(B, -1)
    return np.concatenate([grad_a, grad_b, grad_W], axis=1)


@dataclass(frozen=True, eq=False)
class ChainState:
    """A configuration with cached hidden activations and log-amplitude."""

    config: np.ndarray
    theta: np.ndarray
    log_amp: complex
    updates_since_refresh: int = field(default=0)

    @classmethod
    def fresh(cls, params: RbmParameters, config) -> "ChainState":
        config = np.array(config, dtype=np.int8)
        _check(params, config)
        theta = config @ params.W + params.b
        log_amp = complex(config @ params.a + log_cosh2(theta).sum())
        return cls(config, theta, log_amp, 0)


def flip_update(state: ChainState, params: RbmParameters, flips) -> ChainState:
    """Return the state with the spins at ``flips`` negated; ``state`` is untouched."""
    flips = np.unique(np.asarray(list(flips), dtype=np.intp))
    if flips.size == 0:
        return state
    n = state.config.size
    if flips.min() < 0 or flips.max() >= n:
        raise IndexError(f"flip sites {flips.tolist()} out of range for N={n}")
    old = state.config[flips].astype(np.float64)
    config = state.config.copy()
    config[flips] = -config[flips]
    count = state.updates_since_refresh + 1
    if count >= REFRESH_INTERVAL:
        return ChainState.fresh(params, config)
    theta = state.theta - 2.0 * (old @ params.W[flips])
    d_vis = -2.0 * (old @ params.a[flips])
    log_amp = state.log_amp + d_vis + (log_cosh2(theta).sum() - log_cosh2(state.theta).sum())
    return ChainState(config, theta, complex(log_amp), count)


def save_checkpoint(path, params: RbmParameters, sector: int = 0, e0: float | None = None):
    """Write the binary checkpoint.

    Layout (little-endian): magic[8], version u32, N u32, M u32, sector i32,
    has_e0 u8, e0 f64, then N+M+N*M complex values as interleaved (re, im) f64.
    """
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.n_visible,
                          params.n_hidden, int(sector), int(e0 is not None),
                          float(e0) if e0 is not None else 0.0)
    body = params.flat().astype("<c16").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> tuple[RbmParameters, int, float | None]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, N, M, sector, has_e0, e0 = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an RBM checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = data[_HEADER.size:]
    expected = 16 * n_params(N, M)
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    alpha = np.frombuffer(body, dtype="<c16").astype(np.complex128)
    return RbmParameters.from_flat(N, M, alpha), sector, (e0 if has_e0 else None)
