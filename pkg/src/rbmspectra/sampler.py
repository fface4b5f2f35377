"""S^z-conserving Metropolis sampling of |f(sigma)|^2.

Chains are advanced in lockstep as one array, but every chain draws its
random numbers from its own Philox stream keyed by (seed, chain index), so
results do not depend on how chains are grouped or scheduled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .rbm import RbmParameters, log_cosh2, REFRESH_INTERVAL

log = logging.getLogger(__name__)

MAX_REJECTED_FRACTION = 1e-3


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerPlan:
    n_chains: int = 16
    n_samples_per_chain: int = 1250
    thinning: int = 100
    burn_in: int = 1000
    seed: int = 0
    sector: float = 0.0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.n_samples_per_chain < 1:
            raise ValueError("n_samples_per_chain must be >= 1")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @property
    def n_samples(self) -> int:
        return self.n_chains * self.n_samples_per_chain

    def with_seed(self, *keys: int) -> "SamplerPlan":
        """Plan with a seed derived deterministically from this seed and ``keys``."""
        ss = np.random.SeedSequence([self.seed, *keys])
        return SamplerPlan(self.n_chains, self.n_samples_per_chain, self.thinning,
                           self.burn_in, int(ss.generate_state(1, np.uint32)[0]), self.sector)


def n_up_spins(length: int, sector: float) -> int:
    n_up = length / 2 + sector
    if n_up != int(n_up) or not 0 <= n_up <= length:
        raise ValueError(f"S^z_tot = {sector} is not a valid sector for L={length}")
    return int(n_up)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed % 2**64, chain]))


# amplitude providers ------------------------------------------------------

class AmplitudeProvider:
    """Anything with a batched complex log-amplitude.

    Subclasses may override the incremental hooks; the defaults recompute.
    """

    def log_amplitude(self, configs) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, configs):
        return self.log_amplitude(configs)

    def start(self, configs):
        return self.log_amplitude(configs), None

    def trial(self, cache, configs, proposed, i, k):
        return self.log_amplitude(proposed), None

    def commit(self, cache, candidate, accept, configs):
        return cache


class FunctionAmplitude(AmplitudeProvider):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def log_amplitude(self, configs):
        return np.asarray(self.fn(np.atleast_2d(configs)), dtype=np.complex128)


class RbmAmplitude(AmplitudeProvider):
    """RBM amplitude with theta cached across exchange moves."""

    def __init__(self, params: RbmParameters):
        self.params = params

    def log_amplitude(self, configs):
        configs = np.atleast_2d(configs)
        theta = configs @ self.params.W + self.params.b
        return configs @ self.params.a + log_cosh2(theta).sum(axis=-1)

    def _from_theta(self, configs, theta):
        return configs @ self.params.a + log_cosh2(theta).sum(axis=-1)

    def start(self, configs):
        theta = configs @ self.params.W + self.params.b
        return self._from_theta(configs, theta), [theta, 0]

    def trial(self, cache, configs, proposed, i, k):
        theta, _ = cache
        rows = np.arange(configs.shape[0])
        si = configs[rows, i][:, None]
        sk = configs[rows, k][:, None]
        W = self.params.W
        new_theta = theta - 2.0 * (si * W[i] + sk * W[k])
        return self._from_theta(proposed, new_theta), new_theta

    def commit(self, cache, candidate, accept, configs):
        theta, count = cache
        count += 1
        if count >= REFRESH_INTERVAL:
            return [configs @ self.params.W + self.params.b, 0]
        return [np.where(accept[:, None], candidate, theta), count]


# proposals and moves ------------------------------------------------------

def propose_exchange(config, rng: np.random.Generator):
    """Exchange one uniformly chosen (up, down) pair; ``None`` if polarized."""
    config = np.asarray(config)
    ups = np.flatnonzero(config > 0)
    downs = np.flatnonzero(config < 0)
    if ups.size == 0 or downs.size == 0:
        return None
    i = ups[rng.integers(ups.size)]
    k = downs[rng.integers(downs.size)]
    new = config.copy()
    new[i], new[k] = config[k], config[i]
    return new


def _exchange_sites(configs, u_up, u_down):
    """Vectorized pair choice; sorted order puts up spins first per row."""
    n_up = int((configs[0] > 0).sum())
    L = configs.shape[1]
    n_down = L - n_up
    order = np.argsort(-configs, axis=1, kind="stable")
    rows = np.arange(configs.shape[0])
    i = order[rows, np.minimum((u_up * n_up).astype(np.intp), n_up - 1)]
    k = order[rows, n_up + np.minimum((u_down * n_down).astype(np.intp), n_down - 1)]
    return i, k


@dataclass
class ChainBatch:
    configs: np.ndarray
    log_amp: np.ndarray
    cache: object = None
    accepted: int = 0
    proposed: int = 0

    @classmethod
    def start(cls, configs, provider: AmplitudeProvider) -> "ChainBatch":
        configs = np.array(configs, dtype=np.int8)
        log_amp, cache = provider.start(configs)
        return cls(configs, np.asarray(log_amp, dtype=np.complex128), cache)


def _advance(state: ChainBatch, provider: AmplitudeProvider, draws: np.ndarray) -> ChainBatch:
    configs = state.configs
    n_up = int((configs[0] > 0).sum())
    if n_up == 0 or n_up == configs.shape[1]:
        return state
    i, k = _exchange_sites(configs, draws[:, 0], draws[:, 1])
    proposed = configs.copy()
    rows = np.arange(configs.shape[0])
    proposed[rows, i] = configs[rows, k]
    proposed[rows, k] = configs[rows, i]
    new_log, candidate = provider.trial(state.cache, configs, proposed, i, k)
    with np.errstate(invalid="ignore", over="ignore"):
        delta = 2.0 * (new_log.real - state.log_amp.real)
        accept = np.where(np.isneginf(state.log_amp.real), np.isfinite(new_log.real),
                          np.log(draws[:, 2]) < delta)
    accept &= ~np.isnan(new_log.real)
    state.configs = np.where(accept[:, None], proposed, configs)
    state.log_amp = np.where(accept, new_log, state.log_amp)
    state.cache = provider.commit(state.cache, candidate, accept, state.configs)
    state.accepted += int(accept.sum())
    state.proposed += accept.size
    return state


def metropolis_step(state: ChainBatch, provider: AmplitudeProvider, rng) -> ChainBatch:
    """One exchange proposal per chain, accepted with min(1, |f'|^2 / |f|^2)."""
    draws = rng.random((state.configs.shape[0], 3))
    return _advance(state, provider, draws)


@dataclass
class SampleBatch:
    """Configurations with normalized weights; Monte Carlo weights are uniform."""

    configs: np.ndarray
    log_amp: np.ndarray
    weights: np.ndarray
    chain_index: np.ndarray | None = None
    acceptance: float = float("nan")

    def __len__(self):
        return self.configs.shape[0]

    def mean(self, values):
        values = np.asarray(values)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def subset(self, mask) -> "SampleBatch":
        w = self.weights[mask]
        chain = None if self.chain_index is None else self.chain_index[mask]
        return SampleBatch(self.configs[mask], self.log_amp[mask], w / w.sum(), chain,
                           self.acceptance)


def sample(plan: SamplerPlan, provider: AmplitudeProvider, length: int) -> SampleBatch:
    """Run ``plan.n_chains`` chains and keep every ``thinning``-th configuration."""
    rngs = [chain_rng(plan.seed, c) for c in range(plan.n_chains)]
    n_up = n_up_spins(length, plan.sector)
    base = np.array([1] * n_up + [-1] * (length - n_up), dtype=np.int8)
    state = ChainBatch.start(np.stack([r.permutation(base) for r in rngs]), provider)

    def block(n):
        return np.stack([r.random((n, 3)) for r in rngs], axis=1)

    if plan.burn_in:
        for d in block(plan.burn_in):
            _advance(state, provider, d)
    kept_c, kept_l = [], []
    for _ in range(plan.n_samples_per_chain):
        for d in block(plan.thinning):
            _advance(state, provider, d)
        kept_c.append(state.configs.copy())
        kept_l.append(state.log_amp.copy())
    # chain-major order: all samples of chain 0, then chain 1, ...
    configs = np.stack(kept_c, axis=1).reshape(-1, length)
    log_amp = np.stack(kept_l, axis=1).reshape(-1)
    n = configs.shape[0]
    chain = np.repeat(np.arange(plan.n_chains), plan.n_samples_per_chain)
    acc = state.accepted / max(state.proposed, 1)
    return SampleBatch(configs, log_amp, np.full(n, 1.0 / n), chain, acc)


def exact_distribution(configs, provider: AmplitudeProvider) -> SampleBatch:
    """Enumeration-mode 'samples': every configuration with weight |f|^2 / sum |f|^2."""
    configs = np.asarray(configs, dtype=np.int8)
    log_amp = np.asarray(provider.log_amplitude(configs), dtype=np.complex128)
    lw = 2.0 * log_amp.real
    finite = np.isfinite(lw)
    w = np.zeros(lw.shape)
    w[finite] = np.exp(lw[finite] - lw[finite].max())
    keep = w > 0
    w = w[keep]
    return SampleBatch(configs[keep], log_amp[keep], w / w.sum(), None, 1.0)


# accumulators -------------------------------------------------------------

@dataclass
class Accumulator:
    """Streaming sums of complex estimators; merge-able across chains."""

    count: int = 0
    sums: dict = field(default_factory=dict)
    abs2: dict = field(default_factory=dict)
    cross: dict = field(default_factory=dict)
    rejected: int = 0

    def add(self, values: Mapping[str, np.ndarray], pairs=()):
        """Accumulate per-sample arrays (first axis = samples)."""
        n = None
        for name, v in values.items():
            v = np.asarray(v, dtype=np.complex128)
            n = v.shape[0] if n is None else n
            self.sums[name] = self.sums.get(name, 0) + v.sum(axis=0)
            self.abs2[name] = self.abs2.get(name, 0) + (np.abs(v) ** 2).sum(axis=0)
        for p, q in pairs:
            vp = np.asarray(values[p], dtype=np.complex128)
            vq = np.asarray(values[q], dtype=np.complex128)
            self.cross[(p, q)] = self.cross.get((p, q), 0) + (vp.conj() * vq).sum(axis=0)
        self.count += n or 0
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        out = Accumulator(self.count + other.count, dict(self.sums), dict(self.abs2),
                          dict(self.cross), self.rejected + other.rejected)
        for target, source in ((out.sums, other.sums), (out.abs2, other.abs2),
                               (out.cross, other.cross)):
            for key, v in source.items():
                target[key] = target.get(key, 0) + v
        return out

    def mean(self, name):
        return self.sums[name] / self.count

    def moment(self, p, q):
        """<x_p^* x_q>."""
        return self.cross[(p, q)] / self.count

    def variance(self, name):
        m = self.mean(name)
        return np.maximum(self.abs2[name] / self.count - np.abs(m) ** 2, 0.0)

    def std_error(self, name):
        return np.sqrt(self.variance(name) / max(self.count - 1, 1))


def run_chains(plan: SamplerPlan, provider: AmplitudeProvider, estimators: Mapping[str, Callable],
               length: int, pairs=()) -> Accumulator:
    """Sample, evaluate every estimator, and merge per-chain accumulators in chain order.

    Estimators are called as ``fn(configs, log_amp)`` and return one value per
    sample. Samples with any non-finite estimate are dropped and tallied.
    """
    batch = sample(plan, provider, length)
    values = {name: np.asarray(fn(batch.configs, batch.log_amp), dtype=np.complex128)
              for name, fn in estimators.items()}
    bad = np.zeros(len(batch), dtype=bool)
    for v in values.values():
        bad |= ~np.all(np.isfinite(v.reshape(len(batch), -1)), axis=1)
    total = Accumulator()
    for c in range(plan.n_chains):
        sel = (batch.chain_index == c) & ~bad
        acc = Accumulator(rejected=int(((batch.chain_index == c) & bad).sum()))
        if sel.any():
            acc.add({k: v[sel] for k, v in values.items()}, pairs)
        total = total.merge(acc)
    if total.rejected > MAX_REJECTED_FRACTION * plan.n_samples:
        raise SamplingError(
            f"{total.rejected} of {plan.n_samples} samples produced non-finite estimates")
    if total.rejected:
        log.warning("dropped %d non-finite samples", total.rejected)
    return total
