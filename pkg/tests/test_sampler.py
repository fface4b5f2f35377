import itertools

import numpy as np
import pytest

from rbmspectra.ed import DenseAmplitude, SectorBasis, exact_ground_state
from rbmspectra.hamiltonian import ModelSpec, local_energy_batch
from rbmspectra.rbm import init_random, log_psi_batch
from rbmspectra.sampler import (Accumulator, ChainBatch, FunctionAmplitude, RbmAmplitude,
                                SamplerPlan, SamplingError, chain_rng, exact_distribution,
                                metropolis_step, n_up_spins, propose_exchange, run_chains,
                                sample)


def test_plan_validation():
    with pytest.raises(ValueError):
        SamplerPlan(n_chains=0)
    with pytest.raises(ValueError):
        SamplerPlan(thinning=0)
    plan = SamplerPlan(4, 10, 2, 5, seed=1)
    assert plan.n_samples == 40
    assert plan.with_seed(3) == plan.with_seed(3)
    assert plan.with_seed(3).seed != plan.with_seed(4).seed
    with pytest.raises(ValueError):
        n_up_spins(5, 0.0)


def test_proposal_conserves_sector_and_handles_polarized():
    rng = np.random.default_rng(0)
    config = np.array([1, 1, -1, -1, 1, -1])
    for _ in range(100):
        new = propose_exchange(config, rng)
        assert new.sum() == config.sum()
        assert np.count_nonzero(new != config) == 2
    assert propose_exchange(np.ones(4), rng) is None
    assert propose_exchange(-np.ones(4), rng) is None


def test_polarized_chains_do_not_move():
    provider = RbmAmplitude(init_random(4, 2, 0.1, seed=0))
    state = ChainBatch.start(np.ones((3, 4)), provider)
    state = metropolis_step(state, provider, np.random.default_rng(0))
    assert np.all(state.configs == 1)


def test_acceptance_ratio_satisfies_detailed_balance():
    # symmetric proposal: w(s -> s') P(s) == w(s' -> s) P(s')
    p = init_random(6, 6, 0.5, seed=2)
    basis = SectorBasis.build(6, 0.0)
    logp = 2 * log_psi_batch(p, basis.configs).real
    for a, b in itertools.combinations(range(len(basis)), 2):
        if np.count_nonzero(basis.configs[a] != basis.configs[b]) != 2:
            continue
        w_ab = min(1.0, np.exp(logp[b] - logp[a]))
        w_ba = min(1.0, np.exp(logp[a] - logp[b]))
        assert w_ab * np.exp(logp[a]) == pytest.approx(w_ba * np.exp(logp[b]), rel=1e-12)


def test_samples_stay_in_sector_and_match_distribution():
    p = init_random(6, 6, 0.6, seed=5)
    plan = SamplerPlan(8, 2500, 20, 2000, seed=5)
    batch = sample(plan, RbmAmplitude(p), 6)
    assert len(batch) == plan.n_samples
    assert np.all(batch.configs.sum(axis=1) == 0)
    basis = SectorBasis.build(6, 0.0)
    exact = exact_distribution(basis.configs, RbmAmplitude(p))
    counts = np.bincount(basis.index(batch.configs), minlength=len(basis)) / len(batch)
    assert np.abs(counts - exact.weights).max() < 0.01
    assert np.allclose(batch.log_amp, log_psi_batch(p, batch.configs))


def test_incremental_cache_matches_generic_provider():
    p = init_random(8, 8, 0.4, seed=1)
    plan = SamplerPlan(3, 50, 2, 10, seed=9)
    fast = sample(plan, RbmAmplitude(p), 8)
    slow = sample(plan, FunctionAmplitude(lambda c: log_psi_batch(p, c)), 8)
    assert np.array_equal(fast.configs, slow.configs)


def test_determinism_and_chain_independence():
    p = init_random(6, 6, 0.3, seed=1)
    a = sample(SamplerPlan(4, 20, 2, 10, seed=3), RbmAmplitude(p), 6)
    b = sample(SamplerPlan(4, 20, 2, 10, seed=3), RbmAmplitude(p), 6)
    assert np.array_equal(a.configs, b.configs)
    # chain c's stream does not depend on how many other chains run alongside it
    c = sample(SamplerPlan(2, 20, 2, 10, seed=3), RbmAmplitude(p), 6)
    assert np.array_equal(c.configs, a.configs[: len(c)])
    assert chain_rng(3, 1).random() == chain_rng(3, 1).random()


def test_sampled_energy_of_exact_ground_state():
    model = ModelSpec(8)
    gs = exact_ground_state(model)
    provider = DenseAmplitude(gs.basis, gs.vector)
    acc = run_chains(SamplerPlan(8, 500, 4, 100, seed=2), provider,
                     {"e": lambda c, l: local_energy_batch(model, provider, c, l)}, 8)
    assert abs(acc.mean("e") - gs.energy) < max(3 * acc.std_error("e"), 1e-10)


def test_many_chains_agree_with_one_long_chain():
    model = ModelSpec(6)
    p = init_random(6, 6, 0.5, seed=7)
    provider = RbmAmplitude(p)
    est = {"e": lambda c, l: local_energy_batch(model, provider, c, l)}
    four = run_chains(SamplerPlan(4, 1000, 3, 100, seed=1), provider, est, 6)
    one = run_chains(SamplerPlan(1, 4000, 3, 100, seed=2), provider, est, 6)
    combined = np.hypot(four.std_error("e"), one.std_error("e"))
    assert abs(four.mean("e") - one.mean("e")) < 5 * combined


def test_accumulator_merge_equals_concatenation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 3)) + 1j * rng.standard_normal((50, 3))
    y = rng.standard_normal((50, 3)) + 1j * rng.standard_normal((50, 3))
    whole = Accumulator().add({"x": x, "y": y}, pairs=[("x", "y")])
    parts = [Accumulator().add({"x": x[s], "y": y[s]}, pairs=[("x", "y")])
             for s in (slice(0, 10), slice(10, 33), slice(33, 50))]
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[2].merge(parts[0].merge(parts[1]))
    for acc in (left, right):
        assert acc.count == 50
        assert np.allclose(acc.mean("x"), whole.mean("x"), rtol=1e-12)
        assert np.allclose(acc.moment("x", "y"), whole.moment("x", "y"), rtol=1e-12)
        assert np.allclose(acc.variance("y"), whole.variance("y"), rtol=1e-12)


def test_non_finite_estimates_are_tallied():
    provider = RbmAmplitude(init_random(4, 2, 0.1, seed=0))
    plan = SamplerPlan(2, 50, 1, 5, seed=0)

    def sometimes_bad(c, l):
        out = np.ones(len(c))
        out[0] = np.nan
        return out
    with pytest.raises(SamplingError):
        run_chains(plan, provider, {"v": sometimes_bad}, 4)
    big = SamplerPlan(2, 1000, 1, 5, seed=0)
    acc = run_chains(big, provider, {"v": sometimes_bad}, 4)
    assert acc.rejected == 1 and acc.mean("v") == pytest.approx(1)


def test_exact_distribution_weights():
    p = init_random(4, 3, 0.5, seed=0)
    basis = SectorBasis.build(4, 0.0)
    batch = exact_distribution(basis.configs, RbmAmplitude(p))
    w = np.abs(np.exp(log_psi_batch(p, basis.configs))) ** 2
    assert np.allclose(batch.weights, w / w.sum())
