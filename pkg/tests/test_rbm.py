import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbmspectra.rbm import (REFRESH_INTERVAL, ChainState, DimensionError, RbmParameters,
                            flat_index, flip_update, init_random, load_checkpoint, log_cosh2,
                            log_derivatives, log_derivatives_batch, log_psi, log_psi_batch,
                            n_params, save_checkpoint, weighted_row_derivatives)


def brute_force_amplitude(params, config):
    """Sum over all hidden states of exp(a.s + b.h + s W h), h in {-1, +1}^M."""
    total = 0j
    for h in itertools.product((-1, 1), repeat=params.n_hidden):
        h = np.array(h)
        total += np.exp(config @ params.a + params.b @ h + config @ params.W @ h)
    return total


def test_flat_layout_roundtrip():
    p = init_random(3, 5, 0.1, seed=1)
    assert p.n_params == n_params(3, 5) == 3 + 5 + 15
    alpha = p.flat()
    assert alpha[flat_index(3, 5, "a", 2)] == p.a[2]
    assert alpha[flat_index(3, 5, "b", 4)] == p.b[4]
    assert alpha[flat_index(3, 5, "W", 1, 3)] == p.W[1, 3]
    assert RbmParameters.from_flat(3, 5, alpha) == p


def test_shape_errors():
    with pytest.raises(DimensionError):
        RbmParameters(np.zeros(3), np.zeros(2), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        RbmParameters.from_flat(3, 2, np.zeros(5))
    p = init_random(3, 2, 0.1, seed=0)
    with pytest.raises(DimensionError):
        log_psi(p, np.ones(4))


def test_init_random_is_deterministic_and_scaled():
    p, q = init_random(10, 40, 0.01, seed=7), init_random(10, 40, 0.01, seed=7)
    assert p == q
    assert p != init_random(10, 40, 0.01, seed=8)
    alpha = p.flat()
    assert abs(alpha.real.std() - 0.01) < 0.001
    assert abs(alpha.imag.std() - 0.01) < 0.001


def test_amplitude_matches_hidden_sum():
    p = init_random(4, 3, 0.4, seed=3)
    for config in itertools.product((-1, 1), repeat=4):
        config = np.array(config)
        expected = np.log(brute_force_amplitude(p, config))
        got = log_psi(p, config)
        assert np.exp(got) == pytest.approx(np.exp(expected), rel=1e-12)


def test_zero_parameters_give_uniform_amplitude():
    p = RbmParameters(np.zeros(4), np.zeros(2), np.zeros((4, 2)))
    vals = log_psi_batch(p, np.array(list(itertools.product((-1, 1), repeat=4))))
    assert np.allclose(vals, 2 * np.log(2.0))


def test_log_cosh_stable_for_large_arguments():
    theta = np.array([800 + 0.3j, -800 - 2j, 1e-3 + 1e-3j, 0.2 - 3j])
    got = log_cosh2(theta)
    assert np.all(np.isfinite(got))
    small = theta[2:]
    assert np.allclose(np.exp(got[2:]), 2 * np.cosh(small), rtol=1e-12)
    # large |Re theta|: log(2 cosh t) -> |t| with sign-matched imaginary part
    assert got[0] == pytest.approx(800 + 0.3j, rel=1e-14)
    assert got[1] == pytest.approx(800 + 2j, rel=1e-14)


def test_log_derivatives_match_finite_differences():
    p = init_random(5, 4, 0.3, seed=5)
    config = np.array([1, -1, -1, 1, 1])
    O = log_derivatives(p, config)
    h = 1e-6
    for k in range(p.n_params):
        e = np.zeros(p.n_params, dtype=complex)
        e[k] = h
        fd = (log_psi(p.shifted(e), config) - log_psi(p.shifted(-e), config)) / (2 * h)
        assert O[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_weighted_row_derivatives_equals_explicit_sum():
    p = init_random(4, 3, 0.3, seed=2)
    rng = np.random.default_rng(0)
    neighbors = rng.choice([-1, 1], size=(5, 3, 4))
    coeffs = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
    got = weighted_row_derivatives(p, neighbors, coeffs)
    expected = np.stack([sum(coeffs[b, k] * log_derivatives(p, neighbors[b, k]) for k in range(3))
                         for b in range(5)])
    assert np.allclose(got, expected, atol=1e-13)


def test_single_flip_matches_fresh_recomputation():
    p = init_random(6, 12, 0.2, seed=4)
    state = ChainState.fresh(p, [1, -1, 1, -1, 1, -1])
    new = flip_update(state, p, [2])
    assert new.log_amp == pytest.approx(log_psi(p, new.config), abs=1e-10)
    assert state.config[2] == 1  # original untouched


@settings(max_examples=20, deadline=None)
@given(st.lists(st.lists(st.integers(0, 7), min_size=1, max_size=3), min_size=1, max_size=200),
       st.integers(0, 2**31 - 1))
def test_random_walk_stays_consistent(moves, seed):
    p = init_random(8, 16, 0.5, seed=seed)
    state = ChainState.fresh(p, np.random.default_rng(seed).choice([-1, 1], 8))
    for flips in moves:
        state = flip_update(state, p, flips)
    fresh = ChainState.fresh(p, state.config)
    assert np.allclose(state.theta, fresh.theta, atol=1e-10)
    assert abs(np.exp(state.log_amp - fresh.log_amp) - 1) < 1e-8


def test_periodic_refresh():
    p = init_random(4, 4, 0.3, seed=9)
    state = ChainState.fresh(p, [1, 1, -1, -1])
    state = ChainState(state.config, state.theta + 1.0, state.log_amp, REFRESH_INTERVAL - 1)
    refreshed = flip_update(state, p, [0])
    assert refreshed.updates_since_refresh == 0
    assert np.allclose(refreshed.theta, ChainState.fresh(p, refreshed.config).theta)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    p = init_random(6, 24, 0.1, seed=3)
    path = tmp_path / "gs.rbm"
    save_checkpoint(path, p, sector=0, e0=-2.5)
    q, sector, e0 = load_checkpoint(path)
    assert q == p and sector == 0 and e0 == -2.5
    save_checkpoint(tmp_path / "again.rbm", q, 0, e0)
    assert (tmp_path / "again.rbm").read_bytes() == path.read_bytes()
    save_checkpoint(path, p)
    assert load_checkpoint(path)[2] is None


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "bad.rbm"
    path.write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    p = init_random(2, 2, 0.1, seed=0)
    save_checkpoint(path, p)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="payload"):
        load_checkpoint(path)


def test_batch_shapes():
    p = init_random(4, 3, 0.1, seed=0)
    configs = np.ones((7, 4))
    assert log_psi_batch(p, configs).shape == (7,)
    assert log_derivatives_batch(p, configs).shape == (7, p.n_params)
