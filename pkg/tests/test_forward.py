import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchordiff.forward import (
    check_forward_process,
    ddpm_marginal_array,
    forward_expectation,
    forward_marginal,
    forward_marginal_array,
    forward_step,
    forward_step_array,
    run_chains,
)
from anchordiff.schedule import lookup, make_schedule
from anchordiff.volume import GridMismatchError, Volume

S = make_schedule("cosine", 50, 1e-6)


def _vol(rng, shape=(4, 4, 4), lo=-1, hi=1):
    return Volume(rng.uniform(lo, hi, shape))


def test_unit_alpha_is_identity(rng):
    y = rng.uniform(-1, 1, (3, 3, 3))
    out = forward_step_array(y, rng.uniform(-1, 1, y.shape), 1.0, rng.standard_normal(y.shape))
    np.testing.assert_array_equal(out, y)


def test_constant_input_keeps_its_mean():
    c, t = 0.3, 10
    alpha = lookup(S, t)[0]
    rng = np.random.default_rng(0)
    draws = np.array([
        forward_step(Volume(np.full((2, 2, 2), c)), Volume(np.full((2, 2, 2), c)), S, t, rng).data for _ in range(10_000)
    ])
    sigma = math.sqrt(1 - alpha)
    assert np.all(np.abs(draws.mean(axis=0) - c) <= 3 * sigma / 100)


def test_forward_step_reproducible(rng):
    y, yh = _vol(rng, (2, 2, 2)), _vol(rng, (2, 2, 2))
    a = forward_step(y, yh, S, 5, np.random.default_rng(7))
    b = forward_step(y, yh, S, 5, np.random.default_rng(7))
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_step_rejects_bad_input(rng):
    with pytest.raises(GridMismatchError):
        forward_step(_vol(rng), _vol(rng, (4, 4, 3)), S, 1, rng)
    with pytest.raises(ValueError):
        forward_step(_vol(rng), _vol(rng), S, 0, rng)
    with pytest.raises(ValueError):
        forward_step(_vol(rng), _vol(rng), S, 51, rng)


def test_marginal_at_zero_returns_input(rng):
    y0, yh, eps = _vol(rng), _vol(rng), Volume(rng.standard_normal((4, 4, 4)))
    np.testing.assert_array_equal(forward_marginal(y0, yh, S, 0, eps).data, y0.data)


def test_marginal_terminal_sits_on_prior(rng):
    y0, yh = _vol(rng), _vol(rng)
    out = forward_marginal(y0, yh, S, S.T, Volume(np.zeros((4, 4, 4))))
    bound = math.sqrt(S.eta) * np.abs(y0.data - yh.data).max()
    assert np.abs(out.data - yh.data).max() <= bound + 1e-15


@settings(max_examples=50)
@given(st.integers(0, 50), st.integers(0, 2**32 - 1))
def test_zero_prior_is_ddpm_bitwise(t, seed):
    rng = np.random.default_rng(seed)
    y0 = rng.uniform(-1, 1, (3, 3, 3))
    eps = rng.standard_normal(y0.shape)
    _, ab, bb = lookup(S, t)
    a = forward_marginal_array(y0, np.zeros_like(y0), ab, bb, eps)
    b = ddpm_marginal_array(y0, ab, bb, eps)
    assert a.tobytes() == b.tobytes()


def test_expectation_examples(rng):
    y0, yh = _vol(rng), _vol(rng)
    np.testing.assert_array_equal(forward_expectation(y0, yh, S, 0).data, y0.data)
    for t in (1, 25, 50):
        np.testing.assert_allclose(forward_expectation(y0, y0, S, t).data, y0.data, atol=1e-15)
    end = forward_expectation(y0, yh, S, S.T).data
    assert np.abs(end - yh.data).max() <= math.sqrt(S.eta) * np.abs(y0.data - yh.data).max() + 1e-15


def test_expectation_is_noise_free_marginal(rng):
    y0, yh = _vol(rng), _vol(rng)
    zero = Volume(np.zeros((4, 4, 4)))
    for t in (1, 17, 50):
        np.testing.assert_array_equal(forward_expectation(y0, yh, S, t).data, forward_marginal(y0, yh, S, t, zero).data)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_chain_matches_marginal(kind, rng):
    s = make_schedule(kind, 50)
    y0 = np.where(rng.random((4, 4, 4)) < 0.5, 1.0, -1.0)
    yh = rng.uniform(-1, 1, y0.shape)
    rep = check_forward_process(y0, yh, s, n_chains=10_000, seed=3)
    assert rep["pass"], rep
    assert rep["timesteps"] == [1, 25, 50]


def test_variance_does_not_depend_on_prior(rng):
    y0 = np.where(rng.random((4, 4, 4)) < 0.5, 1.0, -1.0)
    t = 20
    a = run_chains(y0, np.zeros_like(y0), S, t, 4000, np.random.default_rng(5))
    b = run_chains(y0, rng.uniform(-1, 1, y0.shape), S, t, 4000, np.random.default_rng(5))
    np.testing.assert_allclose(a.var(axis=0), b.var(axis=0), rtol=1e-9)
    bb2 = lookup(S, t)[2] ** 2
    assert np.max(np.abs(a.var(axis=0, ddof=1) / bb2 - 1)) <= 0.1


def test_large_eta_fails_terminal_check(rng):
    s = make_schedule("cosine", 50, 0.5, validate=False)
    y0 = np.ones((4, 4, 4))
    rep = check_forward_process(y0, -np.ones_like(y0), s, n_chains=2000, seed=0)
    assert not rep["checks"]["terminal"]
    assert not rep["pass"]


def test_single_step_schedule_passes(rng):
    s = make_schedule("cosine", 1)
    y0 = np.where(rng.random((4, 4, 4)) < 0.5, 1.0, -1.0)
    rep = check_forward_process(y0, rng.uniform(-1, 1, y0.shape), s, n_chains=10_000, seed=1)
    assert rep["pass"], rep
    assert rep["timesteps"] == [1]
