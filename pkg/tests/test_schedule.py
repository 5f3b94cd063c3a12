import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchordiff.schedule import Schedule, lookup, make_schedule

kinds = st.sampled_from(["linear", "cosine"])
steps = st.integers(1, 200)
etas = st.floats(1e-9, 1e-6)


def test_single_step_schedule():
    s = make_schedule("linear", 1, 1e-6)
    assert s.alpha_bar[0] == 1e-6
    assert s.beta_bar[0] == math.sqrt(1 - 1e-6)


def test_cosine_default_terminal_and_monotone():
    s = make_schedule("cosine", 50, 1e-6)
    assert s.alpha_bar[-1] == 1e-6
    assert np.all(np.diff(s.alpha_bar) < 0)


@given(kinds, steps, etas)
def test_invariants(kind, T, eta):
    s = make_schedule(kind, T, eta)
    ab, bb = s.alpha_bar, s.beta_bar
    assert ab[-1] == eta
    assert bb[-1] == math.sqrt(1 - eta)
    # 0.9999995 is sqrt(1 - 1e-6) rounded; compare against the exact value
    assert bb[-1] >= math.sqrt(1 - 1e-6) > 0.9999995 - 1e-12
    assert np.all(np.diff(ab) < 0)
    np.testing.assert_allclose(ab + bb**2, 1.0, rtol=0, atol=1e-15)
    prev = np.concatenate(([1.0], ab[:-1]))
    np.testing.assert_allclose(ab / prev, s.alpha, rtol=1e-10)
    assert np.all((s.alpha > 0) & (s.alpha <= 1))


@given(kinds, st.integers(2, 200))
def test_first_step_unchanged_by_rescale(kind, T):
    raw = make_schedule(kind, T, 1e-6)
    if kind == "linear":
        beta1 = 1000.0 / T * 1e-4
        expected = 1.0 - min(beta1, 0.999)
    else:
        f = lambda u: math.cos((u / T + 0.008) / 1.008 * math.pi / 2) ** 2  # noqa: E731
        expected = f(1) / f(0)
    assert raw.alpha_bar[0] == pytest.approx(expected, rel=1e-12)


def test_lookup_conventions():
    s = make_schedule("linear", 50, 1e-6)
    assert lookup(s, 0) == (1.0, 1.0, 0.0)
    a_T, ab_T, bb_T = lookup(s, 50)
    assert ab_T == 1e-6 and bb_T == math.sqrt(1 - 1e-6) and a_T == s.alpha[-1]
    betas = np.linspace(20 * 1e-4, 20 * 0.02, 50)
    assert lookup(s, 1)[1] == pytest.approx(1 - betas[0], rel=1e-12)
    assert s.lookup(1) == lookup(s, 1)


@pytest.mark.parametrize("t", [-1, 51, 1.5, True])
def test_lookup_rejects_bad_t(t):
    with pytest.raises(ValueError):
        lookup(make_schedule("cosine", 50), t)


@pytest.mark.parametrize("eta", [0.0, -1e-7, 2e-6, 0.5])
def test_eta_out_of_range(eta):
    with pytest.raises(ValueError, match="eta"):
        make_schedule("cosine", 50, eta)


def test_eta_ceiling_can_be_lifted_for_diagnostics():
    s = make_schedule("cosine", 50, 0.5, validate=False)
    assert s.alpha_bar[-1] == 0.5


def test_unknown_kind_and_bad_T():
    with pytest.raises(ValueError):
        make_schedule("sigmoid", 10)
    with pytest.raises(ValueError):
        make_schedule("cosine", 0)


def test_json_round_trip():
    s = make_schedule("linear", 30, 5e-7)
    back = Schedule.from_json(s.to_json())
    assert back.kind == "linear" and back.T == 30 and back.eta == 5e-7
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)


def test_tables_are_read_only():
    s = make_schedule()
    with pytest.raises(ValueError):
        s.alpha_bar[0] = 0.5
