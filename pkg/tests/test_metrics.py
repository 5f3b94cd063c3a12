import math

import numpy as np
import pytest
from helpers import random_mask
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import ci_bf, dice_bf, ged_bf, hd95_bf, iou_bf, sncc_bf, surface_points_bf

from anchordiff.metrics import (
    EmptyMaskError,
    UndefinedCorrelationError,
    ci_components,
    ci_score,
    dice,
    ensemble,
    evaluate,
    ged,
    hd95,
    iou,
    sncc,
    surface,
)
from anchordiff.volume import BinaryMask, GridMismatchError, RaterSet

masks_st = arrays(bool, st.tuples(*[st.integers(2, 6)] * 3))


def _block(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return BinaryMask(m)


# -------------------------------------------------------------------- dice


def test_dice_examples():
    a = _block((4, 4, 4), (1, 1, 1), (3, 3, 3))
    assert dice(a, a) == 1.0
    assert dice(a, _block((4, 4, 4), (0, 0, 0), (1, 1, 1))) == 0.0
    shifted = _block((4, 4, 4), (1, 1, 2), (3, 3, 4))
    assert a.count == shifted.count == 8
    assert dice(a, shifted) == 0.5


def test_dice_both_empty_is_one():
    e = BinaryMask(np.zeros((2, 2, 2), bool))
    assert dice(e, e) == 1.0 and iou(e, e) == 1.0


@given(masks_st, st.data())
def test_dice_iou_properties(a, data):
    b = data.draw(arrays(bool, a.shape))
    ma, mb = BinaryMask(a), BinaryMask(b)
    d, j = dice(ma, mb), iou(ma, mb)
    assert d == dice(mb, ma) and 0 <= d <= 1
    assert d == pytest.approx(dice_bf(a, b), abs=1e-12)
    assert j == pytest.approx(iou_bf(a, b), abs=1e-12)
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


def test_grid_checked():
    with pytest.raises(GridMismatchError):
        dice(BinaryMask(np.ones((2, 2, 2))), BinaryMask(np.ones((2, 2, 3))))


# -------------------------------------------------------------------- hd95


def test_hd95_identical_is_zero(rng):
    m = random_mask(rng, (6, 6, 6), 0.5)
    assert hd95(m, m) == 0.0


def test_hd95_single_voxels():
    a, b = np.zeros((1, 1, 6), bool), np.zeros((1, 1, 6), bool)
    a[0, 0, 1] = b[0, 0, 4] = True
    assert hd95(BinaryMask(a), BinaryMask(b)) == 3.0


def test_hd95_respects_spacing():
    a, b = np.zeros((5, 1, 1), bool), np.zeros((5, 1, 1), bool)
    a[0, 0, 0] = b[4, 0, 0] = True
    assert hd95(BinaryMask(a, (2.5, 1, 1)), BinaryMask(b, (2.5, 1, 1))) == 10.0


def test_hd95_empty_raises():
    e = BinaryMask(np.zeros((3, 3, 3), bool))
    with pytest.raises(EmptyMaskError):
        hd95(e, BinaryMask(np.ones((3, 3, 3), bool)))


def test_surface_matches_bruteforce(rng):
    for _ in range(10):
        m = random_mask(rng, tuple(rng.integers(2, 8, 3)), 0.6)
        got = set(zip(*np.nonzero(surface(m))))
        assert got == set(surface_points_bf(m.data))


def test_hd95_random_12_cube_matches_bruteforce(rng):
    for _ in range(3):
        sp = tuple(rng.uniform(0.5, 2.0, 3))
        a, b = random_mask(rng, (12, 12, 12), 0.3, sp), random_mask(rng, (12, 12, 12), 0.3, sp)
        assert hd95(a, b) == pytest.approx(hd95_bf(a.data, b.data, sp), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(masks_st, st.data())
def test_hd95_symmetric_and_nonnegative(a, data):
    b = data.draw(arrays(bool, a.shape))
    if not a.any() or not b.any():
        return
    ma, mb = BinaryMask(a), BinaryMask(b)
    h = hd95(ma, mb)
    assert h >= 0 and h == pytest.approx(hd95(mb, ma), abs=1e-12)
    assert h == pytest.approx(hd95_bf(a, b), abs=1e-9)


# --------------------------------------------------------------------- ged


def test_ged_examples():
    a = _block((4, 4, 4), (0, 0, 0), (2, 2, 2))
    b = _block((4, 4, 4), (2, 2, 2), (4, 4, 4))
    assert ged([a, b], RaterSet([a, b])) == 0.0
    assert ged([a], RaterSet([b])) == pytest.approx(math.sqrt(2))
    # d(A, B') = 0.5 for two 8-voxel blocks overlapping in 4 voxels
    c = _block((4, 4, 4), (0, 0, 0), (2, 2, 4))
    assert 1 - iou(a, c) == 0.5
    assert ged([a, a], RaterSet([a, c])) == pytest.approx(0.5, abs=1e-12)


def test_ged_empty_pairs_have_zero_distance():
    e = BinaryMask(np.zeros((3, 3, 3), bool))
    assert ged([e, e], RaterSet([e])) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ged_invariances(seed):
    rng = np.random.default_rng(seed)
    samples = [random_mask(rng, (4, 4, 4), rng.uniform(0.1, 0.7)) for _ in range(rng.integers(1, 5))]
    raters = [random_mask(rng, (4, 4, 4), rng.uniform(0.1, 0.7)) for _ in range(rng.integers(1, 4))]
    g = ged(samples, RaterSet(raters))
    assert g >= 0
    assert g == pytest.approx(ged_bf([m.data for m in samples], [m.data for m in raters]), abs=1e-9)
    perm = rng.permutation(len(samples))
    assert ged([samples[i] for i in perm], RaterSet(raters)) == pytest.approx(g, abs=1e-12)
    assert ged(samples, RaterSet(raters[::-1])) == pytest.approx(g, abs=1e-12)


def test_ged_weighted_matches_bruteforce(rng):
    samples = [random_mask(rng, (5, 5, 5)) for _ in range(3)]
    raters = [random_mask(rng, (5, 5, 5)) for _ in range(3)]
    w = [0.2, 0.3, 0.5]
    assert ged(samples, RaterSet(raters, w)) == pytest.approx(
        ged_bf([m.data for m in samples], [m.data for m in raters], w), abs=1e-12
    )


# ---------------------------------------------------------------------- ci


def test_ci_identical_sets_is_one(rng):
    masks = [random_mask(rng, (5, 5, 5), p) for p in (0.2, 0.4, 0.6)]
    assert ci_components(masks, RaterSet(masks)) == (1.0, 1.0, 1.0)
    assert ci_score(masks, RaterSet(masks)) == pytest.approx(1.0)


def test_ci_empty_samples_is_zero(rng):
    e = BinaryMask(np.zeros((5, 5, 5), bool))
    assert ci_score([e, e], RaterSet([random_mask(rng, (5, 5, 5))])) == 0.0


def test_ci_hand_computed():
    a = _block((8, 8, 8), (0, 0, 0), (4, 4, 4))  # 64 voxels
    b = _block((8, 8, 8), (2, 2, 2), (6, 6, 6))  # 64 voxels, overlap 8
    raters = RaterSet([a, b])
    samples = [a, a]
    # union_r = 120, covered by union_s = 64 -> S_c = 64/120
    # best Dice per rater: 1 for a, 2*8/128 for b -> D_max = (1 + 0.125)/2
    # both sets have zero count variance -> D_a = 1
    s_c, d_max, d_a = 64 / 120, 0.5625, 1.0
    assert ci_components(samples, raters) == pytest.approx((s_c, d_max, d_a))
    assert ci_score(samples, raters) == pytest.approx(3 / (1 / s_c + 1 / d_max + 1 / d_a))
    c = _block((8, 8, 8), (0, 0, 0), (2, 2, 2))  # 8 voxels: sample variance 784 vs 0
    assert ci_components([a, c], raters)[2] == pytest.approx(1 - 784 / 784)


def test_ci_bounds_and_bruteforce(rng):
    for _ in range(20):
        samples = [random_mask(rng, (5, 5, 5), rng.uniform(0.05, 0.6)) for _ in range(rng.integers(1, 5))]
        raters = [random_mask(rng, (5, 5, 5), rng.uniform(0.05, 0.6)) for _ in range(rng.integers(1, 4))]
        c = ci_score(samples, RaterSet(raters))
        assert 0 <= c <= 1
        assert c == pytest.approx(ci_bf([m.data for m in samples], [m.data for m in raters]), abs=1e-12)


# -------------------------------------------------------------------- sncc


def test_sncc_self_and_anti(rng):
    masks = [random_mask(rng, (6, 6, 6), p) for p in (0.3, 0.5)]
    assert sncc(masks, RaterSet(masks)) == pytest.approx(1.0, abs=1e-12)
    comp = [BinaryMask(~m.data) for m in masks]
    assert sncc(comp, RaterSet(masks)) == pytest.approx(-1.0, abs=1e-12)


def test_sncc_random_matches_two_pass(rng):
    for _ in range(20):
        samples = [random_mask(rng, (8, 8, 8)) for _ in range(4)]
        raters = [random_mask(rng, (8, 8, 8)) for _ in range(3)]
        w = rng.uniform(0.1, 1, 3)
        got = sncc(samples, RaterSet(raters, w))
        ref = sncc_bf([m.data for m in samples], [m.data for m in raters], list(w))
        assert abs(got - ref) <= 1e-10 and -1 <= got <= 1


def test_sncc_undefined_cases(rng):
    m = random_mask(rng, (4, 4, 4))
    with pytest.raises(UndefinedCorrelationError):
        sncc([m], RaterSet([m, m]))
    with pytest.raises(UndefinedCorrelationError):
        full = BinaryMask(np.ones((4, 4, 4), bool))
        sncc([full, full], RaterSet([m, random_mask(rng, (4, 4, 4))]))


# ---------------------------------------------------------------- evaluate


def test_ensemble_is_strict_majority():
    a = _block((2, 2, 2), (0, 0, 0), (1, 1, 1))
    e = BinaryMask(np.zeros((2, 2, 2), bool))
    assert not ensemble([a, e]).data.any()
    assert ensemble([a, a, e]) == a


def test_evaluate_single_sample_leaves_uncertainty_missing(rng):
    masks = [random_mask(rng, (6, 6, 6), 0.4) for _ in range(2)]
    rep = evaluate(masks[:1], RaterSet(masks))
    assert rep.n_samples == 1
    assert math.isnan(rep.ged) and math.isnan(rep.ci) and math.isnan(rep.sncc)
    assert rep.dice_mean == pytest.approx(np.mean([dice(masks[0], m) for m in masks]))


def test_evaluate_uses_majority_vote(rng):
    raters = RaterSet([random_mask(rng, (6, 6, 6), 0.4) for _ in range(3)], [1, 2, 3])
    samples = [random_mask(rng, (6, 6, 6), 0.5) for _ in range(5)]
    rep = evaluate(samples, raters)
    ens = ensemble(samples)
    assert rep.dice_mean == pytest.approx(float(np.dot(raters.weights, [dice(ens, r) for r in raters.masks])))
    assert rep.hd95_mm == pytest.approx(float(np.dot(raters.weights, [hd95(ens, r) for r in raters.masks])))
    assert rep.ged == ged(samples, raters)
    assert rep.ci == ci_score(samples, raters)
    assert rep.sncc == sncc(samples, raters)


def test_evaluate_empty_ensemble_reports_missing_hd95(rng):
    e = BinaryMask(np.zeros((5, 5, 5), bool))
    rep = evaluate([e, e], RaterSet([random_mask(rng, (5, 5, 5))]))
    assert math.isnan(rep.hd95_mm) and rep.dice_mean == 0.0
    assert math.isnan(rep.sncc)
