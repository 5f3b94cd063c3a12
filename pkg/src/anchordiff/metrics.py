"""Accuracy and multi-rater uncertainty metrics on binary masks.

Accuracy (Dice, HD95) compares masks pairwise.  The set-level scores
compare a list of sampled masks against a weighted :class:`RaterSet`:

* GED  - generalized energy distance with ``d = 1 - IoU``
* CI   - harmonic combination of combined sensitivity, best-match Dice and
         voxel-count diversity agreement
* SNCC - Pearson correlation of the two mean-indicator uncertainty maps
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, RaterSet, check_same_grid

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class EmptyMaskError(ValueError):
    """A surface metric was asked for an empty mask."""


class UndefinedCorrelationError(ValueError):
    """An uncertainty map is constant, so its correlation is undefined."""


@dataclass
class MetricReport:
    n_samples: int
    dice_mean: float
    hd95_mm: float
    ged: float = math.nan
    ci: float = math.nan
    sncc: float = math.nan

    def as_dict(self):
        return asdict(self)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    check_same_grid(a, b)
    sa, sb = int(a.data.sum()), int(b.data.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.data, b.data).sum()) / (sa + sb)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    check_same_grid(a, b)
    union = int(np.logical_or(a.data, b.data).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a.data, b.data).sum()) / union


def surface(mask: BinaryMask) -> np.ndarray:
    """Foreground voxels with a 6-neighbour outside the mask (grid exterior counts as outside)."""
    fg = mask.data
    return fg & ~ndimage.binary_erosion(fg, structure=SIX_CONNECTED, border_value=0)


def surface_distances(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Pooled distances (mm) from each surface voxel of one mask to the other's surface."""
    check_same_grid(a, b)
    if not a.data.any() or not b.data.any():
        raise EmptyMaskError("surface distance needs two non-empty masks")
    sa, sb = surface(a), surface(b)
    dt_b = ndimage.distance_transform_edt(~sb, sampling=a.spacing)
    dt_a = ndimage.distance_transform_edt(~sa, sampling=a.spacing)
    return np.concatenate([dt_b[sa], dt_a[sb]])


def hd95(a: BinaryMask, b: BinaryMask) -> float:
    """95th percentile (linear interpolation) of pooled symmetric surface distances."""
    return float(np.percentile(surface_distances(a, b), 95))


def _pairwise(fn, xs, ys) -> np.ndarray:
    return np.array([[fn(x, y) for y in ys] for x in xs])


def iou_distance_matrices(samples, raters: RaterSet):
    def d(x, y):
        return 1.0 - iou(x, y)

    return _pairwise(d, samples, raters.masks), _pairwise(d, samples, samples), _pairwise(d, raters.masks, raters.masks)


def ged(samples, raters: RaterSet) -> float:
    """Generalized energy distance; expectations are exhaustive (weighted) means."""
    samples = list(samples)
    if not samples:
        raise ValueError("GED needs at least one sample")
    check_same_grid(*samples, *raters.masks)
    w = raters.weights
    d_sy, d_ss, d_yy = iou_distance_matrices(samples, raters)
    cross = float(np.mean(d_sy @ w))
    within_s = float(np.mean(d_ss))
    within_y = float(w @ d_yy @ w)
    return math.sqrt(max(2.0 * cross - within_s - within_y, 0.0))


def _weighted_var(values, weights) -> float:
    values = np.asarray(values, np.float64)
    mean = float(np.dot(weights, values))
    return float(np.dot(weights, (values - mean) ** 2))


def ci_components(samples, raters: RaterSet) -> tuple[float, float, float]:
    """``(combined_sensitivity, max_dice, diversity_agreement)``."""
    samples = list(samples)
    check_same_grid(*samples, *raters.masks)
    union_s = np.logical_or.reduce([m.data for m in samples])
    union_r = np.logical_or.reduce([m.data for m in raters.masks])
    n_r = int(union_r.sum())
    s_c = int((union_s & union_r).sum()) / n_r if n_r else 0.0
    d_max = float(np.dot(raters.weights, [max(dice(s, r) for s in samples) for r in raters.masks]))
    counts_s = [m.count for m in samples]
    counts_r = [m.count for m in raters.masks]
    v_s = _weighted_var(counts_s, np.full(len(samples), 1.0 / len(samples)))
    v_r = _weighted_var(counts_r, raters.weights)
    d_a = 1.0 - abs(v_s - v_r) / max(v_s, v_r, 1.0)
    return s_c, d_max, d_a


def ci_score(samples, raters: RaterSet) -> float:
    samples = list(samples)
    if not samples:
        raise ValueError("CI needs at least one sample")
    s_c, d_max, d_a = ci_components(samples, raters)
    if min(s_c, d_max, d_a) <= 0:
        return 0.0
    return 3.0 * s_c * d_max * d_a / (d_max * d_a + s_c * d_a + s_c * d_max)


def uncertainty_maps(samples, raters: RaterSet) -> tuple[np.ndarray, np.ndarray]:
    u_pred = np.mean([m.data for m in samples], axis=0, dtype=np.float64)
    u_gt = np.tensordot(raters.weights, raters.indicator_stack().astype(np.float64), axes=1)
    return u_pred, u_gt


def sncc(samples, raters: RaterSet) -> float:
    samples = list(samples)
    if len(samples) < 2 or len(raters) < 2:
        raise UndefinedCorrelationError("SNCC needs at least two samples and two raters")
    check_same_grid(*samples, *raters.masks)
    u_p, u_g = uncertainty_maps(samples, raters)
    dp, dg = u_p - u_p.mean(), u_g - u_g.mean()
    sp, sg = math.sqrt(np.mean(dp * dp)), math.sqrt(np.mean(dg * dg))
    if sp == 0.0 or sg == 0.0:
        raise UndefinedCorrelationError("uncertainty map is constant")
    r = float(np.sum(dp * dg) / (sp * sg * u_p.size))
    return min(1.0, max(-1.0, r))


def ensemble(samples) -> BinaryMask:
    """Majority vote (strictly more than half of the samples)."""
    samples = list(samples)
    frac = np.mean([m.data for m in samples], axis=0)
    return BinaryMask(frac > 0.5, samples[0].spacing)


def evaluate(samples, raters: RaterSet, min_uncertainty_samples: int = 2) -> MetricReport:
    """Score a sample set against the raters.

    Dice and HD95 compare the majority-vote mask with every rater
    (weighted mean).  The set-level scores are left as NaN when fewer than
    ``min_uncertainty_samples`` samples are given, and whenever they are
    undefined (empty masks, constant uncertainty maps).
    """
    samples = list(samples)
    ens = ensemble(samples)
    w = raters.weights
    dice_mean = float(np.dot(w, [dice(ens, r) for r in raters.masks]))
    try:
        hd = float(np.dot(w, [hd95(ens, r) for r in raters.masks]))
    except EmptyMaskError:
        hd = math.nan
    report = MetricReport(len(samples), dice_mean, hd)
    if len(samples) >= min_uncertainty_samples:
        report.ged = ged(samples, raters)
        report.ci = ci_score(samples, raters)
        try:
            report.sncc = sncc(samples, raters)
        except UndefinedCorrelationError:
            report.sncc = math.nan
    return report
