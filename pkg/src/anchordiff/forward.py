"""Anchored forward (noising) process.

Every label is pulled toward the prior ``y_hat`` rather than toward zero:

    y_t = sqrt(a_t) y_{t-1} + (1 - sqrt(a_t)) y_hat + sqrt(1 - a_t) eps_t
    y_t = sqrt(ab_t) y_0 + (1 - sqrt(ab_t)) y_hat + bb_t eps

With ``y_hat == 0`` both reduce to the standard DDPM forward process.
The ``*_array`` helpers broadcast over leading batch axes and are what the
Monte-Carlo diagnostics use.
"""
from __future__ import annotations

import math

import numpy as np

from .schedule import ETA_MAX, Schedule, lookup
from .volume import Volume, check_same_grid


def _check_step(s: Schedule, t: int) -> None:
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 1 <= t <= s.T:
        raise ValueError(f"t must be an integer in [1, {s.T}], got {t!r}")


def forward_step_array(y_prev, y_hat, alpha_t: float, noise):
    sa = math.sqrt(alpha_t)
    return sa * y_prev + (1.0 - sa) * y_hat + math.sqrt(1.0 - alpha_t) * noise


def forward_marginal_array(y0, y_hat, alpha_bar_t: float, beta_bar_t: float, eps):
    sab = math.sqrt(alpha_bar_t)
    return sab * y0 + (1.0 - sab) * y_hat + beta_bar_t * eps


def forward_step(y_prev: Volume, y_hat: Volume, s: Schedule, t: int, rng: np.random.Generator) -> Volume:
    """One transition ``t-1 -> t`` with fresh per-voxel standard normal noise."""
    check_same_grid(y_prev, y_hat)
    _check_step(s, t)
    alpha_t = lookup(s, t)[0]
    noise = rng.standard_normal(y_prev.dims)
    out = forward_step_array(
        np.asarray(y_prev.data, np.float64), np.asarray(y_hat.data, np.float64), alpha_t, noise
    )
    return y_prev.like(out, kind="noise")


def forward_marginal(y0: Volume, y_hat: Volume, s: Schedule, t: int, eps: Volume) -> Volume:
    """Closed-form ``y_t`` given ``y0`` and an explicit noise volume.

    ``t = 0`` returns ``y0`` (as float64).
    """
    check_same_grid(y0, y_hat, eps)
    if t != 0:
        _check_step(s, t)
    _, ab, bb = lookup(s, t)
    out = forward_marginal_array(
        np.asarray(y0.data, np.float64),
        np.asarray(y_hat.data, np.float64),
        ab,
        bb,
        np.asarray(eps.data, np.float64),
    )
    return y0.like(out, kind="label" if t == 0 else "noise")


def forward_expectation(y0: Volume, y_hat: Volume, s: Schedule, t: int) -> Volume:
    """Noise-free blend ``sqrt(ab_t) y0 + (1 - sqrt(ab_t)) y_hat``."""
    check_same_grid(y0, y_hat)
    if t != 0:
        _check_step(s, t)
    sab = math.sqrt(lookup(s, t)[1])
    out = sab * np.asarray(y0.data, np.float64) + (1.0 - sab) * np.asarray(y_hat.data, np.float64)
    return y0.like(out, kind="label")


def ddpm_marginal_array(y0, alpha_bar_t: float, beta_bar_t: float, eps):
    """Reference (un-anchored) DDPM marginal ``sqrt(ab) y0 + bb eps``."""
    return math.sqrt(alpha_bar_t) * y0 + beta_bar_t * eps


def run_chains(y0, y_hat, s: Schedule, t: int, n_chains: int, rng: np.random.Generator) -> np.ndarray:
    """Iterate the single-step transition ``t`` times for ``n_chains`` copies.

    Returns an array of shape ``(n_chains, *y0.shape)``.
    """
    y0 = np.asarray(y0, np.float64)
    y_hat = np.asarray(y_hat, np.float64)
    y = np.broadcast_to(y0, (n_chains,) + y0.shape).copy()
    for step in range(1, t + 1):
        alpha_t = lookup(s, step)[0]
        y = forward_step_array(y, y_hat, alpha_t, rng.standard_normal(y.shape))
    return y


def check_forward_process(y0, y_hat, s: Schedule, n_chains: int = 10_000, seed: int = 0, eta_max: float = ETA_MAX) -> dict:
    """Monte-Carlo agreement between the iterated chain and the closed form.

    Runs ``n_chains`` chains to ``T`` and, at ``t in {1, T//2, T}``, compares
    per-voxel means with the conditional expectation (4 standard errors) and
    per-voxel variances with ``bb_t^2`` (5 % relative).  The terminal check
    asks the mean at ``T`` to sit on the prior within
    ``sqrt(eta_max) * max|y0 - y_hat|`` plus 4 standard errors, so a schedule
    that does not honour the floor fails it.
    """
    y0 = np.asarray(y0, np.float64)
    y_hat = np.asarray(y_hat, np.float64)
    rng = np.random.default_rng(seed)
    checkpoints = sorted({1, max(1, s.T // 2), s.T})
    y = np.broadcast_to(y0, (n_chains,) + y0.shape).copy()
    mean_z = mean_err = var_err = 0.0
    terminal_err = terminal_bound = math.nan
    for step in range(1, s.T + 1):
        y = forward_step_array(y, y_hat, lookup(s, step)[0], rng.standard_normal(y.shape))
        if step not in checkpoints:
            continue
        _, ab, bb = lookup(s, step)
        expected = math.sqrt(ab) * y0 + (1.0 - math.sqrt(ab)) * y_hat
        mean = y.mean(axis=0)
        var = y.var(axis=0, ddof=1)
        se = bb / math.sqrt(n_chains)
        err = np.abs(mean - expected)
        mean_err = max(mean_err, float(err.max()))
        mean_z = max(mean_z, float(err.max() / se))
        var_err = max(var_err, float(np.max(np.abs(var / (bb * bb) - 1.0))))
        if step == s.T:
            terminal = np.abs(mean - y_hat)
            terminal_err = float(terminal.max())
            terminal_bound = math.sqrt(eta_max) * float(np.max(np.abs(y0 - y_hat))) + 4.0 * se
    checks = {
        "marginal_mean": mean_z <= 4.0,
        "variance": var_err <= 0.05,
        "terminal": terminal_err <= terminal_bound,
    }
    return {
        "marginal_mean_err": mean_err,
        "marginal_mean_z": mean_z,
        "variance_rel_err": var_err,
        "terminal_mean_err": terminal_err,
        "terminal_bound": terminal_bound,
        "timesteps": checkpoints,
        "n_chains": n_chains,
        "checks": checks,
        "pass": all(checks.values()),
    }
