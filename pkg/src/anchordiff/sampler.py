"""Reverse trajectory of the anchored diffusion.

Each step reconstructs the clean label from the predicted noise and then
re-blends it with the prior at the previous noise level::

    y0_hat  = (y_t - (1 - sqrt(ab_t)) y_hat - bb_t eps_pred) / sqrt(ab_t)
    y_{t-1} = sqrt(ab_{t-1}) y0_hat + (1 - sqrt(ab_{t-1})) y_hat + bb_{t-1} z

``z`` is fresh Gaussian noise in ``stochastic`` mode and the predicted
noise itself in ``deterministic`` mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .denoiser import NullDenoiser, _as_cases
from .metrics import ensemble
from .schedule import DEFAULT_ETA, DEFAULT_T, Schedule, lookup, make_schedule
from .volume import BinaryMask, Volume, binarize, check_same_grid

MODES = ("stochastic", "deterministic")
DEFAULT_N = 16


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "stochastic"
    n_samples: int = DEFAULT_N
    clamp_y0: bool = True
    seed: int = 0
    steps: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.n_samples, bool) or not isinstance(self.n_samples, int) or self.n_samples < 1:
            raise ValueError(f"n_samples must be a positive integer, got {self.n_samples!r}")


def trajectory_rngs(seed: int, n: int, key=()) -> list[np.random.Generator]:
    """Independent generators for ``n`` trajectories under ``(seed, key)``."""
    root = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return [np.random.default_rng(child) for child in root.spawn(n)]


def _check_t(s: Schedule, t: int) -> None:
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 1 <= t <= s.T:
        raise ValueError(f"t must be an integer in [1, {s.T}], got {t!r}")


def reconstruct_y0_array(y_t, y_hat, eps_pred, alpha_bar_t, beta_bar_t, clamp=True):
    sab = math.sqrt(alpha_bar_t)
    y0 = (y_t - (1.0 - sab) * y_hat - beta_bar_t * eps_pred) / sab
    return np.clip(y0, -1.0, 1.0) if clamp else y0


def reconstruct_y0(y_t: Volume, y_hat: Volume, eps_pred: Volume, s: Schedule, t: int, clamp: bool = True) -> Volume:
    """Invert the closed-form marginal for ``y0`` given a noise estimate."""
    check_same_grid(y_t, y_hat, eps_pred)
    _check_t(s, t)
    _, ab, bb = lookup(s, t)
    out = reconstruct_y0_array(
        np.asarray(y_t.data, np.float64),
        np.asarray(y_hat.data, np.float64),
        np.asarray(eps_pred.data, np.float64),
        ab,
        bb,
        clamp,
    )
    return y_t.like(out, kind="label" if clamp else "noise")


def reverse_step_array(y0_pred, y_hat, eps_pred, s: Schedule, t: int, mode: str, rng=None):
    if t == 1:
        return np.array(y0_pred, dtype=np.float64, copy=True)
    _, ab_prev, bb_prev = lookup(s, t - 1)
    sab = math.sqrt(ab_prev)
    if mode == "stochastic":
        noise = rng.standard_normal(np.shape(y0_pred))
    elif mode == "deterministic":
        noise = eps_pred
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return sab * y0_pred + (1.0 - sab) * y_hat + bb_prev * noise


def reverse_step(
    y_t: Volume,
    y0_pred: Volume,
    y_hat: Volume,
    eps_pred: Volume,
    s: Schedule,
    t: int,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> Volume:
    """Move from ``t`` to ``t - 1``; ``t = 1`` returns ``y0_pred`` exactly.

    Deterministic mode consumes no randomness.
    """
    check_same_grid(y_t, y0_pred, y_hat, eps_pred)
    _check_t(s, t)
    out = reverse_step_array(
        np.asarray(y0_pred.data, np.float64),
        np.asarray(y_hat.data, np.float64),
        np.asarray(eps_pred.data, np.float64),
        s,
        t,
        cfg.mode,
        rng,
    )
    return y_t.like(out, kind="label" if t == 1 else "noise")


def init_terminal_array(y_hat, s: Schedule, rng, mu0: float = 0.0):
    _, ab, bb = lookup(s, s.T)
    sab = math.sqrt(ab)
    return sab * mu0 + (1.0 - sab) * np.asarray(y_hat, np.float64) + bb * rng.standard_normal(np.shape(y_hat))


def init_terminal(y_hat: Volume, s: Schedule, rng: np.random.Generator) -> Volume:
    """Draw ``y_T`` from the marginal at ``T`` with the label midpoint 0 as ``y0``."""
    return y_hat.like(init_terminal_array(y_hat.data, s, rng), kind="noise")


def _eps_fn(denoiser):
    if hasattr(denoiser, "predict_eps"):
        return denoiser.predict_eps
    if callable(denoiser):
        return denoiser
    raise TypeError("denoiser must expose predict_eps(y_t, y_hat, t, schedule, x=None) or be callable")


def run_trajectory(eps_fn, x, y_hat, s: Schedule, mode: str, clamp: bool, rng, y_init=None, trace=None):
    """One reverse chain on raw arrays; returns the final ``y0`` estimate."""
    y = init_terminal_array(y_hat, s, rng) if y_init is None else np.asarray(y_init, np.float64)
    if trace is not None:
        trace.append(y)
    for t in range(s.T, 0, -1):
        _, ab, bb = lookup(s, t)
        eps = np.asarray(eps_fn(y, y_hat, t, s, x=x), np.float64)
        y0 = reconstruct_y0_array(y, y_hat, eps, ab, bb, clamp)
        y = reverse_step_array(y0, y_hat, eps, s, t, mode, rng)
        if trace is not None:
            trace.append(y)
    return y


def sample(denoiser, x: Volume | None, y_hat: Volume, s: Schedule, cfg: SamplerConfig, key=()) -> list[Volume]:
    """Draw ``cfg.n_samples`` independent reverse trajectories.

    Trajectory ``i`` uses the ``i``-th child stream of ``(cfg.seed, key)``,
    so results do not depend on how trajectories are scheduled.
    """
    check_same_grid(y_hat, x)
    if cfg.steps is not None and cfg.steps != s.T:
        raise ValueError(f"config asks for {cfg.steps} steps but the schedule has T={s.T}")
    eps_fn = _eps_fn(denoiser)
    y_hat_arr = np.asarray(y_hat.data, np.float64)
    x_arr = None if x is None else np.asarray(x.data, np.float64)
    out = []
    for rng in trajectory_rngs(cfg.seed, cfg.n_samples, key):
        y0 = run_trajectory(eps_fn, x_arr, y_hat_arr, s, cfg.mode, cfg.clamp_y0, rng)
        out.append(y_hat.like(y0, kind="label" if cfg.clamp_y0 else "noise"))
    return out


class AnchoredDiffusion(BaseEstimator):
    """Estimator front-end for the anchored sampler.

    ``fit`` builds the schedule and, when training data is given, fits a
    clone of ``denoiser`` on it.  ``transform`` returns the stacked samples,
    ``predict`` their majority-vote mask.

    With ``anchored=False`` every prior is replaced by zeros, which turns the
    process into a standard Gaussian-terminal diffusion (the ablation arm).
    """

    def __init__(
        self,
        denoiser=None,
        schedule="cosine",
        n_steps=DEFAULT_T,
        eta=DEFAULT_ETA,
        mode="stochastic",
        n_samples=DEFAULT_N,
        clamp_y0=True,
        anchored=True,
        random_state=0,
    ):
        self.denoiser = denoiser
        self.schedule = schedule
        self.n_steps = n_steps
        self.eta = eta
        self.mode = mode
        self.n_samples = n_samples
        self.clamp_y0 = clamp_y0
        self.anchored = anchored
        self.random_state = random_state

    def _prior(self, y_hat: Volume) -> Volume:
        if self.anchored:
            return y_hat
        return y_hat.like(np.zeros(y_hat.dims), kind="label")

    def fit(self, X=None, y=None):
        if isinstance(self.schedule, Schedule):
            self.schedule_ = self.schedule
        else:
            self.schedule_ = make_schedule(self.schedule, self.n_steps, self.eta)
        self.config_ = SamplerConfig(self.mode, self.n_samples, self.clamp_y0, self.random_state)
        base = NullDenoiser() if self.denoiser is None else self.denoiser
        if X is None:
            self.denoiser_ = base
        else:
            cases = [(r, None if p is None else self._prior(p), im) for r, p, im in _as_cases(X)]
            self.denoiser_ = clone(base).fit(cases, schedule=self.schedule_)
        return self

    def sample(self, y_hat: Volume, x: Volume | None = None, key=()) -> list[Volume]:
        check_is_fitted(self, "schedule_")
        return sample(self.denoiser_, x, self._prior(y_hat), self.schedule_, self.config_, key)

    def transform(self, y_hat: Volume, x: Volume | None = None) -> np.ndarray:
        return np.stack([v.data for v in self.sample(y_hat, x)])

    def predict(self, y_hat: Volume, x: Volume | None = None) -> BinaryMask:
        return ensemble(self.predict_samples(y_hat, x))

    def predict_samples(self, y_hat: Volume, x: Volume | None = None) -> list[BinaryMask]:
        return [binarize(v) for v in self.sample(y_hat, x)]
