"""Noise schedules with a pinned terminal floor on the cumulative product.

The anchored process needs ``alpha_bar_T -> 0`` so that the forward mean
lands on the prior, but the y0-reconstruction divides by
``sqrt(alpha_bar_t)``.  Schedules therefore end at a tiny positive floor
``eta`` instead of exactly zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

KINDS = ("linear", "cosine")
DEFAULT_T = 50
DEFAULT_ETA = 1e-6
ETA_MAX = 1e-6


@dataclass(frozen=True, eq=False)
class Schedule:
    """Precomputed tables for ``t = 1..T`` (index ``t - 1``)."""

    kind: str
    T: int
    eta: float
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray

    def lookup(self, t: int) -> tuple[float, float, float]:
        return lookup(self, t)

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(lookup(self, t)[1])

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "T": self.T, "eta": self.eta, "alpha": [float(a) for a in self.alpha]}
        )

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        d = json.loads(text)
        s = make_schedule(d["kind"], d["T"], d["eta"], validate=d["eta"] <= ETA_MAX)
        stored = np.asarray(d["alpha"], dtype=np.float64)
        if stored.shape != s.alpha.shape or not np.array_equal(stored, s.alpha):
            raise ValueError("serialized alpha table does not match its (kind, T, eta)")
        return s


def _raw_alpha_bar(kind: str, T: int) -> np.ndarray:
    if kind == "linear":
        # Standard 1e-4..0.02 beta grid for 1000 steps, rescaled to T steps.
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
        betas = np.minimum(betas, 0.999)
        return np.cumprod(1.0 - betas)
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        return f[1:] / f[0]
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")


def make_schedule(kind: str = "cosine", T: int = DEFAULT_T, eta: float = DEFAULT_ETA, *, validate: bool = True) -> Schedule:
    """Build a schedule whose ``alpha_bar`` ends exactly at ``eta``.

    The raw cumulative product of the chosen construction is rescaled
    affinely in alpha-bar space, keeping ``alpha_bar_1`` and moving
    ``alpha_bar_T`` onto ``eta``.  With ``T == 1`` the single entry is ``eta``.

    ``validate=False`` admits ``eta`` above the usual ceiling; diagnostics use
    it to build deliberately broken schedules.
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    eta = float(eta)
    upper = ETA_MAX if validate else 1.0
    if not (0.0 < eta <= upper):
        raise ValueError(f"eta must lie in (0, {upper:g}], got {eta!r}")
    raw = _raw_alpha_bar(kind, T)
    if T == 1:
        alpha_bar = np.array([eta])
    else:
        first, last = raw[0], raw[-1]
        if not first > eta:
            raise ValueError(f"eta={eta} is not below alpha_bar_1={first}")
        alpha_bar = eta + (raw - last) * ((first - eta) / (first - last))
        alpha_bar[0] = first
        alpha_bar[-1] = eta
    if np.any(np.diff(alpha_bar) >= 0):
        raise ValueError("alpha_bar is not strictly decreasing")
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    alpha = alpha_bar / prev
    beta_bar = np.sqrt(1.0 - alpha_bar)
    for arr in (alpha, alpha_bar, beta_bar):
        arr.flags.writeable = False
    return Schedule(kind, T, eta, alpha, alpha_bar, beta_bar)


def lookup(s: Schedule, t: int) -> tuple[float, float, float]:
    """``(alpha_t, alpha_bar_t, beta_bar_t)``; ``t = 0`` gives ``(1, 1, 0)``."""
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 0 <= t <= s.T:
        raise ValueError(f"t must be an integer in [0, {s.T}], got {t!r}")
    if t == 0:
        return 1.0, 1.0, 0.0
    i = int(t) - 1
    return float(s.alpha[i]), float(s.alpha_bar[i]), float(s.beta_bar[i])
