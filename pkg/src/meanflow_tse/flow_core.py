"""
Trajectory and objective maths for the background-to-target flow.

The path runs z_t = t * S + (1 - t) * B, so the mixture spectrogram sits at
t = lambda.  Training targets follow the alpha-flow construction: a convex
blend of the ground-truth direction u = S - B and a frozen network evaluation
at the intermediate time tau = alpha * r + (1 - alpha) * t.  Complex arrays are
numpy complex128; every norm sums squared real and imaginary parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal import ComplexSpectrogram

DEFAULT_MU = -0.4
DEFAULT_SIGMA = 1.0
DEFAULT_FLOW_RATIO = 0.5
DEFAULT_C = 1e-3
TIE_TOL = 1e-9


@dataclass(frozen=True)
class TimePair:
    t: float
    r: float

    def __post_init__(self):
        if not 0.0 <= self.t <= self.r <= 1.0:
            raise ValueError(f"need 0 <= t <= r <= 1, got t={self.t}, r={self.r}")

    @property
    def is_flow_matching(self) -> bool:
        return self.r - self.t < TIE_TOL


@dataclass(frozen=True)
class AlphaSchedule:
    k_s: int = 0
    k_e: int = 2000
    gamma: float = 25.0
    alpha_min: float = 0.005

    def __post_init__(self):
        if not self.k_s < self.k_e:
            raise ValueError("k_s must be < k_e")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError("alpha_min must be in (0, 1]")


@dataclass
class FlowSample:
    z_t: np.ndarray
    u: np.ndarray
    times: TimePair
    alpha: float
    lam: float


@dataclass
class LossOutput:
    value: float
    grad_wrt_prediction: np.ndarray
    weight: float
    sq_err: float


def _data(x):
    return x.data if isinstance(x, ComplexSpectrogram) else np.asarray(x)


def _like(template, data):
    if isinstance(template, ComplexSpectrogram):
        return ComplexSpectrogram(data, template.hop, template.window_len)
    return data


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def interpolate(S, B, t: float):
    s, b = _data(S), _data(B)
    _check_shapes(s, b)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return _like(S, t * s + (1.0 - t) * b)


def ground_truth_velocity(S, B):
    s, b = _data(S), _data(B)
    _check_shapes(s, b)
    return _like(S, s - b)


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def sample_time_pair(rng: np.random.Generator, mu: float = DEFAULT_MU, sigma: float = DEFAULT_SIGMA,
                     flow_ratio: float = DEFAULT_FLOW_RATIO, family: str = "logit_normal") -> TimePair:
    """Draw (t, r) as the ordered pair of two logit-normal samples.

    With probability ``flow_ratio`` r is collapsed onto t.  ``family="lognormal_clip"``
    uses exp(N(mu, sigma)) clipped into (0, 1) instead.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= flow_ratio <= 1.0:
        raise ValueError("flow_ratio must be in [0, 1]")
    x = rng.normal(mu, sigma, size=2)
    if family == "logit_normal":
        v = _logistic(x)
    elif family == "lognormal_clip":
        v = np.clip(np.exp(x), 1e-6, 1.0 - 1e-6)
    else:
        raise ValueError(f"unknown time family {family!r}")
    t, r = float(v.min()), float(v.max())
    if rng.random() < flow_ratio or r - t < TIE_TOL:
        r = t
    return TimePair(t, r)


def alpha_at(sched: AlphaSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("k must be non-negative")
    x = sched.gamma * ((k - sched.k_s) / (sched.k_e - sched.k_s) - 0.5)
    # 1 - sigmoid(x) == sigmoid(-x), the stable form for large x
    a = 1.0 / (1.0 + math.exp(x)) if x < 700 else 0.0
    return min(max(a, sched.alpha_min), 1.0)


def tau(t: float, r: float, alpha: float) -> float:
    return alpha * r + (1.0 - alpha) * t


def alpha_target(u, v_at_tau, alpha: float):
    uu, vv = _data(u), _data(v_at_tau)
    _check_shapes(uu, vv)
    if alpha == 1.0:
        return _like(u, uu.copy())
    if alpha == 0.0:
        return _like(u, vv.copy())
    return _like(u, alpha * uu + (1.0 - alpha) * vv)


def sq_norm(x) -> float:
    d = _data(x)
    if np.iscomplexobj(d):
        return float(np.sum(d.real**2) + np.sum(d.imag**2))
    return float(np.sum(d**2))


def adaptive_weight(delta_sq_norm: float, alpha: float, c: float = DEFAULT_C) -> float:
    return alpha / (delta_sq_norm + c)


def adaptive_loss(v_pred, target, alpha: float, c: float = DEFAULT_C) -> LossOutput:
    """sg(w) * ||v_pred - target||^2 and its gradient with w held constant."""
    p, q = _data(v_pred), _data(target)
    _check_shapes(p, q)
    delta = p - q
    err = sq_norm(delta)
    w = adaptive_weight(err, alpha, c)
    return LossOutput(w * err, 2.0 * w * delta, w, err)
