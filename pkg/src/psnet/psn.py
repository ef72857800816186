"""Parametric sigmoid norm: x -> alpha / (1 + exp(-beta * (x - gamma))).

The map squashes every feature into (0, alpha); beta sets the slope and
gamma the midpoint, so F(gamma) = alpha/2 and dF/dx peaks there at
alpha*beta/4.  Inputs close to gamma therefore receive the largest
gradient, inputs far from it the smallest.  alpha and beta stay positive
(projection to >= 1e-3 when trained) so the map remains increasing.

Saturated outputs are nudged one ulp inside the open interval (0, alpha)
so boundedness is strict even where the exponential under/overflows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _result

__all__ = [
    "POSITIVITY_FLOOR",
    "PsnMode",
    "PsnParams",
    "sigmoid",
    "psn_value",
    "psn_partials",
    "psn_forward",
    "psn_apply",
    "psn_from_mode",
]

POSITIVITY_FLOOR = 1e-3


def sigmoid(x):
    """Numerically stable logistic function.

    Uses 1/(1+e^-x) for x >= 0 and e^x/(1+e^x) for x < 0, so the
    exponential argument is never positive.  Saturates to exactly 0.0 or
    1.0 in the far tails instead of overflowing.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


class PsnMode(enum.Enum):
    """The seven layer configurations: off, all-fixed, and which of
    alpha/beta/gamma are learned.  Fixed values are alpha=1, beta=20,
    gamma=1; trainable parameters start from those same values."""

    DISABLED = "disabled"
    FIXED = "fixed"
    TRAIN_ALPHA = "train_alpha"
    TRAIN_BETA = "train_beta"
    TRAIN_GAMMA = "train_gamma"
    TRAIN_BETA_GAMMA = "train_beta_gamma"
    TRAIN_ALL = "train_all"


@dataclass
class PsnParams:
    alpha: float = 1.0
    beta: float = 20.0
    gamma: float = 1.0
    alpha_trainable: bool = False
    beta_trainable: bool = False
    gamma_trainable: bool = False

    def __post_init__(self):
        if self.alpha < POSITIVITY_FLOOR:
            raise ValueError(f"alpha must be >= {POSITIVITY_FLOOR}, got {self.alpha}")
        if self.beta < POSITIVITY_FLOOR:
            raise ValueError(f"beta must be >= {POSITIVITY_FLOOR}, got {self.beta}")


def psn_from_mode(mode: PsnMode) -> PsnParams | None:
    """Parameter set for a mode; None for DISABLED (identity layer)."""
    if mode is PsnMode.DISABLED:
        return None
    return PsnParams(
        alpha_trainable=mode in (PsnMode.TRAIN_ALPHA, PsnMode.TRAIN_ALL),
        beta_trainable=mode in (PsnMode.TRAIN_BETA, PsnMode.TRAIN_BETA_GAMMA, PsnMode.TRAIN_ALL),
        gamma_trainable=mode in (PsnMode.TRAIN_GAMMA, PsnMode.TRAIN_BETA_GAMMA, PsnMode.TRAIN_ALL),
    )


def _clip_open(y: np.ndarray, alpha: float) -> np.ndarray:
    # keep saturated values strictly inside (0, alpha)
    return np.clip(y, np.nextafter(0.0, 1.0), np.nextafter(alpha, 0.0))


def psn_value(x, alpha: float, beta: float, gamma: float):
    """Forward map on plain arrays: alpha * sigmoid(beta * (x - gamma))."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(sigmoid(beta * (x - gamma)))
    out = _clip_open(alpha * s, alpha)
    if out.ndim == 0:
        return float(out)
    return out


def psn_partials(x: float, p: PsnParams) -> tuple[float, float, float, float]:
    """(dF/dx, dF/dalpha, dF/dbeta, dF/dgamma) at a scalar input.

    With s = sigmoid(beta*(x-gamma)) and sp = s*(1-s):
      dF/dx = alpha*beta*sp, dF/dalpha = s,
      dF/dbeta = alpha*(x-gamma)*sp, dF/dgamma = -alpha*beta*sp.
    """
    s = sigmoid(p.beta * (x - p.gamma))
    sp = s * (1.0 - s)
    return (
        p.alpha * p.beta * sp,
        s,
        p.alpha * (x - p.gamma) * sp,
        -p.alpha * p.beta * sp,
    )


def psn_apply(x: Tensor, alpha: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    """Differentiable forward through the squashing map.

    alpha/beta/gamma are shape-(1,) tensors shared across all elements;
    their gradients are the sums of the per-element partials.
    """
    for t, name in ((alpha, "alpha"), (beta, "beta"), (gamma, "gamma")):
        if t.shape != (1,):
            raise ValueError(f"psn_apply: {name} must have shape (1,)")
    a = float(alpha.data[0])
    b = float(beta.data[0])
    g0 = float(gamma.data[0])
    s = np.asarray(sigmoid(b * (x.data - g0)))
    out = _clip_open(a * s, a)

    def bwd(g):
        sp = s * (1.0 - s)
        gx = g * (a * b * sp)
        ga = np.array([(g * s).sum()])
        gb = np.array([(g * (a * (x.data - g0) * sp)).sum()])
        gg = np.array([-(g * (a * b * sp)).sum()])
        return gx, ga, gb, gg

    return _result(out, (x, alpha, beta, gamma), bwd)


def psn_forward(x: Tensor, p: PsnParams) -> Tensor:
    """Forward through the layer with fixed (non-learned) parameters."""
    return psn_apply(
        x,
        Tensor(np.array([p.alpha])),
        Tensor(np.array([p.beta])),
        Tensor(np.array([p.gamma])),
    )
