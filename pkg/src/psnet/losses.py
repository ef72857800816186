"""Classification losses: plain cross-entropy and the two margin
softmaxes that operate on angles between features and class weights.

Both margin losses are cross-entropy over modified cosine logits:

* angular softmax multiplies the target angle by an integer margin m,
  through the piecewise-monotone psi(theta) = (-1)^k cos(m*theta) - 2k
  for theta in [k*pi/m, (k+1)*pi/m], annealed against plain cos(theta)
  by lambda; non-target logits stay ||f|| * cos(theta_j) and only the
  class weights are normalized.
* arcface adds margin m to the target angle on fully normalized
  features and weights, then scales every cosine by s.

Cosines are clamped to [-1 + 1e-7, 1 - 1e-7] before arccos so the
gradient through the angle stays finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "COS_CLAMP_EPS",
    "CrossEntropy",
    "AngularSoftmax",
    "ArcFace",
    "LossKind",
    "LossOutput",
    "lambda_at",
    "cross_entropy",
    "angular_softmax",
    "arcface",
    "margin_loss",
    "inference_logits",
]

COS_CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class CrossEntropy:
    pass


@dataclass(frozen=True)
class AngularSoftmax:
    m: int = 4
    lambda_base: float = 1000.0
    lambda_min: float = 5.0
    decay: float = 0.1

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"angular softmax margin must be an integer >= 1, got {self.m}")


@dataclass(frozen=True)
class ArcFace:
    s: float = 64.0
    m: float = 0.5

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"arcface scale must be positive, got {self.s}")
        if not 0.0 <= self.m < math.pi:
            raise ValueError(f"arcface margin must be in [0, pi), got {self.m}")


LossKind = CrossEntropy | AngularSoftmax | ArcFace


@dataclass
class LossOutput:
    loss: Tensor  # scalar, graph-connected
    correct_count: int

    @property
    def value(self) -> float:
        return float(self.loss.data[0])


def lambda_at(iteration: int, lambda_base: float, lambda_min: float, decay: float) -> float:
    """Annealed blending weight: max(lambda_min, base / (1 + decay*it))."""
    return max(lambda_min, lambda_base / (1.0 + decay * iteration))


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def _check_nonzero_rows(t: Tensor, what: str) -> None:
    norms = np.sqrt((t.data * t.data).sum(axis=1))
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise ValueError(f"zero-norm {what} row at index {int(bad[0])}")


def _ce_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    # mean over the batch of (logsumexp - target logit)
    lse = T.logsumexp_rows(logits)
    target = T.gather_rows(logits, labels)
    return T.mean_all(T.sub(lse, target))


def _count_correct(scores: np.ndarray, labels: np.ndarray) -> int:
    return int((scores.argmax(axis=1) == labels).sum())


def cross_entropy(logits: Tensor, labels) -> LossOutput:
    """Softmax cross-entropy over raw logits, via shifted log-sum-exp."""
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    return LossOutput(_ce_from_logits(logits, labels), _count_correct(logits.data, labels))


def angular_softmax(
    features: Tensor,
    weight: Tensor,
    labels,
    m: int = 4,
    iteration: int = 0,
    lambda_base: float = 1000.0,
    lambda_min: float = 5.0,
    decay: float = 0.1,
) -> LossOutput:
    """Multiplicative angular-margin softmax with annealed blending.

    Logits are ||f_i|| * cos(theta_ij) against unit class weights; the
    target entry is replaced by ||f_i|| times the lambda-blend of
    cos(theta_y) and psi(theta_y).  Correctness counts use the plain
    (margin-free) logits.
    """
    cfg = AngularSoftmax(m, lambda_base, lambda_min, decay)
    n, _ = features.shape
    k = weight.shape[0]
    labels = _check_labels(labels, n, k)
    _check_nonzero_rows(features, "feature")
    _check_nonzero_rows(weight, "weight")

    wn = T.l2_normalize_rows(weight)
    logits = T.matmul(features, T.transpose(wn))  # ||f|| cos(theta)
    fnorm = T.row_norms(features)
    cosy = T.div(T.gather_rows(logits, labels), fnorm)
    theta = T.arccos(T.clamp(cosy, -1.0 + COS_CLAMP_EPS, 1.0 - COS_CLAMP_EPS))

    # piecewise fold: k_i = floor(m*theta/pi), constant within each piece
    piece = np.floor(cfg.m * theta.data / math.pi)
    sign = Tensor(np.power(-1.0, piece))
    offset = Tensor(2.0 * piece)
    psi = T.sub(T.mul(T.cos(T.scale(theta, float(cfg.m))), sign), offset)

    lam = lambda_at(iteration, cfg.lambda_base, cfg.lambda_min, cfg.decay)
    blended = T.scale(T.add(T.scale(cosy, lam), psi), 1.0 / (1.0 + lam))
    modified = T.replace_at(logits, labels, T.mul(fnorm, blended))
    return LossOutput(_ce_from_logits(modified, labels), _count_correct(logits.data, labels))


def arcface(features: Tensor, weight: Tensor, labels, s: float = 64.0, m: float = 0.5) -> LossOutput:
    """Additive angular-margin softmax on normalized features/weights."""
    cfg = ArcFace(s, m)
    n, _ = features.shape
    k = weight.shape[0]
    labels = _check_labels(labels, n, k)
    _check_nonzero_rows(features, "feature")
    _check_nonzero_rows(weight, "weight")

    cosm = T.matmul(T.l2_normalize_rows(features), T.transpose(T.l2_normalize_rows(weight)))
    cosy = T.gather_rows(cosm, labels)
    theta = T.arccos(T.clamp(cosy, -1.0 + COS_CLAMP_EPS, 1.0 - COS_CLAMP_EPS))
    margined = T.cos(T.add_scalar(theta, cfg.m))
    logits = T.scale(T.replace_at(cosm, labels, margined), cfg.s)
    return LossOutput(_ce_from_logits(logits, labels), _count_correct(cosm.data, labels))


def margin_loss(kind: LossKind, features: Tensor, weight: Tensor, labels, iteration: int) -> LossOutput:
    """Dispatch for the feature-consuming losses (not CrossEntropy)."""
    if isinstance(kind, AngularSoftmax):
        return angular_softmax(
            features, weight, labels, kind.m, iteration, kind.lambda_base, kind.lambda_min, kind.decay
        )
    if isinstance(kind, ArcFace):
        return arcface(features, weight, labels, kind.s, kind.m)
    raise TypeError(f"not a margin loss: {kind!r}")


def inference_logits(kind: LossKind, features: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Margin-free class scores as used for accuracy/argmax."""
    if isinstance(kind, CrossEntropy):
        logits = T.matmul(features, T.transpose(weight))
        return T.add_bias(logits, bias) if bias is not None else logits
    if isinstance(kind, AngularSoftmax):
        return T.matmul(features, T.transpose(T.l2_normalize_rows(weight)))
    if isinstance(kind, ArcFace):
        cosm = T.matmul(T.l2_normalize_rows(features), T.transpose(T.l2_normalize_rows(weight)))
        return T.scale(cosm, kind.s)
    raise TypeError(f"unknown loss kind: {kind!r}")
