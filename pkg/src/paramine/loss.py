"""Additive Margin Scale loss with in-batch and hard negatives.

For anchor ``x_i`` with positive ``y_i``::

    p_i = exp(s * cos(theta(x_i, y_i) + m))
    n_i = sum_{k != i} exp(s * cos(x_i, y_k))
    h_i = sum_j       exp(s * cos(x_i, h_ij))
    L   = -1/N * sum_i log(p_i / (p_i + n_i + g * h_i))

Only the positive logit carries the angular margin.  Inputs are normalized
internally, so gradients returned by :func:`ams_loss_grad` are taken with
respect to the raw vectors and already include the normalization Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike

from . import geometry as geo
from .errors import DimensionMismatch, EmptyBatch

# Angle clamp for the arccos derivative near 0 and pi.
GRAD_COS_LIMIT = 1.0 - 1e-7


@dataclass(frozen=True)
class LossParams:
    s: float = 0.5
    m: float = 0.5
    g: float = 1.0

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ValueError(f"scale s must be positive, got {self.s}")
        if not (0.0 <= self.m < math.pi / 2):
            raise ValueError(f"margin m must lie in [0, pi/2), got {self.m}")
        if not (self.g >= 0 and math.isfinite(self.g)):
            raise ValueError(f"hard-negative weight g must be >= 0, got {self.g}")


@dataclass
class LossBatch:
    """Anchors, their positives, and a (possibly ragged) hard-negative list per anchor."""

    anchors: np.ndarray
    positives: np.ndarray
    hard_negatives: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.anchors = geo.as_matrix(self.anchors)
        dim = self.anchors.shape[1] if self.anchors.shape[0] else None
        self.positives = geo.as_matrix(self.positives, dim)
        if self.anchors.shape[0] == 0:
            raise EmptyBatch("a loss batch needs at least one anchor")
        if self.positives.shape != self.anchors.shape:
            raise DimensionMismatch(
                f"anchors {self.anchors.shape} and positives {self.positives.shape} differ")
        if not self.hard_negatives:
            self.hard_negatives = [np.zeros((0, dim)) for _ in range(self.size)]
        if len(self.hard_negatives) != self.size:
            raise DimensionMismatch("need one hard-negative list per anchor")
        self.hard_negatives = [
            geo.as_matrix(h, dim) if len(h) else np.zeros((0, dim))
            for h in self.hard_negatives
        ]

    @property
    def size(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


@dataclass
class LossValue:
    total: float
    per_anchor: np.ndarray
    p: np.ndarray
    n: np.ndarray
    h: np.ndarray


@dataclass
class LossGrad:
    anchors: np.ndarray
    positives: np.ndarray
    hard_negatives: list[np.ndarray]


def _margin_cos(c, m: float):
    return np.cos(np.arccos(geo.clamp_unit(c)) + m)


def positive_term(x: ArrayLike, y: ArrayLike, params: LossParams) -> float:
    return math.exp(params.s * math.cos(geo.angle(x, y) + params.m))


def _sum_exp(x: ArrayLike, others: ArrayLike | Sequence[ArrayLike], s: float) -> float:
    x = geo.as_vector(x)
    others = geo.as_matrix(others, x.shape[0])
    if others.shape[0] == 0:
        return 0.0
    # cos(angle(x, o)) == cosine(x, o); no margin on negatives
    cos = geo.pairwise_cosine(x[None, :], others)[0]
    total = 0.0
    for c in cos.tolist():
        total += math.exp(s * c)
    return total


def negative_term(x: ArrayLike, in_batch: ArrayLike | Sequence[ArrayLike],
                  params: LossParams) -> float:
    """Sum of ``exp(s * cos)`` over in-batch negatives; 0 for an empty list."""
    return _sum_exp(x, in_batch, params.s)


def hard_term(x: ArrayLike, hards: ArrayLike | Sequence[ArrayLike],
              params: LossParams) -> float:
    """Hard-negative mass before weighting by ``g``."""
    return _sum_exp(x, hards, params.s)


def _logits(batch: LossBatch, params: LossParams):
    """Normalized inputs, cosine matrix, and per-anchor hard cosines."""
    xs = geo.normalize_rows(batch.anchors)
    ys = geo.normalize_rows(batch.positives)
    cos_xy = geo.clamp_unit(geo.ordered_matmul(xs, ys))
    hs = [geo.normalize_rows(h) if h.shape[0] else h for h in batch.hard_negatives]
    cos_h = [
        geo.clamp_unit(geo.ordered_matmul(xs[i:i + 1], h))[0] if h.shape[0] else np.zeros(0)
        for i, h in enumerate(hs)
    ]
    return xs, ys, hs, cos_xy, cos_h


def _anchor_logits(i: int, cos_xy, cos_h, params: LossParams):
    s, g = params.s, params.g
    pos = s * float(_margin_cos(cos_xy[i, i], params.m))
    neg = s * np.delete(cos_xy[i], i)
    if g > 0 and cos_h[i].shape[0]:
        hard = s * cos_h[i] + math.log(g)
    else:
        hard = np.zeros(0)
    return pos, neg, hard


def _logsumexp(values: np.ndarray) -> float:
    top = float(values.max())
    acc = 0.0
    for v in (values - top).tolist():
        acc += math.exp(v)
    return top + math.log(acc)


def ams_loss(batch: LossBatch, params: LossParams) -> LossValue:
    """Additive Margin Scale loss, evaluated in log space."""
    _, _, _, cos_xy, cos_h = _logits(batch, params)
    n_anchor = batch.size
    per_anchor = np.zeros(n_anchor)
    p = np.zeros(n_anchor)
    n = np.zeros(n_anchor)
    h = np.zeros(n_anchor)
    for i in range(n_anchor):
        pos, neg, hard = _anchor_logits(i, cos_xy, cos_h, params)
        per_anchor[i] = -pos + _logsumexp(np.concatenate(([pos], neg, hard)))
        # components are reporting only and may overflow to inf for large s
        with np.errstate(over="ignore"):
            p[i] = np.exp(pos)
            n[i] = np.exp(neg).sum()
            h[i] = np.exp(params.s * cos_h[i]).sum()
    total = 0.0
    for v in per_anchor.tolist():
        total += v
    return LossValue(total=total / n_anchor, per_anchor=per_anchor, p=p, n=n, h=h)


def _softmax(values: np.ndarray) -> np.ndarray:
    e = np.exp(values - values.max())
    return e / e.sum()


def _cos_grad(u_hat: np.ndarray, v_hat: np.ndarray, c: float, u_norm: float) -> np.ndarray:
    """d<u_hat, v_hat>/du for raw u with norm ``u_norm``."""
    return (v_hat - c * u_hat) / u_norm


def ams_loss_grad(batch: LossBatch, params: LossParams) -> LossGrad:
    """Analytic gradient of :func:`ams_loss` for every embedding slot.

    Near-identical or antipodal positive pairs use a clamped angle for the
    arccos derivative so the result stays finite.
    """
    xs, ys, hs, cos_xy, cos_h = _logits(batch, params)
    s, m = params.s, params.m
    x_norm = geo.row_norms(batch.anchors)
    y_norm = geo.row_norms(batch.positives)
    n_anchor, dim = batch.anchors.shape
    gx = np.zeros((n_anchor, dim))
    gy = np.zeros((n_anchor, dim))
    gh = [np.zeros_like(h) for h in batch.hard_negatives]
    scale = 1.0 / n_anchor

    for i in range(n_anchor):
        pos, neg, hard = _anchor_logits(i, cos_xy, cos_h, params)
        w = _softmax(np.concatenate(([pos], neg, hard)))
        others = [k for k in range(n_anchor) if k != i]

        # dL_i/dc for the positive cosine, through cos(arccos(c) + m)
        c = float(cos_xy[i, i])
        c_safe = min(max(c, -GRAD_COS_LIMIT), GRAD_COS_LIMIT)
        theta = math.acos(c_safe)
        dpos_dc = s * math.sin(theta + m) / math.sin(theta)
        dl_dc = (w[0] - 1.0) * dpos_dc
        gx[i] += scale * dl_dc * _cos_grad(xs[i], ys[i], c, x_norm[i])
        gy[i] += scale * dl_dc * _cos_grad(ys[i], xs[i], c, y_norm[i])

        for slot, k in enumerate(others):
            dl_dc = w[1 + slot] * s
            ck = float(cos_xy[i, k])
            gx[i] += scale * dl_dc * _cos_grad(xs[i], ys[k], ck, x_norm[i])
            gy[k] += scale * dl_dc * _cos_grad(ys[k], xs[i], ck, y_norm[k])

        if hard.shape[0]:
            h_norm = geo.row_norms(batch.hard_negatives[i])
            base = 1 + len(others)
            for j in range(hard.shape[0]):
                dl_dc = w[base + j] * s
                cj = float(cos_h[i][j])
                gx[i] += scale * dl_dc * _cos_grad(xs[i], hs[i][j], cj, x_norm[i])
                gh[i][j] += scale * dl_dc * _cos_grad(hs[i][j], xs[i], cj, h_norm[j])

    return LossGrad(anchors=gx, positives=gy, hard_negatives=gh)
