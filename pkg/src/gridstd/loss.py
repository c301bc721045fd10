"""Composite detection / dissimilarity / localization objective.

For one training tuple with cell indicator ``m_i``::

    l1 = sum_i m_i (1 - cos(f, f'_i))
    l2 = sum_i (1 - m_i) dissim(f, f'_i)
    l3 = sum_i m_i [(t_i - t'_i)^2 + lam' (sqrt(dt_i) - sqrt(dt'_i))^2]
    loss = lam1 l1 + lam2 l2 + lam3 l3

Every function accepts arrays with an optional leading batch axis; batch
reductions are means over examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import Prediction, PredictionGrad

VARIANTS = ("abs_cos", "shifted_cos", "cos_squared")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    detection: float = 1.0
    dissimilarity: float = 0.5
    localization: float = 3.0
    duration: float = 1.0
    variant: str = "cos_squared"

    def __post_init__(self):
        lams = (self.detection, self.dissimilarity, self.localization, self.duration)
        if min(lams) < 0:
            raise LossError(f"loss weights must be non-negative: {lams}")
        if max(lams[:3]) <= 0:
            raise LossError("at least one of the three component weights must be positive")
        if self.variant not in VARIANTS:
            raise LossError(f"unknown dissimilarity {self.variant!r}; choose from {VARIANTS}")

    @property
    def triple(self) -> tuple[float, float, float]:
        return (self.detection, self.dissimilarity, self.localization)


@dataclass
class TrainingTarget:
    """Target for one example (or a batch, with a leading axis on every array)."""

    embedding: np.ndarray  # (..., K)
    mask: np.ndarray  # (..., C) bool
    rel_center: np.ndarray  # (..., C); read only where mask
    duration: np.ndarray  # (..., C); read only where mask

    @classmethod
    def from_local(cls, embedding, num_cells, local=None) -> "TrainingTarget":
        mask = np.zeros(num_cells, bool)
        c = np.zeros(num_cells)
        d = np.zeros(num_cells)
        if local is not None:
            mask[local.cell_index] = True
            c[local.cell_index] = local.rel_center
            d[local.cell_index] = local.duration
        return cls(np.asarray(embedding, float), mask, c, d)


def _cosine(f, g):
    """cos(f, g_i) per cell.  f: (..., K), g: (..., C, K)."""
    nf = np.linalg.norm(f, axis=-1)
    ng = np.linalg.norm(g, axis=-1)
    if np.any(nf == 0) or np.any(ng == 0):
        raise LossError("cosine undefined for a zero-norm embedding")
    dot = np.einsum("...k,...ck->...c", f, g)
    return dot / (nf[..., None] * ng), nf, ng, dot


def _cosine_grad(f, g, cos, nf, ng):
    """d cos(f, g_i) / d g_i."""
    return f[..., None, :] / (nf[..., None, None] * ng[..., None]) - (
        cos / ng**2
    )[..., None] * g


def cosine(e1, e2) -> float:
    e1 = np.asarray(e1, float)
    e2 = np.asarray(e2, float)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise LossError("cosine undefined for a zero-norm embedding")
    return float(e1 @ e2 / (n1 * n2))


def dissim_from_cos(variant: str, cos):
    if variant == "abs_cos":
        return np.abs(cos)
    if variant == "shifted_cos":
        return np.abs(-1.0 - cos)
    if variant == "cos_squared":
        return cos**2
    raise LossError(f"unknown dissimilarity {variant!r}; choose from {VARIANTS}")


def _dissim_slope(variant: str, cos):
    # np.sign(0) == 0 gives the zero subgradient at the |.| kinks
    if variant == "abs_cos":
        return np.sign(cos)
    if variant == "shifted_cos":
        return np.sign(1.0 + cos)
    return 2.0 * cos


def dissim(variant: str, e1, e2) -> float:
    return float(dissim_from_cos(variant, cosine(e1, e2)))


def _mask(target):
    return np.asarray(target.mask, bool)


def loss_l1(pred: Prediction, target: TrainingTarget):
    cos = _cosine(target.embedding, pred.embedding)[0]
    return np.sum(np.where(_mask(target), 1.0 - cos, 0.0), axis=-1)


def loss_l2(pred: Prediction, target: TrainingTarget, variant: str = "cos_squared"):
    cos = _cosine(target.embedding, pred.embedding)[0]
    return np.sum(np.where(_mask(target), 0.0, dissim_from_cos(variant, cos)), axis=-1)


def _loc_terms(pred, target, duration_weight):
    m = _mask(target)
    dt = np.where(m, target.duration, 1.0)
    if np.any(dt <= 0) or np.any(pred.duration[m] <= 0):
        raise LossError("durations must be positive")
    dc = np.where(m, target.rel_center - pred.center, 0.0)
    ds = np.where(m, np.sqrt(dt) - np.sqrt(np.where(m, pred.duration, 1.0)), 0.0)
    return m, dc, ds


def loss_l3(pred: Prediction, target: TrainingTarget, duration_weight: float = 1.0):
    _, dc, ds = _loc_terms(pred, target, duration_weight)
    return np.sum(dc**2 + duration_weight * ds**2, axis=-1)


def loss_components(pred: Prediction, target: TrainingTarget, weights: LossWeights):
    """Unweighted (l1, l2, l3), each shaped like the batch."""
    return (
        loss_l1(pred, target),
        loss_l2(pred, target, weights.variant),
        loss_l3(pred, target, weights.duration),
    )


def loss_total(pred: Prediction, target: TrainingTarget, weights: LossWeights):
    l1, l2, l3 = loss_components(pred, target, weights)
    return weights.detection * l1 + weights.dissimilarity * l2 + weights.localization * l3


def loss_gradient(pred: Prediction, target: TrainingTarget, weights: LossWeights) -> PredictionGrad:
    """Gradient of ``loss_total`` for each example (no batch averaging)."""
    m = _mask(target)
    cos, nf, ng, _ = _cosine(target.embedding, pred.embedding)
    dcos = _cosine_grad(np.asarray(target.embedding, float), pred.embedding, cos, nf, ng)
    slope = np.where(
        m, -weights.detection, weights.dissimilarity * _dissim_slope(weights.variant, cos)
    )
    d_emb = slope[..., None] * dcos

    _, dc, ds = _loc_terms(pred, target, weights.duration)
    sq = np.sqrt(pred.duration)
    d_center = -2.0 * weights.localization * dc
    d_duration = np.where(m, -weights.localization * weights.duration * ds / sq, 0.0)
    return PredictionGrad(d_emb, d_center, d_duration)


def batch_objective(pred: Prediction, target: TrainingTarget, weights: LossWeights):
    """Mean loss over the batch, weighted component means, and the matching gradient."""
    l1, l2, l3 = loss_components(pred, target, weights)
    B = l1.shape[0]
    parts = np.array([
        weights.detection * l1.mean(),
        weights.dissimilarity * l2.mean(),
        weights.localization * l3.mean(),
    ])
    total = float((weights.detection * l1 + weights.dissimilarity * l2 + weights.localization * l3).mean())
    g = loss_gradient(pred, target, weights)
    g = PredictionGrad(g.embedding / B, g.center / B, g.duration / B)
    return total, parts, g
