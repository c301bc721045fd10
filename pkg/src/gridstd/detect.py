"""Inference: cosine scoring of cells, thresholded detection, threshold tuning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import metrics
from .grid import CellGrid, CellLocal, EventSpan
from .net import ModelParameters, Prediction, decode, encode, head

OBJECTIVES = ("f1", "mtwv")


class DetectError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    cell_index: int
    score: float
    span: EventSpan


@dataclass(frozen=True)
class Threshold:
    phi: float
    objective: str
    value: float
    tuning_set: str = "validation"

    def __post_init__(self):
        if not -1.0 <= self.phi <= 1.0:
            raise DetectError(f"threshold {self.phi} outside the cosine range")


def score_cells(pred: Prediction, fq) -> np.ndarray:
    """Cosine between the query and each cell's predicted embedding; works batched."""
    f = np.asarray(pred.embedding, dtype=float)
    q = np.asarray(fq, dtype=float)
    nf = np.linalg.norm(f, axis=-1)
    nq = np.linalg.norm(q, axis=-1)
    if np.any(nf == 0) or np.any(nq == 0):
        raise DetectError("cosine undefined for a zero-norm embedding")
    cos = np.einsum("...k,...ck->...c", q, f) / (nq[..., None] * nf)
    return np.clip(cos, -1.0, 1.0)


def _span(grid, i, pred):
    return grid.to_absolute_span(CellLocal(i, float(pred.center[i]), float(pred.duration[i])))


def detect(pred: Prediction, fq, phi: float, grid: CellGrid) -> list[Detection]:
    """One detection per cell whose score is strictly above ``phi``."""
    scores = score_cells(pred, fq)
    return [
        Detection(i, float(s), _span(grid, i, pred))
        for i, s in enumerate(scores)
        if s > phi
    ]


def utterance_score(pred: Prediction, fq) -> tuple[float, int]:
    """Max cell score and its cell (lowest index on ties)."""
    scores = score_cells(pred, fq)
    best = int(np.argmax(scores))
    return float(scores[best]), best


def _f1(scores, labels, phi) -> Fraction:
    # 2PR/(P+R) simplifies to 2tp / (accepted + positives); kept exact for tie-breaking
    accept = scores > phi
    tp = int(np.sum(accept & labels))
    return Fraction(2 * tp, int(np.sum(accept)) + int(np.sum(labels)))


def threshold_candidates(scores) -> list[float]:
    """Midpoints between adjacent distinct scores plus the sentinels -1 and 1."""
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[:-1] + u[1:]) / 2.0
    return sorted({-1.0, 1.0, *map(float, mids)})


def tune_threshold(
    scores: Sequence[float],
    labels: Sequence[bool],
    objective: str = "f1",
    term_ids: Sequence[str] | None = None,
    beta: float = 1.0,
    tuning_set: str = "validation",
) -> Threshold:
    """Sweep candidate thresholds and keep the best (smallest on ties)."""
    if objective not in OBJECTIVES:
        raise DetectError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if len(scores) == 0 or labels.all() or not labels.any():
        raise DetectError("threshold tuning needs both positive and negative trials")
    if np.all(scores == scores[0]):
        raise DetectError("all scores are identical; no threshold separates anything")
    cands = threshold_candidates(scores)
    if objective == "f1":
        values = [_f1(scores, labels, phi) for phi in cands]
    else:
        if term_ids is None:
            raise DetectError("MTWV objective needs per-trial term ids")
        trials = [
            metrics.Trial("", t, bool(l), float(s), None, EventSpan(0, 1) if l else None)
            for s, l, t in zip(scores, labels, term_ids)
        ]
        values = [v for _, _, v in metrics._twv_values(metrics._term_arrays(trials), cands, beta)]
    best = 0
    for j in range(1, len(cands)):
        if values[j] > values[best]:
            best = j
    return Threshold(cands[best], objective, float(values[best]), tuning_set)


# --------------------------------------------------------------------------
# batch scoring of (utterance, term) trials


@dataclass
class ScoredTrials:
    scores: np.ndarray  # (N,)
    best_cell: np.ndarray  # (N,)
    cell_scores: np.ndarray  # (N, C)
    centers: np.ndarray  # (N, C)
    durations: np.ndarray  # (N, C)


def score_trials(model: ModelParameters, features: np.ndarray, utt_index, fq, batch_size: int = 512) -> ScoredTrials:
    """Encode each utterance once, then run the head for every (utterance, term) pair.

    Output order follows the trial order, whatever the batch size.
    """
    utt_index = np.asarray(utt_index, dtype=np.int64)
    fq = np.asarray(fq, dtype=float)
    hs = []
    for s in range(0, len(features), batch_size):
        h, _ = encode(model, np.asarray(features[s : s + batch_size], dtype=float), train=False)
        hs.append(h)
    H = np.concatenate(hs) if hs else np.zeros((0, model.config.encoder_output_dim))
    cell_scores, centers, durations = [], [], []
    for s in range(0, len(utt_index), batch_size):
        raw, _ = head(model, H[utt_index[s : s + batch_size]], fq[s : s + batch_size])
        pred, _, _ = decode(model.config, raw)
        cell_scores.append(score_cells(pred, fq[s : s + batch_size]))
        centers.append(pred.center)
        durations.append(pred.duration)
    cs = np.concatenate(cell_scores)
    best = np.argmax(cs, axis=1)
    return ScoredTrials(
        scores=cs[np.arange(len(cs)), best],
        best_cell=best,
        cell_scores=cs,
        centers=np.concatenate(centers),
        durations=np.concatenate(durations),
    )


def write_detections(path, rows) -> None:
    """JSON Lines ``{utterance_id, term_id, score, start, end, cell}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({k: r[k] for k in ("utterance_id", "term_id", "score", "start", "end", "cell")}) + "\n")
