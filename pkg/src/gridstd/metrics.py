"""Ranking and localization metrics for spoken term detection.

* ``average_precision``: mean of precision@k over the ranks of the positives.
* ``iou``: temporal intersection-over-union of two spans.
* ``twv`` / ``mtwv``: term-weighted value ``1 - mean_term(P_miss + beta*P_FA)``
  with trial-based probabilities, and its maximum over decision thresholds.

A trial is accepted at threshold ``theta`` iff ``score > theta`` (strict),
matching the detector's decision rule.

AP and TWV are accumulated in exact rational arithmetic and rounded once, so
results do not depend on summation order and threshold ties are real ties.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import EventSpan

NIST_BETA = 999.9


class MetricError(ValueError):
    pass


@dataclass
class Trial:
    utterance_id: str
    term_id: str
    label: bool
    score: float
    predicted: EventSpan | None = None
    reference: EventSpan | None = None

    def __post_init__(self):
        if self.label != (self.reference is not None):
            raise MetricError(
                f"trial {self.utterance_id}/{self.term_id}: reference span must be present iff label is true"
            )


@dataclass
class TwvConfig:
    beta: float = 1.0
    thresholds: Sequence[float] | None = None

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise MetricError(f"beta must be finite and non-negative, got {self.beta}")
        if self.thresholds is not None and len(self.thresholds) == 0:
            raise MetricError("threshold grid is empty")


def _scores_labels(trials):
    scores = np.array([t.score for t in trials], dtype=float)
    labels = np.array([bool(t.label) for t in trials])
    return scores, labels


def average_precision_scores(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise MetricError("average precision needs at least one positive trial")
    # stable: ties keep input order
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)[ranked]
    ranks = np.flatnonzero(ranked) + 1
    total = sum(Fraction(int(h), int(k)) for h, k in zip(hits, ranks))
    return float(total / len(ranks))


def average_precision(trials: Sequence[Trial]) -> float:
    return average_precision_scores(*_scores_labels(trials))


def iou(a: EventSpan, b: EventSpan) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.duration + b.duration - inter
    return inter / union


def mean_iou_correct(trials: Sequence[Trial], phi: float) -> float:
    """Mean IOU over positive trials accepted at ``phi`` (score > phi)."""
    correct = [t for t in trials if t.label and t.score > phi]
    if not correct:
        n_pos = sum(1 for t in trials if t.label)
        raise MetricError(f"no correctly detected instances at phi={phi} (0 of {n_pos} positives)")
    missing = [t for t in correct if t.predicted is None]
    if missing:
        raise MetricError(f"{len(missing)} correctly detected trial(s) lack a predicted span")
    return float(np.mean([iou(t.predicted, t.reference) for t in correct]))


def _group_by_term(trials):
    groups: "OrderedDict[str, list[Trial]]" = OrderedDict()
    for t in trials:
        groups.setdefault(t.term_id, []).append(t)
    for term, ts in groups.items():
        n_tgt = sum(1 for t in ts if t.label)
        if n_tgt == 0 or n_tgt == len(ts):
            raise MetricError(f"term {term!r} needs at least one target and one non-target trial")
    return groups


def _term_arrays(trials):
    """Per term: sorted target scores and sorted non-target scores."""
    out = []
    for ts in _group_by_term(trials).values():
        scores, labels = _scores_labels(ts)
        out.append((np.sort(scores[labels]), np.sort(scores[~labels])))
    return out


def _counts(arrays, thetas):
    """Miss and false-alarm counts, each ``(n_terms, n_thetas)``, for ``score > theta`` acceptance."""
    thetas = np.asarray(thetas, dtype=float)
    miss = np.stack([np.searchsorted(tgt, thetas, side="right") for tgt, _ in arrays])
    fa = np.stack([len(non) - np.searchsorted(non, thetas, side="right") for _, non in arrays])
    return miss, fa


def _exact_rates(arrays, miss, fa, j):
    n = len(arrays)
    p_miss = sum(Fraction(int(miss[t, j]), len(arrays[t][0])) for t in range(n)) / n
    p_fa = sum(Fraction(int(fa[t, j]), len(arrays[t][1])) for t in range(n)) / n
    return p_miss, p_fa


def _twv_values(arrays, thetas, beta):
    miss, fa = _counts(arrays, thetas)
    b = Fraction(beta)
    out = []
    for j in range(len(thetas)):
        p_miss, p_fa = _exact_rates(arrays, miss, fa, j)
        out.append((p_miss, p_fa, 1 - (p_miss + b * p_fa)))
    return out


def twv(trials: Sequence[Trial], theta: float, beta: float = 1.0) -> float:
    return float(_twv_values(_term_arrays(trials), [theta], beta)[0][2])


def score_midpoints(scores) -> list[float]:
    """Midpoints between adjacent distinct scores, plus a reject-everything sentinel above.

    There is no accept-everything sentinel.  Its TWV is ``1 - beta``, which at
    ``beta=1`` ties the reject-all value of 0 and would then win the
    smallest-theta tie rule.
    """
    u = np.unique(np.asarray(scores, dtype=float))
    mids = list((u[:-1] + u[1:]) / 2.0)
    return [*map(float, mids), float(u[-1] + 1.0)]


def _grid(trials, config):
    grid = config.thresholds
    if grid is None:
        grid = score_midpoints([t.score for t in trials])
    return sorted(float(g) for g in grid)


def mtwv(trials: Sequence[Trial], config: TwvConfig | None = None) -> tuple[float, float]:
    """``(best_theta, MTWV)``; ties resolve to the smallest threshold."""
    config = config or TwvConfig()
    grid = _grid(trials, config)
    values = _twv_values(_term_arrays(trials), grid, config.beta)
    best = 0
    for j in range(1, len(grid)):
        if values[j][2] > values[best][2]:
            best = j
    return grid[best], float(values[best][2])


def twv_sweep(trials: Sequence[Trial], config: TwvConfig | None = None) -> list[dict]:
    """DET-style rows ``(theta, p_miss, p_fa, twv)`` over the threshold grid."""
    config = config or TwvConfig()
    grid = _grid(trials, config)
    values = _twv_values(_term_arrays(trials), grid, config.beta)
    return [{"theta": theta, "p_miss": float(pm), "p_fa": float(pf), "twv": float(v)}
            for theta, (pm, pf, v) in zip(grid, values)]


# --------------------------------------------------------------------------
# reports


REPORT_FIELDS = ("metric", "subset", "dissim_variant", "value")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, metric: str, subset: str, variant: str, value: float) -> None:
        self.rows.append({"metric": metric, "subset": subset, "dissim_variant": variant,
                          "value": float(value)})

    def value(self, metric: str, subset: str) -> float:
        for r in self.rows:
            if r["metric"] == metric and r["subset"] == subset:
                return r["value"]
        raise KeyError((metric, subset))

    def write_csv(self, path) -> None:
        write_rows(path, self.rows, REPORT_FIELDS)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_rows(path, rows: Iterable[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})
