"""End-to-end glue: examples from a corpus, training with validation AP, test evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import detect, metrics
from .config import RunConfig, derive_seed
from .embedding import HashEmbedder
from .grid import CellGrid, CellLocal
from .net import ModelParameters, init_params
from .synthcorpus import Corpus, ExampleSet, TrialSpec, make_training_examples, make_trials
from .pretrain import pretrain_encoder
from .trainer import AdamState, TrainResult, train

log = logging.getLogger(__name__)

SUBSETS = ("IV", "OOV", "all")


def grid_for(corpus: Corpus, cfg: RunConfig) -> CellGrid:
    return CellGrid(corpus.config.frames, cfg.preset().num_cells)


def embedder_for(cfg: RunConfig) -> HashEmbedder:
    return HashEmbedder(cfg.embedding_dim(), seed=derive_seed(cfg.seed, "embedding") % 2**63)


def training_examples(corpus: Corpus, cfg: RunConfig) -> ExampleSet:
    return make_training_examples(
        corpus, grid_for(corpus, cfg), embedder_for(cfg),
        negative_ratio=cfg.train.negative_ratio, seed=derive_seed(cfg.seed, "examples"),
    )


def subset_terms(corpus: Corpus, subset: str) -> list[str]:
    if subset == "IV":
        return list(corpus.iv_terms)
    if subset == "OOV":
        return list(corpus.oov_terms)
    if subset == "all":
        return list(corpus.iv_terms) + list(corpus.oov_terms)
    raise ValueError(f"unknown term subset {subset!r}; choose from {SUBSETS}")


# --------------------------------------------------------------------------
# scoring


@dataclass
class TrialScores:
    specs: list[TrialSpec]
    scored: detect.ScoredTrials
    grid: CellGrid

    def predicted_span(self, n: int):
        b = int(self.scored.best_cell[n])
        return self.grid.to_absolute_span(
            CellLocal(b, float(self.scored.centers[n, b]), float(self.scored.durations[n, b]))
        )

    def trials(self) -> list[metrics.Trial]:
        return [
            metrics.Trial(s.utterance_id, s.term_id, s.label, float(self.scored.scores[n]),
                          self.predicted_span(n), s.reference)
            for n, s in enumerate(self.specs)
        ]

    def subset(self, term_ids) -> "TrialScores":
        keep = set(term_ids)
        idx = [n for n, s in enumerate(self.specs) if s.term_id in keep]
        sc = self.scored
        return TrialScores(
            [self.specs[n] for n in idx],
            detect.ScoredTrials(sc.scores[idx], sc.best_cell[idx], sc.cell_scores[idx],
                                sc.centers[idx], sc.durations[idx]),
            self.grid,
        )

    @property
    def scores(self):
        return self.scored.scores

    @property
    def labels(self):
        return np.array([s.label for s in self.specs], dtype=bool)


class Scorer:
    """Fixed trial list for one split; scores any model against it."""

    def __init__(self, corpus: Corpus, cfg: RunConfig, split: str, terms: list[str]):
        self.utts = corpus.split(split)
        self.features = corpus.features(self.utts)
        self.specs = make_trials(self.utts, terms, ratio=cfg.eval.trial_ratio,
                                 seed=cfg.stream_seed("trials"))
        if not self.specs:
            raise ValueError(f"no scorable trials in split {split!r}")
        emb = embedder_for(cfg)
        table = {t: emb(corpus.term(t)) for t in sorted({s.term_id for s in self.specs})}
        self.fq = np.stack([table[s.term_id] for s in self.specs])
        self.utt_index = np.array([s.utt_index for s in self.specs], dtype=np.int64)
        self.grid = grid_for(corpus, cfg)
        self.batch_size = cfg.eval.batch_size

    def __call__(self, model: ModelParameters) -> TrialScores:
        sc = detect.score_trials(model, self.features, self.utt_index, self.fq, self.batch_size)
        return TrialScores(self.specs, sc, self.grid)

    def average_precision(self, model: ModelParameters) -> float:
        ts = self(model)
        return metrics.average_precision_scores(ts.scores, ts.labels)


# --------------------------------------------------------------------------
# training


def new_model(corpus: Corpus, cfg: RunConfig) -> ModelParameters:
    return init_params(cfg.net_config(corpus.config.frames, corpus.config.feature_dim))


def train_model(
    corpus: Corpus,
    cfg: RunConfig,
    model: ModelParameters | None = None,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
    epochs: int | None = None,
) -> TrainResult:
    """Train (or continue training) with best-validation-AP selection over all validation terms."""
    examples = training_examples(corpus, cfg)
    if model is None:
        model = new_model(corpus, cfg)
        if cfg.train.pretrain_epochs > 0:
            tc = replace(cfg.train_config(), epochs=cfg.train.pretrain_epochs)
            model = pretrain_encoder(model, corpus, tc, head_seed=cfg.stream_seed("head")).model
    val = Scorer(corpus, cfg, "validation", subset_terms(corpus, "all"))
    tc = cfg.train_config()
    if epochs is not None:
        tc = replace(tc, epochs=epochs)
    return train(model, examples, tc, validate=val.average_precision, optimizer=optimizer,
                 start_epoch=start_epoch, on_epoch=on_epoch)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: metrics.MetricReport
    threshold: detect.Threshold
    detections: list[dict]
    sweep: list[dict]


def tune(model: ModelParameters, corpus: Corpus, cfg: RunConfig, split: str = "validation") -> detect.Threshold:
    ts = Scorer(corpus, cfg, split, subset_terms(corpus, "all"))(model)
    return detect.tune_threshold(
        ts.scores, ts.labels, cfg.eval.objective,
        term_ids=[s.term_id for s in ts.specs], beta=cfg.eval.beta, tuning_set=split,
    )


def evaluate(
    model: ModelParameters,
    corpus: Corpus,
    cfg: RunConfig,
    split: str = "test",
    threshold: detect.Threshold | None = None,
    subsets=SUBSETS,
) -> Evaluation:
    """AP, MTWV and mean IOU of correct detections per term subset, at a tuned phi."""
    if threshold is None:
        threshold = tune(model, corpus, cfg)
    variant = cfg.train.dissim
    everything = Scorer(corpus, cfg, split, subset_terms(corpus, "all"))(model)
    report = metrics.MetricReport()
    twv_cfg = metrics.TwvConfig(beta=cfg.eval.beta)
    for subset in subsets:
        terms = subset_terms(corpus, subset)
        ts = everything.subset(terms)
        if not ts.specs:
            raise ValueError(f"subset {subset} has no trials in split {split!r}")
        trials = ts.trials()
        theta, value = metrics.mtwv(trials, twv_cfg)
        report.add("ap", subset, variant, metrics.average_precision(trials))
        report.add("mtwv", subset, variant, value)
        report.add("mtwv_theta", subset, variant, theta)
        try:
            report.add("mean_iou", subset, variant, metrics.mean_iou_correct(trials, threshold.phi))
        except metrics.MetricError as e:
            log.warning("%s: %s", subset, e)
            report.add("mean_iou", subset, variant, float("nan"))
        report.add("n_trials", subset, variant, len(trials))
    report.add("phi", "all", variant, threshold.phi)

    detections = []
    for n, s in enumerate(everything.specs):
        for c, score in enumerate(everything.scored.cell_scores[n]):
            if score > threshold.phi:
                span = everything.grid.to_absolute_span(
                    CellLocal(c, float(everything.scored.centers[n, c]),
                              float(everything.scored.durations[n, c]))
                )
                detections.append({"utterance_id": s.utterance_id, "term_id": s.term_id,
                                   "score": float(score), "start": span.start, "end": span.end,
                                   "cell": c})
    sweep = metrics.twv_sweep(everything.trials(), twv_cfg)
    return Evaluation(report, threshold, detections, sweep)
