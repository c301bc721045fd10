"""Mini-batch Adam training of the grid detector."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import loss as L
from .loss import LossWeights, TrainingTarget
from .net import ModelParameters, backward, forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergedError(TrainingError):
    """Loss went non-finite; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, msg, last_good: ModelParameters, history: "TrainHistory"):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    weights: LossWeights = LossWeights()
    clip_norm: float | None = None
    patience: int | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update.  Returns new ``(params, state)``; inputs are not mutated."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * (g * g)
        new_params[k] = p - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(t, new_m, new_v)


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    components: list[tuple[float, float, float]] = field(default_factory=list)
    val_ap: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch, loss, components, val_ap, seconds):
        self.epochs.append(epoch)
        self.loss.append(loss)
        self.components.append(tuple(float(c) for c in components))
        self.val_ap.append(val_ap)
        self.seconds.append(seconds)

    def __len__(self):
        return len(self.epochs)

    def rows(self):
        for i in range(len(self)):
            l1, l2, l3 = self.components[i]
            yield {
                "epoch": self.epochs[i],
                "loss": self.loss[i],
                "l1": l1,
                "l2": l2,
                "l3": l3,
                "val_ap": self.val_ap[i],
                "seconds": self.seconds[i],
            }


@dataclass
class TrainResult:
    model: ModelParameters
    best_model: ModelParameters
    history: TrainHistory
    optimizer: AdamState
    best_epoch: int | None


def _batch_target(examples, idx):
    return TrainingTarget(
        examples.embeddings[idx],
        examples.mask[idx],
        examples.rel_center[idx],
        examples.duration[idx],
    )


def _clip(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def evaluate_loss(model: ModelParameters, examples, weights: LossWeights, batch_size: int = 256):
    """Mean loss and weighted component means at fixed parameters (inference mode)."""
    totals = 0.0
    parts = np.zeros(3)
    n = len(examples)
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(s + batch_size, n))
        x = examples.features[examples.utt_index[idx]]
        pred, _ = forward(model, x, examples.embeddings[idx])
        l1, l2, l3 = L.loss_components(pred, _batch_target(examples, idx), weights)
        parts += [weights.detection * l1.sum(), weights.dissimilarity * l2.sum(),
                  weights.localization * l3.sum()]
        totals += float((weights.detection * l1 + weights.dissimilarity * l2
                         + weights.localization * l3).sum())
    return totals / n, parts / n


def train(
    model: ModelParameters,
    examples,
    config: TrainConfig,
    validate: Callable[[ModelParameters], float] | None = None,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    frozen: frozenset = frozenset(),
    on_epoch: Callable | None = None,
) -> TrainResult:
    """Shuffled mini-batch training.

    ``validate`` maps a model to a validation AP; the best-scoring
    parameters are kept in ``TrainResult.best_model``.  ``on_epoch`` is called
    as ``on_epoch(epoch, model, optimizer, history)`` after each epoch and is
    how the CLI writes checkpoints.
    """
    if len(examples) == 0:
        raise TrainingError("no training examples")
    if examples.features.shape[1:] != (model.config.input_frames, model.config.input_dim):
        raise TrainingError("example features do not match the model input shape")
    if examples.embeddings.shape[1] != model.config.embedding_dim:
        raise TrainingError("example embeddings do not match the model embedding size")

    opt = optimizer or AdamState()
    history = TrainHistory()
    best_model, best_ap, best_epoch = model, -np.inf, None
    stale = 0
    n = len(examples)

    for epoch in range(start_epoch, start_epoch + config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sum_loss, sum_parts = 0.0, np.zeros(3)
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            x = examples.features[examples.utt_index[idx]]
            pred, state = forward(model, x, examples.embeddings[idx], train=True)
            total, parts, g = L.batch_objective(pred, _batch_target(examples, idx), config.weights)
            if not np.isfinite(total):
                raise DivergedError(f"non-finite loss at epoch {epoch}", model, history)
            grads = backward(model, state, g, frozen=frozen)
            if config.clip_norm:
                grads = _clip(grads, config.clip_norm)
            new_params, opt = adam_step(model.params, grads, opt, config)
            model = replace(model, params=new_params, buffers=state.new_buffers)
            sum_loss += total * len(idx)
            sum_parts += parts * len(idx)
        val_ap = float(validate(model)) if validate is not None else float("nan")
        history.append(epoch, sum_loss / n, sum_parts / n, val_ap, time.perf_counter() - t0)
        log.info(
            "epoch %d loss %.4f (l1 %.4f l2 %.4f l3 %.4f) val_ap %.4f %.1fs",
            epoch, sum_loss / n, *(sum_parts / n), val_ap, history.seconds[-1],
        )
        if validate is not None:
            if val_ap > best_ap:
                best_model, best_ap, best_epoch, stale = model, val_ap, epoch, 0
            else:
                stale += 1
        if on_epoch is not None:
            on_epoch(epoch, model, opt, history)
        if config.patience is not None and stale >= config.patience:
            log.info("early stop after %d epochs without validation gain", stale)
            break

    if validate is None:
        best_model = model
    return TrainResult(model, best_model, history, opt, best_epoch)


# --------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class Preset:
    name: str
    num_cells: int
    weights: LossWeights
    embedding_dim: int


FULL_EMBEDDING_DIM = 1024
DESK_EMBEDDING_DIM = 64

_PRESETS = {
    "single_word": (1, (0.5, 1.0, 2.0)),
    "multi_word": (3, (1.0, 0.5, 3.0)),
}


def preset(name: str, variant: str = "cos_squared", full_dim: bool = False,
           duration_weight: float = 1.0) -> Preset:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(_PRESETS))}")
    cells, (l1, l2, l3) = _PRESETS[name]
    return Preset(
        name,
        cells,
        LossWeights(l1, l2, l3, duration_weight, variant),
        FULL_EMBEDDING_DIM if full_dim else DESK_EMBEDDING_DIM,
    )
