"""Optional encoder warm-up on a synthetic closed-vocabulary task.

The encoder learns to tag which of ``num_classes`` lexicon words occur in an
utterance (independent sigmoid outputs, binary cross-entropy).  Afterwards
the detector head is reinitialized with ``net.replace_head`` so only the
encoder weights carry over.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .net import ModelParameters, encode, encoder_backward, replace_head
from .trainer import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)

NUM_CLASSES = 30


@dataclass
class PretrainResult:
    model: ModelParameters
    losses: list[float]
    classes: list[str]


def presence_labels(utterances, classes: list[str]) -> np.ndarray:
    col = {t: i for i, t in enumerate(classes)}
    y = np.zeros((len(utterances), len(classes)))
    for u, utt in enumerate(utterances):
        for ev in utt.events:
            if ev.term in col:
                y[u, col[ev.term]] = 1.0
    return y


def _bce(logits, y):
    # log(1 + exp(-|z|)) form keeps large logits finite
    loss = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    p = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.sum(axis=1).mean()), (p - y) / len(y)


def pretrain_encoder(
    model: ModelParameters,
    corpus,
    config: TrainConfig,
    num_classes: int = NUM_CLASSES,
    head_seed: int = 0,
) -> PretrainResult:
    """Train encoder + a linear tagger on the training split, then swap in a fresh head."""
    train = corpus.split("train")
    classes = list(corpus.iv_terms[:num_classes])
    x = corpus.features(train)
    y = presence_labels(train, classes)
    rng = np.random.default_rng([config.seed, 101])
    M = model.config.encoder_output_dim
    params = {k: v for k, v in model.params.items() if not k.startswith("head.")}
    params["cls.w"] = rng.uniform(-1, 1, (M, len(classes))) / np.sqrt(M)
    params["cls.b"] = np.zeros(len(classes))
    opt = AdamState()
    buffers = model.buffers
    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 101, epoch]).permutation(len(x))
        total = 0.0
        for s in range(0, len(x), config.batch_size):
            idx = order[s : s + config.batch_size]
            enc_model = replace(model, params={**model.params, **params}, buffers=buffers)
            h, cache = encode(enc_model, x[idx], train=True)
            logits = h @ params["cls.w"] + params["cls.b"]
            loss, d_logits = _bce(logits, y[idx])
            grads = encoder_backward(enc_model, cache, d_logits @ params["cls.w"].T)
            grads["cls.w"] = h.T @ d_logits
            grads["cls.b"] = d_logits.sum(axis=0)
            params, opt = adam_step(params, grads, opt, config)
            buffers = cache.new_buffers
            total += loss * len(idx)
        losses.append(total / len(x))
        log.info("pretrain epoch %d bce %.4f", epoch, losses[-1])
    encoder = {k: v for k, v in params.items() if not k.startswith("cls.")}
    warmed = replace(model, params={**model.params, **encoder}, buffers=buffers)
    fresh = replace_head(warmed, model.config.num_cells, model.config.embedding_dim, head_seed)
    return PretrainResult(fresh, losses, classes)
