"""Central finite-difference checks of the loss and network gradients.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
The floor keeps near-zero partials from being judged on the O(step^2)
truncation error of the difference quotient alone.  Coordinates whose +/-
perturbation flips a ReLU or max-pool selection are skipped (the function is not differentiable there), as are loss instances
sitting within ``kink_margin`` of an absolute-value kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import loss as L
from .loss import LossWeights, TrainingTarget
from .net import (ConvBlock, ModelParameters, NetConfig, Prediction, activation_pattern, backward, decode,
                  encode, forward, head, init_params)

STEP = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-4
KINK_MARGIN = 1e-3


def relative_error(a, n, floor: float = FLOOR):
    a = np.asarray(a, float)
    n = np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x``; ``x`` is restored afterwards."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f()
        flat[j] = orig - step
        fm = f()
        flat[j] = orig
        gf[j] = (fp - fm) / (2 * step)
    return g


@dataclass
class CheckResult:
    max_error: dict[str, float] = field(default_factory=dict)
    instances: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    def update(self, name, err, skipped=0):
        self.max_error[name] = max(self.max_error.get(name, 0.0), float(err))
        self.instances[name] = self.instances.get(name, 0) + 1
        self.skipped[name] = self.skipped.get(name, 0) + skipped

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_error.values())

    def merge(self, other: "CheckResult") -> "CheckResult":
        for k, v in other.max_error.items():
            self.max_error[k] = max(self.max_error.get(k, 0.0), v)
            self.instances[k] = self.instances.get(k, 0) + other.instances[k]
            self.skipped[k] = self.skipped.get(k, 0) + other.skipped.get(k, 0)
        self.seconds += other.seconds
        return self


# --------------------------------------------------------------------------
# loss w.r.t. the prediction


def random_loss_instance(rng, num_cells: int, dim: int, frames: int = 24, variant: str = "cos_squared"):
    """A random (prediction, target) pair away from the |.| kinks of ``variant``."""
    width = frames // num_cells
    while True:
        fq = rng.standard_normal(dim)
        fq /= np.linalg.norm(fq)
        emb = rng.standard_normal((num_cells, dim))
        mask = np.zeros(num_cells, bool)
        if rng.random() < 0.8:
            mask[rng.integers(num_cells)] = True
        cos = emb @ fq / np.linalg.norm(emb, axis=1)
        neg = cos[~mask]
        if variant == "abs_cos" and np.any(np.abs(neg) < KINK_MARGIN):
            continue
        if variant == "shifted_cos" and np.any(np.abs(1.0 + neg) < KINK_MARGIN):
            continue
        break
    pred = Prediction(
        embedding=emb,
        center=rng.uniform(0, width, num_cells),
        duration=rng.uniform(0.5, frames, num_cells),
        raw=np.zeros((num_cells, dim + 2)),
    )
    target = TrainingTarget(
        fq,
        mask,
        np.where(mask, rng.uniform(0, width, num_cells), 0.0),
        np.where(mask, rng.uniform(1.0, frames, num_cells), 0.0),
    )
    return pred, target


def _single_component_weights(base: LossWeights, which: int) -> LossWeights:
    lams = [0.0, 0.0, 0.0]
    lams[which] = 1.0
    return LossWeights(*lams, base.duration, base.variant)


def check_loss_instance(pred: Prediction, target: TrainingTarget, weights: LossWeights) -> dict[str, float]:
    """Max relative error of ``loss_gradient`` against central differences, per component."""
    out = {}
    named = [(f"l1", _single_component_weights(weights, 0)),
             (f"l2[{weights.variant}]", _single_component_weights(weights, 1)),
             ("l3", _single_component_weights(weights, 2)),
             (f"total[{weights.variant}]", weights)]
    for name, w in named:
        g = L.loss_gradient(pred, target, w)
        f = lambda: float(L.loss_total(pred, target, w))
        errs = [
            relative_error(g.embedding, central_difference(f, pred.embedding)).max(),
            relative_error(g.center, central_difference(f, pred.center)).max(),
            relative_error(g.duration, central_difference(f, pred.duration)).max(),
        ]
        out[name] = float(max(errs))
    return out


def check_loss(n_instances: int = 100, seed: int = 0, max_cells: int = 3, max_dim: int = 16) -> CheckResult:
    t0 = time.perf_counter()
    res = CheckResult()
    for i in range(n_instances):
        rng = np.random.default_rng([seed, 11, i])
        C = int(rng.integers(1, max_cells + 1))
        K = int(rng.integers(8, max_dim + 1))
        for variant in L.VARIANTS:
            lam = rng.uniform(0.1, 3.0, 4)
            w = LossWeights(lam[0], lam[1], lam[2], lam[3], variant)
            pred, target = random_loss_instance(rng, C, K, frames=24 * C, variant=variant)
            for name, err in check_loss_instance(pred, target, w).items():
                res.update(name, err)
    res.seconds = time.perf_counter() - t0
    return res


# --------------------------------------------------------------------------
# network parameters, end to end through the loss

SMALL_PROJECTIONS = ("relu", "none", "linear")


def small_config(i: int, seed: int = 0) -> NetConfig:
    """Tiny networks cycling through projection, normalization and pooling choices."""
    return NetConfig(
        input_frames=12,
        input_dim=4,
        embedding_dim=8,
        num_cells=2,
        encoder_output_dim=8 if SMALL_PROJECTIONS[i % 3] != "none" else None,
        blocks=(ConvBlock(4, 3), ConvBlock(6, 3)),
        projection=SMALL_PROJECTIONS[i % 3],
        normalize_activations=bool(i % 2),
        pool_type="max" if i % 4 < 2 else "avg",
        seed=seed,
    )


def _random_targets(rng, cfg: NetConfig, batch: int):
    fq = rng.standard_normal((batch, cfg.embedding_dim))
    fq /= np.linalg.norm(fq, axis=1, keepdims=True)
    mask = np.zeros((batch, cfg.num_cells), bool)
    for b in range(batch):
        if rng.random() < 0.75:
            mask[b, rng.integers(cfg.num_cells)] = True
    c = np.where(mask, rng.uniform(0, cfg.cell_width, mask.shape), 0.0)
    d = np.where(mask, rng.uniform(1.0, cfg.input_frames, mask.shape), 0.0)
    return fq, TrainingTarget(fq, mask, c, d)


def _pattern_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_network_instance(model: ModelParameters, x, target: TrainingTarget, weights: LossWeights):
    """Returns ``(max relative error, n_checked, n_skipped)`` over every parameter."""
    pred, state = forward(model, x, target.embedding, train=True)
    _, _, g = L.batch_objective(pred, target, weights)
    analytic = backward(model, state, g)
    base_pattern = activation_pattern(state)

    def objective():
        p, s = forward(model, x, target.embedding, train=True)
        return float(L.loss_total(p, target, weights).mean()), activation_pattern(s)

    # the head is linear and sits after every kink, so its partials can reuse h
    h, _ = encode(model, x, train=True)

    def head_objective():
        raw, _ = head(model, h, target.embedding)
        p, _, _ = decode(model.config, raw)
        return float(L.loss_total(p, target, weights).mean()), base_pattern

    worst, checked, skipped = 0.0, 0, 0
    for name, arr in model.params.items():
        f = head_objective if name.startswith("head.") else objective
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + STEP
            fp, pat_p = f()
            flat[j] = orig - STEP
            fm, pat_m = f()
            flat[j] = orig
            if not (_pattern_equal(pat_p, base_pattern) and _pattern_equal(pat_m, base_pattern)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * STEP)
            worst = max(worst, float(relative_error(ga[j], num)))
            checked += 1
    return worst, checked, skipped


def check_network(n_instances: int = 100, seed: int = 0, batch: int = 3) -> CheckResult:
    t0 = time.perf_counter()
    res = CheckResult()
    i = -1
    while res.instances.get("network", 0) < n_instances:
        i += 1
        rng = np.random.default_rng([seed, 23, i])
        cfg = small_config(i, seed=int(rng.integers(2**31)))
        model = init_params(cfg)
        # jitter biases and norm parameters off their init values
        for k, v in model.params.items():
            if k.endswith(".b") or k.startswith("bn"):
                v += rng.normal(0, 0.1, v.shape)
        x = rng.standard_normal((batch, cfg.input_frames, cfg.input_dim))
        _, target = _random_targets(rng, cfg, batch)
        variant = L.VARIANTS[i % 3]
        w = LossWeights(*rng.uniform(0.1, 3.0, 4), variant=variant)
        pred, _ = forward(model, x, target.embedding, train=True)
        cos = L._cosine(target.embedding, pred.embedding)[0][~target.mask]
        if variant == "abs_cos" and np.any(np.abs(cos) < KINK_MARGIN):
            continue
        if variant == "shifted_cos" and np.any(np.abs(1 + cos) < KINK_MARGIN):
            continue
        err, checked, skipped = check_network_instance(model, x, target, w)
        res.update("network", err, skipped)
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(n_instances: int = 100, seed: int = 0) -> CheckResult:
    return check_loss(n_instances, seed).merge(check_network(n_instances, seed))
