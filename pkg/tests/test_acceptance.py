"""Acceptance criteria 1-7.  Each test records one PASS/FAIL line, shown in the run summary."""

import time
from fractions import Fraction

import numpy as np
import pytest

from gridstd import cli, gradcheck, metrics, pipeline
from gridstd import loss as L
from gridstd.config import dump_config, load_config
from gridstd.grid import CellGrid, CellLocal, EventSpan
from gridstd.loss import LossWeights, TrainingTarget
from gridstd.metrics import Trial
from gridstd.net import Prediction
from gridstd.synthcorpus import generate
from gridstd.trainer import preset

from conftest import SMALL_OVERRIDES
from oracles import ap_bruteforce, mtwv_bruteforce

pytestmark = pytest.mark.slow

TRAIN_BUDGET_S = 15 * 60
IV_AP_MIN, OOV_AP_MIN, IV_IOU_MIN = 0.90, 0.65, 0.60


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    res = gradcheck.run_suite(100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(res.max_error.values())
    per = ", ".join(f"{k}={v:.1e}" for k, v in sorted(res.max_error.items()))
    enough = min(res.instances.values()) >= 100
    criterion(1, worst < 1e-4 and elapsed < 60 and enough,
              f"max rel err {worst:.2e} < 1e-4 in {elapsed:.1f}s < 60s ({per})")


def test_criterion_2_round_trip(criterion):
    rng = np.random.default_rng(2)
    worst, bad_assign = 0.0, 0
    for _ in range(10_000):
        C = int(rng.integers(1, 9))
        grid = CellGrid(C * int(rng.integers(1, 33)), C)
        T = grid.total_frames
        a, b = sorted(rng.uniform(0, T, 2))
        if b - a < 1e-6:
            b = a + 1e-6
        span = EventSpan(a, min(b, T))
        back = grid.to_absolute_span(grid.to_cell_local(span))
        worst = max(worst, abs(back.start - span.start), abs(back.end - span.end))
        for center in (rng.uniform(0, T), float(T), 0.0, float(rng.integers(0, T + 1))):
            ind = grid.indicator(center)
            lo, hi = grid.boundaries()[ind.index(1)] if sum(ind) == 1 else (None, None)
            inside = lo is not None and (lo <= center < hi or center == T == hi)
            bad_assign += not inside
    criterion(2, worst <= 1e-9 and bad_assign == 0,
              f"10000 round trips, max error {worst:.1e} frames; {bad_assign} bad cell assignments")


def _random_trial_sets(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        size = int(rng.integers(2, 13))
        scores = [float(s) for s in np.round(rng.uniform(-1, 1, size), int(rng.integers(1, 4)))]
        labels = [bool(x) for x in rng.random(size) < 0.5]
        terms = [f"t{int(k)}" for k in rng.integers(0, 3, size)]
        per = {t: {labels[i] for i in range(size) if terms[i] == t} for t in set(terms)}
        if all(v == {True, False} for v in per.values()):
            out.append((scores, labels, terms))
    return out


def _trials(scores, labels, terms):
    ref = EventSpan(0, 1)
    return [Trial("u", t, l, s, ref if l else None, ref if l else None) for s, l, t in zip(scores, labels, terms)]


def test_criterion_3_metric_oracles(criterion):
    ap_bad = mtwv_bad = 0
    for scores, labels, terms in _random_trial_sets(1000, 3):
        tr = _trials(scores, labels, terms)
        ap_bad += metrics.average_precision(tr) != float(ap_bruteforce(scores, labels))
        theta, value = metrics.mtwv(tr)
        o_theta, o_value = mtwv_bruteforce(scores, labels, terms)
        mtwv_bad += (theta, value) != (o_theta, float(o_value))

    rng = np.random.default_rng(4)
    iou_err = 0.0
    for _ in range(1000):
        s1, s2 = rng.uniform(0, 100, 2)
        e1, e2 = s1 + rng.uniform(0.01, 40), s2 + rng.uniform(0.01, 40)
        inter = max(0.0, min(e1, e2) - max(s1, s2))
        expect = inter / ((e1 - s1) + (e2 - s2) - inter)
        iou_err = max(iou_err, abs(metrics.iou(EventSpan(s1, e1), EventSpan(s2, e2)) - expect))

    hand = [
        metrics.average_precision_scores([3, 2, 1], [True, False, True]) == float(Fraction(5, 6)),
        metrics.average_precision_scores([3, 2, 1], [False, True, True]) == float(Fraction(7, 12)),
        metrics.iou(EventSpan(0, 10), EventSpan(5, 15)) == 1 / 3,
        metrics.twv(_trials([0.9, 0.1, 0.2, 0.3, 0.8, 0.7, 0.6, 0.2, 0.1],
                            [True, True, False, False, True, False, False, False, False],
                            ["A"] * 4 + ["B"] * 5), 0.65) == 0.625,
    ]
    criterion(3, ap_bad == 0 and mtwv_bad == 0 and iou_err <= 1e-12 and all(hand),
              f"AP mismatches {ap_bad}/1000, MTWV mismatches {mtwv_bad}/1000, "
              f"IOU max err {iou_err:.1e}, hand cases {sum(hand)}/4")


def test_criterion_4_loss_algebra(criterion):
    rng = np.random.default_rng(5)
    zero_ok = scale_ok = sum_ok = True
    for _ in range(200):
        C, K = int(rng.integers(1, 4)), int(rng.integers(4, 17))
        fq = rng.standard_normal(K)
        fq /= np.linalg.norm(fq)
        grid = CellGrid(24 * C, C)
        cell = int(rng.integers(C))
        local = CellLocal(cell, float(rng.uniform(0, 24)), float(rng.uniform(0.5, 24 * C)))
        target = TrainingTarget.from_local(fq, C, local)
        variant = L.VARIANTS[int(rng.integers(3))]
        w = LossWeights(*rng.uniform(0.1, 3, 4), variant=variant)

        # perfect prediction: aligned positive cell, zero-dissimilarity negatives, exact location
        orth = rng.standard_normal(K)
        orth -= (orth @ fq) * fq
        neg = {"abs_cos": orth, "cos_squared": orth, "shifted_cos": -fq}[variant]
        emb = np.array([fq * rng.uniform(0.5, 3) if i == cell else neg * rng.uniform(0.5, 3) for i in range(C)])
        center = np.where(target.mask, target.rel_center, rng.uniform(0, 24, C))
        duration = np.where(target.mask, target.duration, rng.uniform(1, 24, C))
        perfect = Prediction(emb, center, duration, np.zeros((C, K + 2)))
        zero_ok &= float(L.loss_total(perfect, target, w)) < 1e-12
        noisy = Prediction(emb + rng.normal(0, 0.3, emb.shape), center + 0.5, duration, perfect.raw)
        zero_ok &= float(L.loss_total(noisy, target, w)) > 0

        scaled = Prediction(noisy.embedding * rng.uniform(0.01, 100, (C, 1)), noisy.center, noisy.duration,
                            noisy.raw)
        a, b = float(L.loss_total(noisy, target, w)), float(L.loss_total(scaled, target, w))
        scale_ok &= abs(a - b) <= 1e-12 * max(1.0, abs(a))
        l1, l2, l3 = L.loss_components(noisy, target, w)
        sum_ok &= abs(w.detection * l1 + w.dissimilarity * l2 + w.localization * l3 - a) <= 1e-9

    s, m = preset("single_word").weights, preset("multi_word").weights
    presets_ok = ((s.detection, s.dissimilarity, s.localization) == (0.5, 1, 2)
                  and (m.detection, m.dissimilarity, m.localization) == (1, 0.5, 3))
    criterion(4, zero_ok and scale_ok and sum_ok and presets_ok,
              f"zero-loss {zero_ok}, rescale invariance {scale_ok}, component sum {sum_ok}, "
              f"presets (0.5,1,2)/(1,0.5,3) {presets_ok}")


@pytest.fixture(scope="module")
def full_run():
    cfg = load_config(seed=0)
    corpus = generate(cfg.corpus_config())
    t0 = time.perf_counter()
    result = pipeline.train_model(corpus, cfg)
    train_s = time.perf_counter() - t0
    ev = pipeline.evaluate(result.best_model, corpus, cfg)
    return cfg, corpus, ev, train_s


def test_criterion_5_learnability(criterion, full_run):
    cfg, corpus, ev, train_s = full_run
    c = corpus.config
    shape = (c.n_train, c.n_validation, c.n_test, c.frames, c.feature_dim, cfg.embedding_dim(),
             cfg.preset().num_cells, cfg.train.dissim)
    assert shape == (2000, 300, 300, 96, 16, 64, 3, "cos_squared")
    iv_ap, oov_ap = ev.report.value("ap", "IV"), ev.report.value("ap", "OOV")
    iv_iou = ev.report.value("mean_iou", "IV")
    ok = iv_ap >= IV_AP_MIN and oov_ap >= OOV_AP_MIN and iv_iou >= IV_IOU_MIN and train_s <= TRAIN_BUDGET_S
    criterion(5, ok, f"IV AP {iv_ap:.4f} >= {IV_AP_MIN}, OOV AP {oov_ap:.4f} >= {OOV_AP_MIN}, "
                     f"IV IOU {iv_iou:.4f} >= {IV_IOU_MIN}, training {train_s:.0f}s <= {TRAIN_BUDGET_S}s")


def test_criterion_6_dissim_report(criterion, full_run, tmp_path):
    cfg, corpus, _, _ = full_run
    reduced = load_config(text=dump_config(cfg), overrides=["train.epochs=3"])
    rows, violations = cli.compare_dissim(corpus, reduced, tmp_path)
    shape_ok = [r["variant"] for r in rows] == list(L.VARIANTS) and all(
        set(r) == set(cli.COMPARE_FIELDS) for r in rows)
    range_ok = all(0 <= r[k] <= 1 for r in rows for k in ("iv_ap", "oov_ap"))
    table = "; ".join(f"{r['variant']} IV AP {r['iv_ap']:.3f} OOV AP {r['oov_ap']:.3f}" for r in rows)
    flag = f"ordering flagged: {violations}" if violations else "ordering as expected"
    criterion(6, shape_ok and range_ok, f"3x4 report emitted ({table}); {flag}")


def _pipeline(root):
    overrides = [a for o in SMALL_OVERRIDES for a in ("--set", o)]
    assert cli.main(["gen", "--seed", "11", "--out", str(root / "corpus"), *overrides]) == 0
    assert cli.main(["train", "--seed", "11", "--corpus", str(root / "corpus"), "--out", str(root / "train"),
                     *overrides]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "train" / "best.npz"), "--corpus", str(root / "corpus"),
                     "--out", str(root / "eval")]) == 0
    return (root / "eval" / "metrics.csv").read_bytes()


def test_criterion_7_determinism(criterion, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    criterion(7, a == b and len(a) > 0,
              f"two gen->train->eval runs (root seed 11, reduced corpus) give "
              f"{'byte-identical' if a == b else 'DIFFERENT'} metrics.csv ({len(a)} bytes)")
