import numpy as np
import pytest

from gridstd import detect as D
from gridstd.grid import CellGrid
from gridstd.net import ConvBlock, NetConfig, Prediction, decode, forward, init_params

GRID = CellGrid(96, 3)
fq = np.eye(4)[0]


def pred_with_scores(scores, scale=(1, 1, 1)):
    emb = np.array([[s, np.sqrt(1 - s * s), 0, 0] for s in scores]) * np.asarray(scale, float)[:, None]
    C = len(scores)
    return Prediction(emb, np.full(C, 10.0), np.full(C, 8.0), np.zeros((C, 6)))


def test_score_cells():
    assert np.allclose(D.score_cells(pred_with_scores([1, 0, -1]), fq), [1, 0, -1])
    emb = np.tile(fq, (3, 1))
    assert np.array_equal(D.score_cells(Prediction(emb, None, None, None), fq), [1, 1, 1])


def test_score_cells_zero_norm():
    with pytest.raises(D.DetectError):
        D.score_cells(Prediction(np.zeros((2, 4)), None, None, None), fq)


def test_detect_examples():
    p = pred_with_scores([0.9, 0.1, 0.2])
    dets = D.detect(p, fq, 0.5, GRID)
    assert [d.cell_index for d in dets] == [0]
    assert dets[0].span.start == 6.0 and dets[0].span.end == 14.0
    assert D.detect(p, fq, 0.95, GRID) == []


def test_detect_strict():
    p = pred_with_scores([0.5, 0.25, 0.125])  # exactly representable cosines
    assert [d.cell_index for d in D.detect(p, fq, 0.25, GRID)] == [0]


def test_detect_extremes_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = pred_with_scores(rng.uniform(-0.99, 0.99, 3))
        assert D.detect(p, fq, 1.0, GRID) == []
        assert len(D.detect(p, fq, -1.0, GRID)) == 3
        counts = [len(D.detect(p, fq, phi, GRID)) for phi in np.linspace(-1, 1, 21)]
        assert counts == sorted(counts, reverse=True)


def test_utterance_score():
    s, c = D.utterance_score(pred_with_scores([0.3, 0.8, 0.8]), fq)
    assert c == 1 and s == pytest.approx(0.8)
    s, c = D.utterance_score(pred_with_scores([-0.2, -0.5, -0.9]), fq)
    assert c == 0 and s == pytest.approx(-0.2)
    s, c = D.utterance_score(pred_with_scores([0.4]), fq)
    assert (s, c) == (pytest.approx(0.4), 0)


def test_utterance_score_scale_invariant():
    a = D.utterance_score(pred_with_scores([0.3, 0.7, 0.1]), fq)
    b = D.utterance_score(pred_with_scores([0.3, 0.7, 0.1], scale=(5, 0.01, 9)), fq)
    assert a[1] == b[1] and a[0] == pytest.approx(b[0], abs=1e-12)


def test_tune_f1_example():
    t = D.tune_threshold([0.9, 0.8, 0.1, 0.2], [True, True, False, False])
    assert t.phi == 0.5 and t.value == 1.0 and t.objective == "f1"


def test_tune_inverted():
    t = D.tune_threshold([0.1, 0.2, 0.9, 0.8], [True, True, False, False])
    # accept everything: precision 1/2, recall 1 -> F1 = 2/3
    assert t.value == pytest.approx(2 / 3) and t.phi == -1.0


@pytest.mark.parametrize("scores,labels", [([0.3, 0.3, 0.3], [True, False, True]),
                                           ([0.1, 0.2], [True, True]), ([0.1, 0.2], [False, False])])
def test_tune_degenerate(scores, labels):
    with pytest.raises(D.DetectError):
        D.tune_threshold(scores, labels)


def brute_f1(scores, labels):
    best = None
    for phi in D.threshold_candidates(scores):
        tp = sum(1 for s, l in zip(scores, labels) if s > phi and l)
        fp = sum(1 for s, l in zip(scores, labels) if s > phi and not l)
        fn = sum(1 for s, l in zip(scores, labels) if s <= phi and l)
        f1 = 2 * tp / (2 * tp + fp + fn)
        if best is None or f1 > best[1]:
            best = (phi, f1)
    return best


def test_tune_matches_bruteforce():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        scores = list(np.round(rng.uniform(-1, 1, n), 1))
        labels = list(rng.random(n) < 0.5)
        if all(labels) or not any(labels) or len(set(scores)) == 1:
            continue
        t = D.tune_threshold(scores, labels)
        phi, f1 = brute_f1(scores, labels)
        assert t.phi == phi and t.value == pytest.approx(f1, abs=1e-15)


def test_tune_mtwv():
    scores = [0.9, 0.8, 0.1, 0.2, 0.7, 0.3]
    labels = [True, True, False, False, True, False]
    terms = ["a", "a", "a", "b", "b", "b"]
    t = D.tune_threshold(scores, labels, "mtwv", term_ids=terms)
    assert t.value == 1.0 and 0.3 < t.phi < 0.7
    with pytest.raises(D.DetectError):
        D.tune_threshold(scores, labels, "mtwv")
    with pytest.raises(D.DetectError):
        D.tune_threshold(scores, labels, "auc")


def test_threshold_range():
    with pytest.raises(D.DetectError):
        D.Threshold(1.5, "f1", 0.0)


def test_score_trials_batching_invariant():
    cfg = NetConfig(24, 4, 8, 2, blocks=(ConvBlock(4),))
    m = init_params(cfg)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((5, 24, 4))
    idx = rng.integers(0, 5, 17)
    fqs = rng.standard_normal((17, 8))
    a = D.score_trials(m, feats, idx, fqs, batch_size=512)
    b = D.score_trials(m, feats, idx, fqs, batch_size=3)
    assert np.allclose(a.scores, b.scores, atol=1e-12)
    pred, _ = forward(m, feats[idx], fqs)
    assert np.allclose(a.cell_scores, D.score_cells(pred, fqs), atol=1e-12)
    assert np.array_equal(a.best_cell, np.argmax(a.cell_scores, axis=1))


def test_write_detections(tmp_path):
    D.write_detections(tmp_path / "d.jsonl", [
        {"utterance_id": "u", "term_id": "t", "score": 0.5, "start": 1.0, "end": 2.0, "cell": 0, "x": 1}])
    assert (tmp_path / "d.jsonl").read_text() == (
        '{"utterance_id": "u", "term_id": "t", "score": 0.5, "start": 1.0, "end": 2.0, "cell": 0}\n')
