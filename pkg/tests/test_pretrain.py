import numpy as np

from gridstd import pretrain as P
from gridstd.net import ConvBlock, NetConfig, forward, init_params
from gridstd.trainer import TrainConfig


def test_presence_labels(small_corpus):
    utts = small_corpus.split("train")[:20]
    classes = list(small_corpus.iv_terms[:5])
    y = P.presence_labels(utts, classes)
    for u, row in zip(utts, y):
        assert set(np.flatnonzero(row)) == {classes.index(e.term) for e in u.events if e.term in classes}


def test_bce_gradient():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 3)) * 3
    y = (rng.random((4, 3)) < 0.5).astype(float)
    _, g = P._bce(z, y)
    h = 1e-6
    num = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        num[i] = (P._bce(zp, y)[0] - P._bce(zm, y)[0]) / (2 * h)
    assert np.allclose(g, num, atol=1e-8)
    assert np.isfinite(P._bce(np.array([[1e4, -1e4]]), np.array([[0.0, 1.0]]))[0])


def test_pretrain_keeps_encoder_replaces_head(small_corpus):
    c = small_corpus.config
    m = init_params(NetConfig(c.frames, c.feature_dim, 64, 3, blocks=(ConvBlock(8), ConvBlock(16))))
    res = P.pretrain_encoder(m, small_corpus, TrainConfig(epochs=3, learning_rate=3e-3), head_seed=5)
    assert res.losses[-1] < res.losses[0]
    assert len(res.classes) == min(P.NUM_CLASSES, len(small_corpus.iv_terms))
    assert set(res.model.params) == set(m.params)
    assert not np.array_equal(res.model.params["conv0.w"], m.params["conv0.w"])
    assert res.model.params["head.w"].shape == m.params["head.w"].shape
    x = small_corpus.features(small_corpus.split("test")[:2])
    pred, _ = forward(res.model, x, np.ones((2, 64)) / 8)
    assert pred.embedding.shape == (2, 3, 64)
