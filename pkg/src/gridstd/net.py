"""Convolutional grid-cell detector with manual reverse-mode gradients.

Layout is channels-last throughout: an utterance batch is ``(B, T, D)``.
The encoder is a stack of conv1d blocks (conv -> optional batch-norm ->
ReLU -> pooling), flattened (or time-averaged) and optionally projected to
``M`` features.  Those are
concatenated with the query term embedding and fed to one linear head whose
``C*(K+2)`` outputs are read as, per cell, a raw embedding ``f'``, a
relative center ``t' = W*sigmoid(u)`` and a duration
``dt' = T*sigmoid(v) + eps``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DURATION_FLOOR = 1e-3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


DEFAULT_BLOCKS = (ConvBlock(32), ConvBlock(64))


@dataclass(frozen=True)
class NetConfig:
    input_frames: int
    input_dim: int
    embedding_dim: int
    num_cells: int
    encoder_output_dim: int | None = None
    blocks: tuple[ConvBlock, ...] = DEFAULT_BLOCKS
    projection: str = "none"
    normalize_activations: bool = False
    readout: str = "flatten"
    pool_type: str = "max"
    seed: int = 0

    def __post_init__(self):
        if self.projection not in ("relu", "linear", "none"):
            raise NetError(f"unknown projection {self.projection!r}")
        dims = (self.input_frames, self.input_dim, self.embedding_dim, self.num_cells)
        if min(dims) <= 0:
            raise NetError(f"all dimensions must be positive: {dims}")
        if self.input_frames % self.num_cells:
            raise NetError("num_cells must divide input_frames")
        if self.readout not in ("flatten", "mean"):
            raise NetError(f"unknown readout {self.readout!r}")
        if self.pool_type not in ("max", "avg"):
            raise NetError(f"unknown pool_type {self.pool_type!r}")
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        for b in blocks:
            if min(b.channels, b.kernel, b.stride, b.pool) <= 0:
                raise NetError(f"bad conv block {b}")
        if self.block_frames()[-1] <= 0:
            raise NetError("conv stack reduces the time axis to nothing")
        if self.projection == "none":
            if self.encoder_output_dim not in (None, self.readout_dim):
                raise NetError(
                    f"without a projection M equals the readout size {self.readout_dim}, "
                    f"got encoder_output_dim={self.encoder_output_dim}"
                )
            object.__setattr__(self, "encoder_output_dim", self.readout_dim)
        elif self.encoder_output_dim is None or self.encoder_output_dim <= 0:
            raise NetError("encoder_output_dim must be positive")

    @property
    def cell_width(self) -> int:
        return self.input_frames // self.num_cells

    @property
    def head_input_dim(self) -> int:
        return self.encoder_output_dim + self.embedding_dim

    @property
    def head_output_dim(self) -> int:
        return self.num_cells * (self.embedding_dim + 2)

    def block_frames(self) -> list[int]:
        """Time length after each block (index 0 is the input)."""
        frames = [self.input_frames]
        t = self.input_frames
        for b in self.blocks:
            t = (t - 1) // b.stride + 1
            t //= b.pool
            frames.append(t)
        return frames

    @property
    def readout_dim(self) -> int:
        last_c = self.blocks[-1].channels if self.blocks else self.input_dim
        if self.readout == "mean":
            return last_c
        return self.block_frames()[-1] * last_c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["blocks"] = tuple(ConvBlock(**b) for b in d.get("blocks", ()))
        return cls(**d)


@dataclass
class ModelParameters:
    """Weights (``params``), batch-norm running statistics (``buffers``) and provenance."""

    config: NetConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    version: int = CHECKPOINT_VERSION

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.seed,
            self.version,
        )

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class Prediction:
    """Per-cell outputs; arrays carry any leading batch shape."""

    embedding: np.ndarray  # (..., C, K)
    center: np.ndarray  # (..., C) frames, relative to the cell start
    duration: np.ndarray  # (..., C) frames
    raw: np.ndarray  # (..., C, K+2)

    def __getitem__(self, idx) -> "Prediction":
        return Prediction(self.embedding[idx], self.center[idx], self.duration[idx], self.raw[idx])


@dataclass
class PredictionGrad:
    embedding: np.ndarray
    center: np.ndarray
    duration: np.ndarray


@dataclass
class EncoderCache:
    blocks: list
    flat: np.ndarray
    proj_pre: np.ndarray
    readout_shape: tuple
    new_buffers: dict


@dataclass
class ForwardState:
    params: dict
    batched: bool
    encoder: EncoderCache
    head_in: np.ndarray
    sig_center: np.ndarray
    sig_duration: np.ndarray

    @property
    def new_buffers(self) -> dict:
        return self.encoder.new_buffers


# --------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: NetConfig, seed: int | None = None) -> ModelParameters:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = config.input_dim
    for i, b in enumerate(config.blocks):
        fan_in = c_in * b.kernel
        params[f"conv{i}.w"] = _uniform(rng, (b.channels, c_in, b.kernel), np.sqrt(6.0 / fan_in))
        params[f"conv{i}.b"] = np.zeros(b.channels)
        if config.normalize_activations:
            params[f"bn{i}.gamma"] = np.ones(b.channels)
            params[f"bn{i}.beta"] = np.zeros(b.channels)
            buffers[f"bn{i}.mean"] = np.zeros(b.channels)
            buffers[f"bn{i}.var"] = np.ones(b.channels)
        c_in = b.channels
    r = config.readout_dim
    if config.projection != "none":
        gain = 6.0 if config.projection == "relu" else 3.0
        params["proj.w"] = _uniform(rng, (r, config.encoder_output_dim), np.sqrt(gain / r))
        params["proj.b"] = np.zeros(config.encoder_output_dim)
    params.update(_init_head(config.head_input_dim, config.head_output_dim, rng))
    return ModelParameters(config, params, buffers, seed)


def _init_head(fan_in, fan_out, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return {"head.w": _uniform(rng, (fan_in, fan_out), bound), "head.b": np.zeros(fan_out)}


def replace_head(model: ModelParameters, num_cells: int, embedding_dim: int, seed: int) -> ModelParameters:
    """Keep the encoder bit-exactly and reinitialize the head for new ``(C, K)``."""
    if num_cells <= 0 or embedding_dim <= 0:
        raise NetError("num_cells and embedding_dim must be positive")
    old = model.config
    cfg = NetConfig(**{**old.__dict__, "num_cells": num_cells, "embedding_dim": embedding_dim})
    params = {k: v.copy() for k, v in model.params.items() if not k.startswith("head.")}
    params.update(_init_head(cfg.head_input_dim, cfg.head_output_dim, np.random.default_rng(seed)))
    return ModelParameters(cfg, params, {k: v.copy() for k, v in model.buffers.items()}, model.seed)


# --------------------------------------------------------------------------
# layers


def _pad(k):
    left = (k - 1) // 2
    return left, k - 1 - left


def _conv_forward(x, w, b, stride):
    B, T, c_in = x.shape
    c_out, _, k = w.shape
    left, right = _pad(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)[:, ::stride]  # (B, To, c_in, k)
    t_out = win.shape[1]
    cols = win.reshape(B * t_out, c_in * k)
    wm = w.reshape(c_out, c_in * k)
    out = cols @ wm.T + b
    return out.reshape(B, t_out, c_out), cols


def _conv_backward(dout, cols, x_shape, w, stride):
    B, T, c_in = x_shape
    c_out, _, k = w.shape
    t_out = dout.shape[1]
    d2 = dout.reshape(B * t_out, c_out)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(c_out, c_in * k)).reshape(B, t_out, c_in, k)
    left, right = _pad(k)
    dxp = np.zeros((B, T + left + right, c_in))
    stop = stride * (t_out - 1) + 1
    for j in range(k):
        dxp[:, j : j + stop : stride] += dcols[..., j]
    return dxp[:, left : left + T], dw, db


def _bn_forward(z, gamma, beta, mean_buf, var_buf, train):
    if train:
        n = z.shape[0] * z.shape[1]
        mu = z.mean(axis=(0, 1))
        var = z.var(axis=(0, 1))
        unbiased = var * n / max(n - 1, 1)
        new_mean = (1 - BN_MOMENTUM) * mean_buf + BN_MOMENTUM * mu
        new_var = (1 - BN_MOMENTUM) * var_buf + BN_MOMENTUM * unbiased
    else:
        mu, var = mean_buf, var_buf
        new_mean, new_var = mean_buf, var_buf
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, train), new_mean, new_var


def _bn_backward(dy, cache, gamma):
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0] * dy.shape[1]
    dz = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
    )
    return dz, dgamma, dbeta


def _pool_forward(a, size, kind):
    if size == 1:
        return a, None
    B, T, C = a.shape
    t_out = T // size
    win = a[:, : t_out * size].reshape(B, t_out, size, C)
    if kind == "avg":
        return win.mean(axis=2), None
    arg = win.argmax(axis=2)
    return np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0], arg


def _pool_backward(dout, arg, in_shape, size, kind):
    if size == 1:
        return dout
    B, T, C = in_shape
    t_out = dout.shape[1]
    da = np.zeros(in_shape)
    if kind == "avg":
        da[:, : t_out * size] = np.repeat(dout / size, size, axis=1)
        return da
    win = np.zeros((B, t_out, size, C))
    np.put_along_axis(win, arg[:, :, None, :], dout[:, :, None, :], axis=2)
    da[:, : t_out * size] = win.reshape(B, t_out * size, C)
    return da


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# forward / backward


def _check_inputs(config: NetConfig, x, fq):
    x = np.asarray(x, dtype=float)
    fq = np.asarray(fq, dtype=float)
    batched = x.ndim == 3
    if not batched:
        x, fq = x[None], fq[None]
    if x.shape[1:] != (config.input_frames, config.input_dim):
        raise NetError(
            f"features shape {x.shape[1:]} != ({config.input_frames}, {config.input_dim})"
        )
    if fq.shape != (x.shape[0], config.embedding_dim):
        raise NetError(f"term embedding shape {fq.shape} incompatible with K={config.embedding_dim}")
    if not (np.isfinite(x).all() and np.isfinite(fq).all()):
        raise NetError("non-finite input")
    return x, fq, batched


def encode(model: ModelParameters, x: np.ndarray, train: bool = False):
    """Encoder features ``(B, M)`` plus the cache needed by ``backward``."""
    cfg, p = model.config, model.params
    a = x
    caches = []
    new_buffers = dict(model.buffers)
    for i, b in enumerate(cfg.blocks):
        z, cols = _conv_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"], b.stride)
        bn_cache = None
        if cfg.normalize_activations:
            z, bn_cache, m, v = _bn_forward(
                z, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                model.buffers[f"bn{i}.mean"], model.buffers[f"bn{i}.var"], train,
            )
            new_buffers[f"bn{i}.mean"], new_buffers[f"bn{i}.var"] = m, v
        relu_mask = z > 0
        r = z * relu_mask
        pooled, arg = _pool_forward(r, b.pool, cfg.pool_type)
        caches.append((a.shape, cols, bn_cache, relu_mask, r.shape, arg))
        a = pooled
    readout_shape = a.shape
    flat = a.reshape(a.shape[0], -1) if cfg.readout == "flatten" else a.mean(axis=1)
    if cfg.projection == "none":
        pre = h = flat
    else:
        pre = flat @ p["proj.w"] + p["proj.b"]
        h = np.maximum(pre, 0.0) if cfg.projection == "relu" else pre
    return h, EncoderCache(caches, flat, pre, readout_shape, new_buffers)


def head(model: ModelParameters, h: np.ndarray, fq: np.ndarray):
    """Raw head output ``(B, C, K+2)`` and the head input."""
    cfg, p = model.config, model.params
    head_in = np.concatenate([h, fq], axis=1)
    raw = head_in @ p["head.w"] + p["head.b"]
    return raw.reshape(-1, cfg.num_cells, cfg.embedding_dim + 2), head_in


def decode(config: NetConfig, raw: np.ndarray):
    K = config.embedding_dim
    s_c = _sigmoid(raw[..., K])
    s_d = _sigmoid(raw[..., K + 1])
    pred = Prediction(
        embedding=raw[..., :K],
        center=config.cell_width * s_c,
        duration=config.input_frames * s_d + DURATION_FLOOR,
        raw=raw,
    )
    return pred, s_c, s_d


def forward(model: ModelParameters, x, fq, train: bool = False):
    """Run the detector.  Returns ``(Prediction, ForwardState)``.

    ``x`` is ``(T, D)`` or ``(B, T, D)``; ``fq`` is ``(K,)`` or ``(B, K)``.
    With ``train=True`` batch-norm uses batch statistics and
    ``state.new_buffers`` carries the updated running averages.
    """
    cfg = model.config
    x, fq, batched = _check_inputs(cfg, x, fq)
    h, enc = encode(model, x, train)
    raw, head_in = head(model, h, fq)
    pred, s_c, s_d = decode(cfg, raw)
    state = ForwardState(model.params, batched, enc, head_in, s_c, s_d)
    return (pred if batched else pred[0]), state


def activation_pattern(state: ForwardState) -> list[np.ndarray]:
    """ReLU masks and max-pool selections; a change between two forwards means a kink was crossed."""
    out = []
    for _, _, _, relu_mask, _, arg in state.encoder.blocks:
        out.append(relu_mask)
        if arg is not None:
            out.append(arg)
    out.append(state.encoder.proj_pre > 0)
    return out


def backward(
    model: ModelParameters,
    state: ForwardState,
    grad: PredictionGrad,
    frozen: set[str] | frozenset = frozenset(),
) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients w.r.t. the decoded prediction."""
    if state.params is not model.params:
        raise NetError("forward state was produced with different parameters")
    cfg, p = model.config, model.params
    K = cfg.embedding_dim
    d_emb, d_c, d_d = (np.asarray(a, dtype=float) for a in (grad.embedding, grad.center, grad.duration))
    if not state.batched:
        d_emb, d_c, d_d = d_emb[None], d_c[None], d_d[None]
    B = state.head_in.shape[0]
    if d_emb.shape != (B, cfg.num_cells, K) or d_c.shape != (B, cfg.num_cells):
        raise NetError("output gradient shape does not match the forward state")

    s_c, s_d = state.sig_center, state.sig_duration
    d_raw = np.empty((B, cfg.num_cells, K + 2))
    d_raw[..., :K] = d_emb
    d_raw[..., K] = d_c * cfg.cell_width * s_c * (1.0 - s_c)
    d_raw[..., K + 1] = d_d * cfg.input_frames * s_d * (1.0 - s_d)
    d_raw = d_raw.reshape(B, -1)

    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = state.head_in.T @ d_raw
    grads["head.b"] = d_raw.sum(axis=0)
    d_head_in = d_raw @ p["head.w"].T
    d_h = d_head_in[:, : cfg.encoder_output_dim]
    grads.update(encoder_backward(model, state.encoder, d_h))

    out = {}
    for k in p:
        g = grads[k]
        out[k] = np.zeros_like(g) if k in frozen else g
    return out


def encoder_backward(model: ModelParameters, cache: EncoderCache, d_h: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every encoder parameter given ``d loss / d h``."""
    cfg, p = model.config, model.params
    grads: dict[str, np.ndarray] = {}
    if cfg.projection == "none":
        d_flat = d_h
    else:
        d_pre = d_h * (cache.proj_pre > 0) if cfg.projection == "relu" else d_h
        grads["proj.w"] = cache.flat.T @ d_pre
        grads["proj.b"] = d_pre.sum(axis=0)
        d_flat = d_pre @ p["proj.w"].T
    if cfg.readout == "flatten":
        d_a = d_flat.reshape(cache.readout_shape)
    else:
        Tl = cache.readout_shape[1]
        d_a = np.repeat(d_flat[:, None, :] / Tl, Tl, axis=1)

    for i in reversed(range(len(cfg.blocks))):
        b = cfg.blocks[i]
        in_shape, cols, bn_cache, relu_mask, r_shape, arg = cache.blocks[i]
        d_r = _pool_backward(d_a, arg, r_shape, b.pool, cfg.pool_type)
        d_z = d_r * relu_mask
        if bn_cache is not None:
            d_z, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = _bn_backward(
                d_z, bn_cache, p[f"bn{i}.gamma"]
            )
        d_a, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(
            d_z, cols, in_shape, p[f"conv{i}.w"], b.stride
        )
    return grads


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: ModelParameters, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """``.npz`` container: config + seed + version as JSON, then flat arrays."""
    meta = {
        "version": model.version,
        "seed": model.seed,
        "config": model.config.to_dict(),
        "param_names": list(model.params),
        "buffer_names": list(model.buffers),
        "extra": extra or {},
    }
    payload = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    payload.update({f"param/{k}": v for k, v in model.params.items()})
    payload.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path):
    """Returns ``(model, extra_meta, extra_arrays)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise NetError(f"unsupported checkpoint version {meta['version']}")
        params = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
        buffers = {k: z[f"buffer/{k}"].copy() for k in meta["buffer_names"]}
        arrays = {k[len("extra/"):]: z[k].copy() for k in z.files if k.startswith("extra/")}
    model = ModelParameters(NetConfig.from_dict(meta["config"]), params, buffers, meta["seed"], meta["version"])
    return model, meta["extra"], arrays
