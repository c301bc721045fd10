"""Run configuration: one INI file with sections, plus ``section.key=value`` overrides.

Every random stream is derived from ``[run] seed`` unless a section pins its
own ``seed``, so a manifest with the root seed fully determines a run.
"""

from __future__ import annotations

import ast
import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .loss import VARIANTS
from .net import ConvBlock, NetConfig
from .synthcorpus import CorpusConfig, CorpusError
from .trainer import TrainConfig, preset


class ConfigError(ValueError):
    pass


# stream ids for seed derivation; fixed forever so manifests stay reproducible
_STREAMS = {"corpus": 1, "model": 2, "train": 3, "examples": 4, "trials": 5, "embedding": 6, "head": 7}


def derive_seed(root: int, stream: str) -> int:
    return int(np.random.SeedSequence([root, _STREAMS[stream]]).generate_state(1)[0])


@dataclass
class ModelSection:
    blocks: tuple[int, ...] = (32, 64)
    kernel: int = 3
    pool: int = 2
    projection: str = "none"
    encoder_output_dim: int | None = None
    normalize_activations: bool = False
    readout: str = "flatten"
    pool_type: str = "max"
    embedding_dim: int | None = None  # None: preset default
    full_dim: bool = False
    seed: int | None = None


@dataclass
class TrainSection:
    preset: str = "multi_word"
    dissim: str = "cos_squared"
    duration_weight: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    negative_ratio: float = 1.0
    clip_norm: float | None = None
    patience: int | None = None
    pretrain_epochs: int = 0
    seed: int | None = None


@dataclass
class EvalSection:
    objective: str = "f1"
    beta: float = 1.0
    trial_ratio: float = 1.0
    batch_size: int = 512
    seed: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    corpus: dict = field(default_factory=dict)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- derived objects

    def corpus_config(self) -> CorpusConfig:
        opts = {"seed": derive_seed(self.seed, "corpus"), "num_cells": self._cells(), **self.corpus}
        try:
            cfg = CorpusConfig.from_dict(opts)
            cfg.validate()
        except (CorpusError, TypeError) as e:
            raise ConfigError(f"[corpus] {e}") from e
        return cfg

    def stream_seed(self, stream: str) -> int:
        section = {"model": self.model, "train": self.train, "trials": self.eval}.get(stream)
        if section is not None and section.seed is not None:
            return int(section.seed)
        return derive_seed(self.seed, stream)

    def _cells(self) -> int:
        return self.preset().num_cells

    def preset(self):
        try:
            return preset(self.train.preset, self.train.dissim, self.model.full_dim,
                          self.train.duration_weight)
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from e

    def embedding_dim(self) -> int:
        return self.model.embedding_dim or self.preset().embedding_dim

    def net_config(self, frames: int, feature_dim: int) -> NetConfig:
        m = self.model
        return NetConfig(
            input_frames=frames,
            input_dim=feature_dim,
            embedding_dim=self.embedding_dim(),
            num_cells=self.preset().num_cells,
            encoder_output_dim=m.encoder_output_dim,
            blocks=tuple(ConvBlock(int(c), m.kernel, 1, m.pool) for c in m.blocks),
            projection=m.projection,
            normalize_activations=m.normalize_activations,
            readout=m.readout,
            pool_type=m.pool_type,
            seed=self.stream_seed("model"),
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate,
            batch_size=t.batch_size,
            epochs=t.epochs,
            seed=self.stream_seed("train"),
            weights=self.preset().weights,
            clip_norm=t.clip_norm,
            patience=t.patience,
        )

    def validate(self) -> None:
        if self.train.dissim not in VARIANTS:
            raise ConfigError(f"unknown dissim variant {self.train.dissim!r}; choose from {VARIANTS}")
        if self.eval.objective not in ("f1", "mtwv"):
            raise ConfigError(f"unknown threshold objective {self.eval.objective!r}")
        self.preset()
        cc = self.corpus_config()
        if cc.num_cells != self.preset().num_cells:
            raise ConfigError(
                f"corpus num_cells={cc.num_cells} but preset {self.train.preset!r} uses "
                f"C={self.preset().num_cells}"
            )
        try:
            self.net_config(cc.frames, cc.feature_dim)
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {"run": {"seed": self.seed}, "corpus": dict(self.corpus),
                "model": asdict(self.model), "train": asdict(self.train), "eval": asdict(self.eval)}


# --------------------------------------------------------------------------
# parsing


def _parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("null", ""):
        return None
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def _coerce(section_cls, key, value):
    names = {f.name for f in fields(section_cls)}
    if key not in names:
        raise ConfigError(f"unknown option {key!r}; expected one of {sorted(names)}")
    if key == "blocks":
        value = (value,) if isinstance(value, int) else tuple(value)
    return value


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    value = _parse_value(raw)
    if section == "run":
        if key != "seed" or not isinstance(value, int):
            raise ConfigError("[run] accepts only an integer 'seed'")
        cfg.seed = value
    elif section == "corpus":
        if key not in CorpusConfig.__dataclass_fields__:
            raise ConfigError(f"unknown corpus option {key!r}")
        cfg.corpus[key] = tuple(value) if isinstance(value, (list, tuple)) else value
    elif section in ("model", "train", "eval"):
        obj = getattr(cfg, section)
        setattr(obj, key, _coerce(type(obj), key, value))
    else:
        raise ConfigError(f"unknown config section [{section}]")


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None,
                text: str | None = None) -> RunConfig:
    """Read an INI file or string (optional), apply ``section.key=value`` overrides, then ``seed``."""
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        if text is not None:
            parser.read_string(text)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(cfg, section, key, raw)
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """INI text that ``load_config`` reads back to an equal configuration."""
    parser = configparser.ConfigParser()
    for section, values in cfg.to_dict().items():
        parser[section] = {k: repr(v) if not isinstance(v, str) else v for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
