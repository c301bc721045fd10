"""Deterministic synthetic speech-like corpus.

Each phoneme owns a fixed prototype vector in ``R^D``.  A word is rendered
by repeating each of its phoneme prototypes for a sampled number of frames;
utterances concatenate one to three words separated by silence and are
padded to ``T`` frames.  Gaussian noise is added everywhere, silence is
noise only.  Word alignments are therefore known exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import PhonemeInventory, Term, read_lexicon, write_lexicon
from .grid import CellGrid, EventSpan

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
_UTT_STREAM = 7


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    inventory_size: int = 40
    lexicon_size: int = 50
    word_length: tuple[int, int] = (3, 8)
    words_per_utterance: tuple[int, int] = (1, 3)
    frames: int = 96
    feature_dim: int = 16
    phoneme_frames: tuple[int, int] = (4, 10)
    noise: float = 0.1
    gap_frames: tuple[int, int] = (2, 6)
    n_train: int = 2000
    n_validation: int = 300
    n_test: int = 300
    n_oov: int = 10
    num_cells: int = 3
    max_retries: int = 200
    decimals: int = 6

    def validate(self) -> None:
        for name in ("word_length", "words_per_utterance", "phoneme_frames", "gap_frames"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise CorpusError(f"{name} range {lo}..{hi} is empty")
        if self.word_length[0] < 1 or self.words_per_utterance[0] < 1 or self.phoneme_frames[0] < 1:
            raise CorpusError("word length, word count and phoneme duration must be >= 1")
        if self.frames <= 0 or self.feature_dim <= 0 or self.inventory_size < 2:
            raise CorpusError("frames, feature_dim must be positive and inventory_size >= 2")
        if self.frames % self.num_cells:
            raise CorpusError(f"frames={self.frames} is not divisible by num_cells={self.num_cells}")
        if min(self.n_train, self.n_validation, self.n_test) <= 0:
            raise CorpusError("utterance counts must be positive")
        if not 0 <= self.n_oov < self.lexicon_size:
            raise CorpusError("n_oov must leave at least one in-vocabulary term")
        if self.noise < 0:
            raise CorpusError("noise must be non-negative")
        if self.word_length[0] * self.phoneme_frames[0] > self.frames:
            raise CorpusError("shortest possible word does not fit in the utterance")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        kwargs = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise CorpusError(f"unknown corpus option {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass(frozen=True)
class Event:
    term: str
    start: float
    end: float

    @property
    def span(self) -> EventSpan:
        return EventSpan(self.start, self.end)


@dataclass
class Utterance:
    id: str
    split: str
    features: np.ndarray
    events: list[Event]

    @property
    def term_ids(self) -> set[str]:
        return {e.term for e in self.events}


@dataclass
class Corpus:
    config: CorpusConfig
    inventory: PhonemeInventory
    lexicon: list[Term]
    iv_terms: list[str]
    oov_terms: list[str]
    utterances: list[Utterance]
    prototypes: np.ndarray | None = field(default=None, repr=False)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def term(self, term_id: str) -> Term:
        for t in self.lexicon:
            if t.id == term_id:
                return t
        raise KeyError(term_id)

    def terms(self, ids: Sequence[str]) -> list[Term]:
        by_id = {t.id: t for t in self.lexicon}
        return [by_id[i] for i in ids]

    def features(self, utts: Sequence[Utterance] | None = None) -> np.ndarray:
        utts = self.utterances if utts is None else utts
        return np.stack([u.features for u in utts])


def _make_lexicon(cfg: CorpusConfig, inventory: PhonemeInventory, rng) -> list[Term]:
    seen = set()
    terms = []
    lo, hi = cfg.word_length
    n_sym = len(inventory)
    while len(terms) < cfg.lexicon_size:
        n = int(rng.integers(lo, hi + 1))
        seq = [int(rng.integers(n_sym))]
        while len(seq) < n:
            # no immediate repeats: two identical adjacent phonemes would render
            # as one long phoneme
            p = int(rng.integers(n_sym - 1))
            seq.append(p if p < seq[-1] else p + 1)
        key = tuple(seq)
        if key in seen:
            continue
        seen.add(key)
        terms.append(Term(f"w{len(terms):03d}", (tuple(inventory.symbols[p] for p in key),)))
    return terms


def _render_utterance(cfg, words, pron_idx, prototypes, rng, forced=None):
    """Returns (features, events) or None if the sampled words do not fit."""
    lo, hi = cfg.words_per_utterance
    n_words = int(rng.integers(lo, hi + 1))
    n_words = min(n_words, len(words))
    chosen = list(rng.choice(len(words), size=n_words, replace=False))
    if forced is not None and forced not in chosen:
        chosen[int(rng.integers(n_words))] = forced
    durations = [
        rng.integers(cfg.phoneme_frames[0], cfg.phoneme_frames[1] + 1, size=len(pron_idx[w]))
        for w in chosen
    ]
    gaps = rng.integers(cfg.gap_frames[0], cfg.gap_frames[1] + 1, size=max(n_words - 1, 0))
    total = int(sum(d.sum() for d in durations) + gaps.sum())
    if total > cfg.frames:
        return None
    offset = int(rng.integers(0, cfg.frames - total + 1))
    clean = np.zeros((cfg.frames, cfg.feature_dim))
    events = []
    t = offset
    for k, (w, durs) in enumerate(zip(chosen, durations)):
        start = t
        for p, d in zip(pron_idx[w], durs):
            clean[t : t + d] = prototypes[p]
            t += int(d)
        events.append((w, start, t))
        if k < n_words - 1:
            t += int(gaps[k])
    noise = rng.standard_normal((cfg.frames, cfg.feature_dim)) * cfg.noise
    feats = np.round(clean + noise, cfg.decimals)
    return feats, events


def generate(config: CorpusConfig) -> Corpus:
    config.validate()
    root = np.random.SeedSequence(config.seed)
    proto_seq, lex_seq, split_seq = root.spawn(3)

    inventory = PhonemeInventory.default(config.inventory_size)
    prng = np.random.default_rng(proto_seq)
    prototypes = prng.standard_normal((len(inventory), config.feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    lexicon = _make_lexicon(config, inventory, np.random.default_rng(lex_seq))
    order = np.random.default_rng(split_seq).permutation(len(lexicon))
    oov_idx = sorted(int(i) for i in order[: config.n_oov])
    iv_idx = sorted(int(i) for i in order[config.n_oov :])
    pron_idx = [[inventory.index(p) for p in t.pronunciations[0]] for t in lexicon]

    utterances = []
    counts = {"train": config.n_train, "validation": config.n_validation, "test": config.n_test}
    for split_no, split in enumerate(SPLITS):
        vocab = iv_idx if split == "train" else list(range(len(lexicon)))
        for n in range(counts[split]):
            # per-utterance stream: output does not depend on rendering order
            rng = np.random.default_rng([config.seed, _UTT_STREAM, split_no, n])
            # every vocabulary word is guaranteed an occurrence early in each split
            forced = n if n < len(vocab) else None
            for _ in range(config.max_retries):
                out = _render_utterance(config, vocab, [pron_idx[v] for v in vocab], prototypes, rng, forced)
                if out is not None:
                    break
            else:
                raise CorpusError(
                    f"could not fit words into {config.frames} frames after {config.max_retries} tries"
                )
            feats, evs = out
            events = [Event(lexicon[vocab[w]].id, float(s), float(e)) for w, s, e in evs]
            utterances.append(Utterance(f"{split[:2]}{n:05d}", split, feats, events))

    return Corpus(
        config=config,
        inventory=inventory,
        lexicon=lexicon,
        iv_terms=[lexicon[i].id for i in iv_idx],
        oov_terms=[lexicon[i].id for i in oov_idx],
        utterances=utterances,
        prototypes=prototypes,
    )


# --------------------------------------------------------------------------
# training examples and evaluation trials


@dataclass
class ExampleSet:
    """Training tuples, stored by reference into the corpus feature array.

    ``mask[n, i]`` is the cell indicator; ``rel_center``/``duration`` hold the
    cell-local targets at the positive cell and 0 elsewhere.  Absent-term
    negatives have an all-false mask.
    """

    features: np.ndarray  # (U, T, D)
    utt_index: np.ndarray  # (N,)
    term_ids: list[str]
    embeddings: np.ndarray  # (N, K)
    mask: np.ndarray  # (N, C) bool
    rel_center: np.ndarray  # (N, C)
    duration: np.ndarray  # (N, C)
    spans: list[tuple[float, float] | None]

    def __len__(self) -> int:
        return len(self.utt_index)

    def __getitem__(self, n: int):
        """The ``(x, f, t_start, t_end)`` tuple for example ``n``."""
        span = self.spans[n]
        start, end = span if span is not None else (None, None)
        return self.features[self.utt_index[n]], self.embeddings[n], start, end


def make_training_examples(
    corpus: Corpus,
    grid: CellGrid,
    embedder,
    split: str = "train",
    negative_ratio: float = 1.0,
    seed: int = 0,
    utterances: Sequence[Utterance] | None = None,
) -> ExampleSet:
    utts = corpus.split(split) if utterances is None else list(utterances)
    if not utts:
        raise CorpusError(f"no utterances in split {split!r}")
    if utts[0].features.shape[0] != grid.total_frames:
        raise CorpusError(
            f"utterance length {utts[0].features.shape[0]} != grid T={grid.total_frames}"
        )
    vocab = corpus.iv_terms if split == "train" else [t.id for t in corpus.lexicon]
    emb = {t.id: embedder(t) for t in corpus.terms(vocab)}
    # absent-term negatives may also use terms seen only as events in these utterances
    for u in utts:
        for e in u.events:
            if e.term not in emb:
                emb[e.term] = embedder(corpus.term(e.term))
    rng = np.random.default_rng(seed)
    C = grid.num_cells

    utt_index, term_ids, masks, centers, durs, spans = [], [], [], [], [], []
    for ui, u in enumerate(utts):
        for e in u.events:
            local = grid.to_cell_local(e.span)
            m = np.zeros(C, bool)
            c = np.zeros(C)
            d = np.zeros(C)
            m[local.cell_index] = True
            c[local.cell_index] = local.rel_center
            d[local.cell_index] = local.duration
            utt_index.append(ui)
            term_ids.append(e.term)
            masks.append(m)
            centers.append(c)
            durs.append(d)
            spans.append((e.start, e.end))
        if negative_ratio > 0:
            absent = [t for t in vocab if t not in u.term_ids]
            n_pos = len(u.events)
            whole = int(negative_ratio * n_pos)
            n_neg = whole + int(rng.random() < negative_ratio * n_pos - whole)
            n_neg = min(n_neg, len(absent))
            for k in rng.choice(len(absent), size=n_neg, replace=False):
                utt_index.append(ui)
                term_ids.append(absent[int(k)])
                masks.append(np.zeros(C, bool))
                centers.append(np.zeros(C))
                durs.append(np.zeros(C))
                spans.append(None)

    return ExampleSet(
        features=np.stack([u.features for u in utts]),
        utt_index=np.asarray(utt_index, dtype=np.int64),
        term_ids=term_ids,
        embeddings=np.stack([emb[t] for t in term_ids]),
        mask=np.stack(masks),
        rel_center=np.stack(centers),
        duration=np.stack(durs),
        spans=spans,
    )


@dataclass
class TrialSpec:
    """An (utterance, term) pair to be scored; ``reference`` is set iff the term occurs."""

    utt_index: int
    utterance_id: str
    term_id: str
    label: bool
    reference: EventSpan | None


def make_trials(
    utterances: Sequence[Utterance],
    term_ids: Sequence[str],
    ratio: float = 1.0,
    seed: int = 0,
) -> list[TrialSpec]:
    """Per term: every utterance containing it plus ``ratio`` times as many without it."""
    if not utterances:
        raise CorpusError("no utterances to build trials from")
    trials = []
    skipped = []
    for ti, term in enumerate(term_ids):
        pos = [i for i, u in enumerate(utterances) if term in u.term_ids]
        if not pos:
            skipped.append(term)
            continue
        neg = [i for i, u in enumerate(utterances) if term not in u.term_ids]
        rng = np.random.default_rng([seed, ti])
        n_neg = min(len(neg), int(round(ratio * len(pos))))
        neg_pick = sorted(int(k) for k in rng.choice(len(neg), size=n_neg, replace=False))
        for i in pos:
            ev = next(e for e in utterances[i].events if e.term == term)
            trials.append(TrialSpec(i, utterances[i].id, term, True, ev.span))
        for k in neg_pick:
            i = neg[k]
            trials.append(TrialSpec(i, utterances[i].id, term, False, None))
    if skipped:
        log.warning("skipped %d term(s) with no occurrences: %s", len(skipped), ", ".join(skipped))
    return trials


# --------------------------------------------------------------------------
# JSON Lines I/O


def _fmt_row(row) -> str:
    return "[" + ",".join(repr(float(v)) for v in row) + "]"


def write_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            feats = "[" + ",".join(_fmt_row(r) for r in u.features) + "]"
            events = json.dumps([{"term": e.term, "start": e.start, "end": e.end} for e in u.events])
            fh.write(
                f'{{"id": {json.dumps(u.id)}, "split": {json.dumps(u.split)}, '
                f'"features": {feats}, "events": {events}}}\n'
            )
    write_lexicon(out / "lexicon.jsonl", corpus.lexicon)
    meta = {
        "config": asdict(corpus.config),
        "inventory": list(corpus.inventory.symbols),
        "iv_terms": corpus.iv_terms,
        "oov_terms": corpus.oov_terms,
    }
    (out / "splits.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    if not (src / "corpus.jsonl").exists():
        raise CorpusError(f"no corpus.jsonl in {src}")
    meta = json.loads((src / "splits.json").read_text())
    utterances = []
    with open(src / "corpus.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            utterances.append(
                Utterance(
                    rec["id"],
                    rec.get("split", "test"),
                    np.asarray(rec["features"], dtype=float),
                    [Event(e["term"], float(e["start"]), float(e["end"])) for e in rec["events"]],
                )
            )
    return Corpus(
        config=CorpusConfig.from_dict(meta["config"]),
        inventory=PhonemeInventory(tuple(meta["inventory"])),
        lexicon=read_lexicon(src / "lexicon.jsonl"),
        iv_terms=list(meta["iv_terms"]),
        oov_terms=list(meta["oov_terms"]),
        utterances=utterances,
    )
