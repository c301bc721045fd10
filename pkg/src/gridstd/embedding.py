"""Phonetic term embeddings.

The detector only needs *some* fixed map from phoneme sequences to unit
vectors.  ``HashEmbedder`` is a deterministic stand-in for a trained
embedding network: every phoneme unigram and bigram (with word-boundary
markers) is hashed into one of ``K`` buckets with a pseudo-random sign, the
counts are summed and the result is L2-normalized.  Terms sharing phonetic
material therefore get correlated vectors, which is what lets a model
generalize to terms it never saw in training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS = "<w>"
EOS = "</w>"

# CMU/ARPAbet symbols plus the TIMIT flap; 40 in total.
ARPABET = (
    "aa ae ah ao aw ay b ch d dh eh er ey f g hh ih iy jh k "
    "l m n ng ow oy p r s sh t th uh uw v w y z zh dx"
).split()


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols:
            raise EmbeddingError("phoneme inventory is empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise EmbeddingError("phoneme symbols must be unique")
        if BOS in self.symbols or EOS in self.symbols:
            raise EmbeddingError("boundary markers cannot be phonemes")

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol) -> bool:
        return symbol in self._index

    @property
    def _index(self) -> dict[str, int]:
        # frozen dataclass: cache lazily via object.__setattr__
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise EmbeddingError(f"unknown phoneme {symbol!r}") from None

    @classmethod
    def default(cls, size: int = 40) -> "PhonemeInventory":
        if size <= len(ARPABET):
            return cls(tuple(ARPABET[:size]))
        return cls(tuple(ARPABET) + tuple(f"p{i:03d}" for i in range(size - len(ARPABET))))


@dataclass(frozen=True)
class Term:
    id: str
    pronunciations: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.pronunciations:
            raise EmbeddingError(f"term {self.id!r} has no pronunciations")
        for p in self.pronunciations:
            if not p:
                raise EmbeddingError(f"term {self.id!r} has an empty pronunciation")

    @classmethod
    def from_strings(cls, id: str, *prons: str) -> "Term":
        return cls(id, tuple(tuple(p.split()) for p in prons))

    def validate(self, inventory: PhonemeInventory) -> None:
        for pron in self.pronunciations:
            for p in pron:
                inventory.index(p)


def _ngrams(seq: Sequence[str]) -> list[str]:
    padded = [BOS, *seq, EOS]
    grams = list(seq)
    grams.extend(f"{a} {b}" for a, b in zip(padded[:-1], padded[1:]))
    return grams


def _bucket(gram: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        gram.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little", signed=True)
    ).digest()
    h = int.from_bytes(digest, "little")
    sign = 1.0 if (h >> 63) & 1 else -1.0
    return h % dim, sign


def embed_term(
    seq: Sequence[str] | str,
    dim: int,
    seed: int = 0,
    inventory: PhonemeInventory | None = None,
) -> np.ndarray:
    """Unit-norm signed-hash embedding of one phoneme sequence."""
    if isinstance(seq, str):
        seq = seq.split()
    if len(seq) == 0:
        raise EmbeddingError("cannot embed an empty phoneme sequence")
    if dim < 8:
        raise EmbeddingError(f"embedding dimension must be >= 8, got {dim}")
    if inventory is not None:
        for p in seq:
            inventory.index(p)
    vec = np.zeros(dim)
    for gram in _ngrams(seq):
        b, s = _bucket(gram, dim, seed)
        vec[b] += s
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise EmbeddingError(f"hash collisions cancelled every n-gram of {' '.join(seq)!r}")
    return vec / norm


def average_embeddings(vectors: Iterable[np.ndarray]) -> np.ndarray:
    vectors = np.asarray(list(vectors), dtype=float)
    mean = vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise EmbeddingError("pronunciation embeddings cancel out")
    return mean / norm


def embed_with_pronunciations(
    term: Term, dim: int, seed: int = 0, inventory: PhonemeInventory | None = None
) -> np.ndarray:
    """Mean of per-pronunciation embeddings, re-normalized to unit length."""
    if len(term.pronunciations) == 1:
        return embed_term(term.pronunciations[0], dim, seed, inventory)
    return average_embeddings(embed_term(p, dim, seed, inventory) for p in term.pronunciations)


class HashEmbedder:
    """Callable ``Term -> unit vector``; any object with this shape can replace it."""

    def __init__(self, dim: int = 64, seed: int = 0, inventory: PhonemeInventory | None = None):
        self.dim = dim
        self.seed = seed
        self.inventory = inventory

    def __call__(self, term: Term) -> np.ndarray:
        return embed_with_pronunciations(term, self.dim, self.seed, self.inventory)

    def embed_many(self, terms: Sequence[Term]) -> np.ndarray:
        return np.stack([self(t) for t in terms]) if terms else np.zeros((0, self.dim))


def write_lexicon(path: str | Path, terms: Iterable[Term]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in terms:
            fh.write(json.dumps({"id": t.id, "prons": [list(p) for p in t.pronunciations]}) + "\n")


def read_lexicon(path: str | Path) -> list[Term]:
    terms = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                terms.append(Term(rec["id"], tuple(tuple(p) for p in rec["prons"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise EmbeddingError(f"{path}:{lineno}: bad lexicon record ({exc})") from exc
    return terms
