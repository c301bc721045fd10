import itertools

import numpy as np
import pytest

from gridstd.embedding import (ARPABET, EmbeddingError, HashEmbedder, PhonemeInventory, Term,
                               average_embeddings, embed_term, embed_with_pronunciations,
                               read_lexicon, write_lexicon)
from gridstd.loss import cosine


def test_deterministic():
    a = embed_term("k ae t", 64, seed=3)
    b = embed_term(["k", "ae", "t"], 64, seed=3)
    assert np.array_equal(a, b)


def test_unit_norm_and_self_cosine():
    v = embed_term("s ih t iy", 64)
    assert abs(np.linalg.norm(v) - 1) < 1e-9
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def test_seed_changes_vector():
    assert not np.array_equal(embed_term("k ae t", 64, 0), embed_term("k ae t", 64, 1))


def test_order_sensitive():
    assert not np.allclose(embed_term("aa b", 64), embed_term("b aa", 64))


@pytest.mark.parametrize("seq,dim", [("", 64), ([], 64), ("k ae t", 4)])
def test_bad_input(seq, dim):
    with pytest.raises(EmbeddingError):
        embed_term(seq, dim)


def test_unknown_phoneme():
    inv = PhonemeInventory.default()
    with pytest.raises(EmbeddingError):
        embed_term("k zz t", 64, inventory=inv)
    with pytest.raises(EmbeddingError):
        Term.from_strings("x", "k zz").validate(inv)


def test_random_pairs_are_spread():
    # regression bound frozen from the observed distribution at K=64
    rng = np.random.default_rng(0)
    cos = []
    while len(cos) < 100:
        a = [ARPABET[i] for i in rng.integers(0, 40, rng.integers(3, 9))]
        b = [ARPABET[i] for i in rng.integers(0, 40, rng.integers(3, 9))]
        if a != b:
            cos.append(abs(cosine(embed_term(a, 64), embed_term(b, 64))))
    assert np.mean(cos) < 0.5
    assert max(cos) < 0.999


def test_single_and_repeated_pronunciations():
    one = Term.from_strings("cat", "k ae t")
    two = Term.from_strings("cat", "k ae t", "k ae t")
    base = embed_term("k ae t", 64)
    assert np.array_equal(embed_with_pronunciations(one, 64), base)
    assert np.allclose(embed_with_pronunciations(two, 64), base, atol=1e-15)


def test_orthogonal_average():
    u, v = np.eye(8)[0], np.eye(8)[1]
    m = average_embeddings([u, v])
    assert np.allclose(m, (u + v) / np.sqrt(2))
    assert cosine(m, u) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_cancelling_average():
    u = np.eye(8)[0]
    with pytest.raises(EmbeddingError):
        average_embeddings([u, -u])


def test_multi_pronunciation_unit_norm():
    t = Term.from_strings("either", "iy dh er", "ay dh er")
    assert abs(np.linalg.norm(HashEmbedder(64)(t)) - 1) < 1e-9


def test_lexicon_round_trip(tmp_path):
    terms = [Term.from_strings("a", "k ae t"), Term.from_strings("b", "iy dh er", "ay dh er")]
    write_lexicon(tmp_path / "lex.jsonl", terms)
    assert read_lexicon(tmp_path / "lex.jsonl") == terms
    first = (tmp_path / "lex.jsonl").read_text().splitlines()[0]
    assert first == '{"id": "a", "prons": [["k", "ae", "t"]]}'


def test_bad_lexicon(tmp_path):
    (tmp_path / "lex.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(EmbeddingError):
        read_lexicon(tmp_path / "lex.jsonl")


def test_inventory():
    inv = PhonemeInventory.default(40)
    assert len(inv) == 40 and len(set(inv.symbols)) == 40
    with pytest.raises(EmbeddingError):
        PhonemeInventory(("a", "a"))
    with pytest.raises(EmbeddingError):
        PhonemeInventory(())


def test_embed_many():
    terms = [Term.from_strings(str(i), " ".join(p)) for i, p in
             enumerate(itertools.islice(itertools.permutations(ARPABET[:5], 3), 6))]
    out = HashEmbedder(32, 1).embed_many(terms)
    assert out.shape == (6, 32)
    assert np.allclose(np.linalg.norm(out, axis=1), 1)
