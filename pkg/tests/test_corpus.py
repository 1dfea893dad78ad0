import numpy as np
import pytest

from zloss.corpus import (BOS, UNK, NgramDataset, Vocab, batch_stream, build_vocab,
                          encode_ngrams, read_lines, synthetic_corpus)
from zloss.metrics import DataError


def test_vocab_hand_example():
    v = build_vocab(["a b a"], max_size=2)
    assert v.tokens[:2] == ["a", "b"]
    assert v.encode("a") == 0 and v.encode("b") == 1
    assert v.encode("zzz") == v.unk_id
    assert v.tokens[v.bos_id] == BOS
    assert v.counts.tolist()[:3] == [2, 1, 0]


def test_vocab_truncation_moves_counts_to_unk():
    v = build_vocab(["x x x y y z w"], max_size=2)
    assert v.tokens[:2] == ["x", "y"]
    assert v.counts[v.unk_id] == 2
    assert v.counts.sum() == 7


def test_vocab_literal_unk_is_ranked():
    v = build_vocab([f"{UNK} {UNK} a b b c"], max_size=3)
    assert v.tokens[:3] == [UNK, "b", "a"]
    assert v.unk_id == 0
    assert v.counts[0] == 3  # two literal + dropped "c"


def test_vocab_min_count_and_ties():
    v = build_vocab(["q r q r s"], min_count=2)
    assert v.tokens[:2] == ["q", "r"]  # tie broken by first occurrence
    assert "s" not in v.tokens


def test_vocab_no_unseen_unk_when_everything_fits():
    lines = ["the cat sat", "on the mat"]
    v = build_vocab(lines, max_size=100)
    ids = [v.encode(t) for line in lines for t in line.split()]
    assert v.unk_id not in ids


def test_vocab_deterministic_and_roundtrip(tmp_path):
    lines = synthetic_corpus(3000, vocab_size=100, seed=1)
    a, b = build_vocab(lines, 50), build_vocab(lines, 50)
    assert a.tokens == b.tokens
    path = tmp_path / "vocab.txt"
    a.save(path)
    c = Vocab.load(path)
    assert c.tokens == a.tokens and c.unk_id == a.unk_id and c.bos_id == a.bos_id
    np.testing.assert_array_equal(c.counts, a.counts)


def test_vocab_load_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("3\t<unk>\t\na\t1\n")
    with pytest.raises(DataError):
        Vocab.load(p)
    p.write_text("1\t<oops>\t\na\t1\n")
    with pytest.raises(DataError):
        Vocab.load(p)


def test_empty_corpus():
    with pytest.raises(DataError):
        build_vocab(["", "  "])


def test_read_lines_missing_file(tmp_path):
    with pytest.raises(DataError):
        list(read_lines(tmp_path / "nope.txt"))


def test_encode_hand_example():
    v = build_vocab(["a b"])
    ds = encode_ngrams(["a b"], v, 3)
    s, a, b = v.bos_id, v.encode("a"), v.encode("b")
    assert ds.contexts.tolist() == [[s, s], [s, a]]
    assert ds.targets.tolist() == [a, b]


def test_encode_counts_and_single_token():
    lines = ["a", "b c d", "", "e f"]
    v = build_vocab(lines)
    assert len(encode_ngrams(["a"], v, 4)) == 1
    assert len(encode_ngrams(lines, v, 4)) == 6
    with pytest.raises(ValueError):
        encode_ngrams(lines, v, 1)
    with pytest.raises(DataError):
        encode_ngrams([""], v, 2)


def test_dataset_cache_roundtrip(tmp_path, rng):
    ds = NgramDataset(rng.integers(0, 1000, size=(37, 4)), rng.integers(0, 1000, size=37))
    path = tmp_path / "ng.bin"
    ds.save(path)
    back = NgramDataset.load(path)
    np.testing.assert_array_equal(back.contexts, ds.contexts)
    np.testing.assert_array_equal(back.targets, ds.targets)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(DataError):
        NgramDataset.load(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        NgramDataset.load(path)


def test_dataset_shape_check():
    with pytest.raises(DataError):
        NgramDataset(np.zeros((3, 2)), np.zeros(4))


def test_batch_stream_sizes_and_order():
    ds = NgramDataset(np.arange(20).reshape(10, 2), np.arange(10))
    batches = list(batch_stream(ds, 4))
    assert [len(t) for _, t in batches] == [4, 4, 2]
    assert np.concatenate([t for _, t in batches]).tolist() == list(range(10))
    s1 = np.concatenate([t for _, t in batch_stream(ds, 3, seed=5)])
    s2 = np.concatenate([t for _, t in batch_stream(ds, 3, seed=5)])
    np.testing.assert_array_equal(s1, s2)
    assert sorted(s1.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        list(batch_stream(ds, 0))


def test_synthetic_corpus_shape():
    lines = synthetic_corpus(5000, vocab_size=300, seed=3)
    assert sum(len(l.split()) for l in lines) == 5000
    assert lines == synthetic_corpus(5000, vocab_size=300, seed=3)
    counts = build_vocab(lines).counts
    assert counts[0] > 10 * np.median(counts[counts > 0])  # heavy head
