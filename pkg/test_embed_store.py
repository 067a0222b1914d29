"""
Tests for vocabularies, embedding files and preprocessing.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vocab_bridge.embed_store import (
    EmbeddingSet,
    Vocabulary,
    load_embeddings,
    load_vocabulary,
    preprocess,
    save_embeddings,
)
from vocab_bridge.errors import ArtifactIOError, EmbeddingFormatError


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_word2vec_text(tmp_path):
    path = write_text(tmp_path / "e.vec", "3 2\na 1 0\nb 0 1\nc 1 1\n")
    e = load_embeddings(path)
    assert len(e) == 3
    assert e.dim == 2
    assert e.vocab.tokens == ("a", "b", "c")
    assert not e.preprocessed
    np.testing.assert_array_equal(e.matrix, [[1, 0], [0, 1], [1, 1]])


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("2 2\na 1 0\nb 0 1 1\n", ":3: dimension mismatch"),
        ("two 2\na 1 0\n", ":1: malformed header"),
        ("2 2\na 1 0\na 0 1\n", "duplicate token 'a'"),
        ("2 2\na 1 0\nb nan 1\n", ":3: non-finite"),
        ("3 2\na 1 0\nb 0 1\n", "header declares 3 rows, found 2"),
    ],
)
def test_load_rejects_malformed_files(tmp_path, text, fragment):
    path = write_text(tmp_path / "bad.vec", text)
    with pytest.raises(EmbeddingFormatError, match=fragment):
        load_embeddings(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(ArtifactIOError) as info:
        load_embeddings(tmp_path / "nope.vec")
    assert info.value.exit_code == 4


def test_binary_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    matrix = rng.standard_normal((20, 7)).astype(np.float32)
    e = EmbeddingSet(Vocabulary.from_tokens([f"▁tok{i}" for i in range(20)]), matrix)
    save_embeddings(e, tmp_path / "e.bin", "binary-native")
    loaded = load_embeddings(tmp_path / "e.bin", "binary-native")
    assert loaded.vocab.tokens == e.vocab.tokens
    assert loaded.matrix.tobytes() == e.matrix.tobytes()


def test_text_round_trip_keeps_float32_values(tmp_path):
    rng = np.random.default_rng(1)
    e = EmbeddingSet(Vocabulary.from_tokens(["x", "y", "z"]), rng.standard_normal((3, 4)).astype(np.float32))
    save_embeddings(e, tmp_path / "e.vec", "word2vec-text")
    np.testing.assert_array_equal(load_embeddings(tmp_path / "e.vec").matrix, e.matrix)


def test_binary_truncated_file(tmp_path):
    e = EmbeddingSet(Vocabulary.from_tokens(["a", "b"]), np.eye(2, dtype=np.float32))
    save_embeddings(e, tmp_path / "e.bin")
    data = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-3])
    with pytest.raises(EmbeddingFormatError, match="expected 16 bytes"):
        load_embeddings(tmp_path / "short.bin", "binary-native")


def test_vocabulary_invariants():
    vocab = Vocabulary.from_tokens(["a", "b", "c"])
    assert all(vocab.index[t] == i for i, t in enumerate(vocab.tokens))
    with pytest.raises(EmbeddingFormatError, match="Duplicate"):
        Vocabulary.from_tokens(["a", "b", "a"])
    with pytest.raises(EmbeddingFormatError, match="at least 2"):
        Vocabulary.from_tokens(["a"])


def test_vocabulary_digest_depends_on_order():
    assert Vocabulary.from_tokens(["a", "b"]).digest() != Vocabulary.from_tokens(["b", "a"]).digest()
    assert Vocabulary.from_tokens(["ab", "c"]).digest() != Vocabulary.from_tokens(["a", "bc"]).digest()


def test_unicode_normalization_is_opt_in():
    composed, decomposed = "\u00e9", "e\u0301"
    assert len(Vocabulary.from_tokens([composed, decomposed])) == 2
    with pytest.raises(EmbeddingFormatError):
        Vocabulary.from_tokens([composed, decomposed], normalize_unicode=True)


def test_load_vocabulary(tmp_path):
    path = write_text(tmp_path / "v.json", '["▁a", "b", "</s>"]')
    assert load_vocabulary(path).tokens == ("▁a", "b", "</s>")
    write_text(tmp_path / "bad.json", '{"a": 1}')
    with pytest.raises(EmbeddingFormatError):
        load_vocabulary(tmp_path / "bad.json")


def test_preprocess_hand_computed():
    e = EmbeddingSet(Vocabulary.from_tokens(["a", "b"]), [[2.0, 0.0], [0.0, 2.0]])
    out, zero_rows = preprocess(e)
    h = np.sqrt(0.5)
    np.testing.assert_allclose(out.matrix, [[h, -h], [-h, h]], atol=1e-4)
    assert out.preprocessed
    assert zero_rows == []


def test_preprocess_fixed_point():
    m = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    out, _ = preprocess(EmbeddingSet(Vocabulary.from_tokens("abcd"), m))
    np.testing.assert_allclose(out.matrix, m, atol=1e-9)


def test_preprocess_keeps_zero_rows():
    m = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, -1.0], [-2.0, 0.5]])
    out, zero_rows = preprocess(EmbeddingSet(Vocabulary.from_tokens("abcd"), m))
    assert zero_rows == [1]
    np.testing.assert_array_equal(out.matrix[1], [0.0, 0.0])


def test_preprocess_is_idempotent():
    rng = np.random.default_rng(3)
    once, _ = preprocess(EmbeddingSet(Vocabulary.from_tokens([str(i) for i in range(10)]), rng.normal(size=(10, 4))))
    twice, zero_rows = preprocess(once)
    np.testing.assert_allclose(twice.matrix, once.matrix, atol=1e-9)
    assert zero_rows == []


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 6)),
              elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False)))
def test_preprocess_rows_are_unit_or_zero(matrix):
    vocab = Vocabulary.from_tokens([f"t{i}" for i in range(matrix.shape[0])])
    out, zero_rows = preprocess(EmbeddingSet(vocab, matrix))
    assert out.matrix.shape == matrix.shape
    assert out.vocab is vocab
    norms = np.linalg.norm(out.matrix, axis=1)
    for i, norm in enumerate(norms):
        if i in zero_rows:
            assert norm == 0.0
        else:
            assert abs(norm - 1.0) <= 1e-6
