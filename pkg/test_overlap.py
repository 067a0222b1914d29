"""
Tests for the shared-token dictionary.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vocab_bridge.embed_store import Vocabulary
from vocab_bridge.overlap import build_overlap, overlap_matrix, overlap_rate, overlap_report


def vocab(*tokens):
    return Vocabulary.from_tokens(tokens)


def test_enumerates_shared_tokens():
    d = build_overlap(vocab("a", "b", "c"), vocab("b", "c", "d"))
    assert d.pairs == ((1, 0), (2, 1))
    assert overlap_rate(d, "target") == pytest.approx(2 / 3, abs=1e-9)


def test_identical_vocabularies():
    v = vocab("x", "y", "z", "w")
    d = build_overlap(v, v)
    assert len(d) == 4
    assert overlap_rate(d) == 1.0


def test_empty_intersection():
    d = build_overlap(vocab("a", "b"), vocab("c", "d"))
    assert len(d) == 0
    assert overlap_rate(d, "source") == 0.0


def test_byte_exact_by_default_and_marker_option():
    vq, vp = vocab("▁the", "cat"), vocab(" the", "cat", "dog")
    assert build_overlap(vq, vp).pairs == ((1, 1),)
    assert build_overlap(vq, vp, marker_as_space=True).pairs == ((0, 0), (1, 1))


def test_report_fields():
    vq = vocab("a", "b", "c")
    report = overlap_report(build_overlap(vq, vocab("b", "c", "d", "e")), vq, include_pairs=True)
    assert report["pairs"] == 2
    assert report["rate_source"] == pytest.approx(2 / 3)
    assert report["rate_target"] == pytest.approx(0.5)
    assert report["pair_list"] == [[1, 0, "b"], [2, 1, "c"]]


def test_overlap_matrix_orders_by_size():
    names, rates = overlap_matrix({
        "big": vocab("a", "b", "c", "d"),
        "small": vocab("a", "z"),
        "mid": vocab("a", "b", "q"),
    })
    assert names == ["small", "mid", "big"]
    np.testing.assert_allclose(np.diag(rates), 1.0)
    assert rates[0, 2] == pytest.approx(1 / 2)
    assert rates[2, 1] == pytest.approx(2 / 4)


token_sets = st.sets(st.text(alphabet="abc▁", min_size=1, max_size=3), min_size=2, max_size=15)


@settings(max_examples=100, deadline=None)
@given(token_sets, token_sets)
def test_transpose_and_rate_identity(a, b):
    va, vb = vocab(*sorted(a)), vocab(*sorted(b))
    forward, backward = build_overlap(va, vb), build_overlap(vb, va)
    assert forward.transpose().pairs == backward.pairs
    assert len({i for i, _ in forward.pairs}) == len(forward)
    assert len({j for _, j in forward.pairs}) == len(forward)
    for i, j in forward.pairs:
        assert va.tokens[i] == vb.tokens[j]
    assert overlap_rate(forward, "source") * len(va) == pytest.approx(len(forward))
    assert overlap_rate(forward, "target") * len(vb) == pytest.approx(len(forward))


@settings(max_examples=50, deadline=None)
@given(token_sets, token_sets, st.sets(st.text(alphabet="xyz", min_size=1, max_size=2), min_size=1, max_size=5))
def test_rate_grows_when_tokens_join_both(a, b, extra):
    before = build_overlap(vocab(*sorted(a)), vocab(*sorted(b)))
    after = build_overlap(vocab(*sorted(a | extra)), vocab(*sorted(b | extra)))
    assert overlap_rate(after, "source") >= overlap_rate(before, "source") - 1e-12
