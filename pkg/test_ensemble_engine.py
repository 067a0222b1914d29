"""
Tests for per-step ensemble operations and the decode loop.
"""

import logging

import numpy as np
import pytest

from vocab_bridge import ensemble_engine
from vocab_bridge.analysis import exact_match
from vocab_bridge.clients import ReplayClient, ToyNgramClient
from vocab_bridge.embed_store import Vocabulary
from vocab_bridge.ensemble_engine import (
    STATUS_FAILED,
    STATUS_OK,
    STATUS_ZERO_MASS,
    DecodeState,
    EnsembleSpec,
    ModelClient,
    TokenDistribution,
    decode,
    decode_step,
    filter_models,
    fuse,
    greedy_decode,
    load_trace,
    project,
    read_trace_digest,
    select_pivot,
    topk_truncate,
    write_trace,
)
from vocab_bridge.errors import ClientError, DimensionMismatchError, InvalidArgumentError, ZeroMassError
from vocab_bridge.fixtures import (
    LEXICON,
    SENTENCES,
    THREE_WAY_VOCABS,
    complementary_ngram_pair,
    three_way_clients,
    three_way_mapping,
)
from vocab_bridge.map_builder import MappingProvenance, NoiseConfig, RowKind, SparseMapping


def dist(probs, space="native", name="m"):
    return TokenDistribution(name, np.array(probs, dtype=np.float64), space)


def mapping_from_rows(rows, cols):
    """Build a SparseMapping from ``{row: [(col, weight), ...]}`` with rows given in order."""
    indptr, indices, scores, kinds = [0], [], [], []
    for row in rows:
        for j, w in row:
            indices.append(j)
            scores.append(w)
        kinds.append(RowKind.ALIGNED if row else RowKind.DROPPED_EMPTY)
        indptr.append(len(indices))
    provenance = MappingProvenance(bytes(32), bytes(32), NoiseConfig(row_normalize=False))
    return SparseMapping.from_arrays(len(rows), cols, np.array(indptr), np.array(indices, dtype=np.int64),
                                     np.array(scores), np.array(kinds), provenance)


# -- per-step operations ------------------------------------------------------

def test_topk_truncate_examples():
    out = topk_truncate(dist([0.5, 0.3, 0.2]), 2)
    np.testing.assert_allclose(out.probs, [0.625, 0.375, 0.0], atol=1e-12)
    q = dist([0.5, 0.3, 0.2])
    assert topk_truncate(q, 3) is q
    one_hot = dist([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(topk_truncate(one_hot, 1).probs, one_hot.probs)
    np.testing.assert_allclose(topk_truncate(dist([0.4, 0.2, 0.2, 0.2]), 2).probs, [2 / 3, 1 / 3, 0, 0])
    with pytest.raises(InvalidArgumentError):
        topk_truncate(q, 0)


def test_topk_truncate_renormalizes_short_support():
    short = TokenDistribution("m", [0.3, 0.2, 0.0])
    out = topk_truncate(short, 5)
    np.testing.assert_allclose(out.probs, [0.6, 0.4, 0.0])
    assert out.probs.sum() == pytest.approx(1.0)


class FixedClient(ModelClient):
    """Returns the same probabilities at every step, as given."""

    def __init__(self, name, vocabulary, probs):
        super().__init__(name, vocabulary)
        self.probs = probs

    def next_distribution(self, text_prefix, step=0):
        return TokenDistribution(self.name, self.probs)


def test_step_with_short_pivot_distribution(monkeypatch):
    vocab = Vocabulary.from_tokens(["a", "b", "c"])
    clients = [FixedClient("P", vocab, [0.3, 0.2, 0.0]), FixedClient("R", vocab, [0.2, 0.1, 0.7])]
    spec = EnsembleSpec(clients, "P", {"R": SparseMapping.identity(vocab)}, use_filter=False, max_len=1)

    fused_sums = []
    real_fuse = ensemble_engine.fuse

    def recording_fuse(*args, **kwargs):
        fused, fell_back = real_fuse(*args, **kwargs)
        fused_sums.append(fused.probs.sum())
        return fused, fell_back

    monkeypatch.setattr(ensemble_engine, "fuse", recording_fuse)
    token_id, _ = decode_step(spec, DecodeState(""))
    # [0.6, 0.4, 0] and [0.2, 0.1, 0.7] average to [0.4, 0.25, 0.35]
    assert token_id == 0
    assert fused_sums == [pytest.approx(1.0)]


def test_token_distribution_contracts():
    with pytest.raises(InvalidArgumentError):
        dist([0.5, -0.1, 0.6])
    with pytest.raises(InvalidArgumentError):
        dist([0.0, 0.0])
    with pytest.raises(ZeroMassError):
        TokenDistribution.from_weights("m", [0.0, 0.0])
    q = dist([0.2, 0.5, 0.3])
    with pytest.raises(ValueError):
        q.probs[0] = 1.0
    np.testing.assert_array_equal(q.top(2), [1, 2])
    np.testing.assert_array_equal(dist([0.0, 0.5, 0.5]).top(5), [1, 2])


def test_project_examples():
    w = mapping_from_rows([[(0, 1.0)], [(0, 0.5), (1, 0.5)], []], 2)
    p = project(dist([0.6, 0.4, 0.0]), w)
    assert p.space == "pivot"
    np.testing.assert_allclose(p.probs, [0.8, 0.2], atol=1e-12)

    one_hot = project(dist([0.0, 1.0, 0.0]), mapping_from_rows([[], [(1, 1.0)], []], 3))
    np.testing.assert_array_equal(one_hot.probs, [0.0, 1.0, 0.0])

    with pytest.raises(ZeroMassError):
        project(dist([0.0, 0.0, 1.0]), w)
    with pytest.raises(DimensionMismatchError):
        project(dist([0.5, 0.5]), w)
    with pytest.raises(InvalidArgumentError):
        project(dist([0.6, 0.4, 0.0], space="pivot"), w)


def test_project_renormalizes_after_mass_loss():
    w = mapping_from_rows([[(0, 1.0)], []], 2)
    np.testing.assert_allclose(project(dist([0.3, 0.7]), w).probs, [1.0, 0.0])


def projected_three_way():
    clients, mappings = three_way_clients()
    ps = []
    for client in clients:
        q = client.next_distribution("", 0)
        if client.name == "Q2":
            ps.append(TokenDistribution(client.name, q.probs, "pivot"))
        else:
            ps.append(project(q, mappings[client.name]))
    return ps


def test_filter_reproduces_three_model_example():
    assert filter_models(projected_three_way(), 3) == [0, 1, 1]


def test_filter_identical_and_disjoint():
    p = dist([0.1, 0.6, 0.3], "pivot")
    for n in (1, 2, 5):
        assert filter_models([p, p, p], n) == [1, 1, 1]
    a = dist([0.9, 0.1, 0.0, 0.0], "pivot")
    b = dist([0.0, 0.0, 0.1, 0.9], "pivot")
    assert filter_models([a, b], 1) == [0, 0]
    assert filter_models([a], 1) == [1]
    with pytest.raises(InvalidArgumentError):
        filter_models([a, b], 0)


def test_fuse_examples():
    ps = projected_three_way()
    fused, fell_back = fuse(ps, [0, 1, 1])
    assert not fell_back
    np.testing.assert_allclose(fused.probs, [0.03, 0.35, 0.40, 0.13, 0.09], atol=1e-9)
    assert fused.argmax() == 2

    everything, _ = fuse(ps, [1, 1, 1])
    np.testing.assert_allclose(everything.probs[:3], [0.56 / 3, 1 / 3, 0.83 / 3], atol=1e-9)
    assert everything.argmax() == 1

    single, _ = fuse(ps, [0, 0, 1])
    np.testing.assert_array_equal(single.probs, ps[2].probs)

    uniform = dist([0.25] * 4, "pivot")
    np.testing.assert_allclose(fuse([uniform, uniform], [1, 1])[0].probs, [0.25] * 4)


def test_fuse_fallback():
    a = dist([0.9, 0.1, 0.0], "pivot")
    b = dist([0.0, 0.2, 0.8], "pivot")
    fused, fell_back = fuse([a, b], [0, 0], fallback=b)
    assert fell_back
    np.testing.assert_array_equal(fused.probs, b.probs)
    fused, _ = fuse([a, b], [0, 0])
    np.testing.assert_allclose(fused.probs, [0.45, 0.15, 0.4])


def test_select_pivot():
    assert select_pivot({"a": 5, "c": 7, "b": 7}) == "b"
    assert select_pivot({"only": 3}) == "only"
    with pytest.raises(InvalidArgumentError):
        select_pivot({})


def test_rescaling_a_model_leaves_projection_order_unchanged():
    rng = np.random.default_rng(3)
    w = mapping_from_rows([[(int(j), float(rng.uniform(0.1, 1)))] for j in rng.integers(0, 12, 20)], 12)
    for _ in range(50):
        weights = rng.random(20) ** 3
        base = project(topk_truncate(TokenDistribution.from_weights("m", weights), 8), w)
        for c in (0.25, 3.0, 1000.0):
            scaled = project(topk_truncate(TokenDistribution.from_weights("m", c * weights), 8), w)
            assert scaled.argmax() == base.argmax()
            assert set(scaled.top(5).tolist()) == set(base.top(5).tolist())


# -- decoding -----------------------------------------------------------------

def three_way_spec(**overrides):
    clients, mappings = three_way_clients()
    settings = dict(pivot="Q2", mappings=mappings, n_filter=3, max_len=1)
    settings.update(overrides)
    return EnsembleSpec(clients, **settings)


def test_decode_emits_und_with_filtering():
    output, state = decode(three_way_spec(), "Die Katze")
    assert output == "und"
    record = state.step_log[0]
    assert {name: m.kept for name, m in record.models.items()} == {"Q1": 0, "Q2": 1, "Q3": 1}
    assert not record.fallback
    assert record.models["Q1"].top[0] == ("_Des", pytest.approx(0.5))
    assert record.models["Q3"].pivot_top[0] == ("und", pytest.approx(0.45))


def test_decode_without_filter_emits_typ():
    output, state = decode(three_way_spec(use_filter=False), "Die Katze")
    assert output == "_Typ"
    assert all(m.kept == 1 for m in state.step_log[0].models.values())


def test_concurrent_queries_match_sequential():
    sequential = decode(three_way_spec(), "x")[1].step_log[0].to_dict()
    concurrent = decode(three_way_spec(max_workers=3), "x")[1].step_log[0].to_dict()
    assert sequential == concurrent


def word_vocab():
    return Vocabulary.from_tokens(["▁" + w for w in LEXICON] + ["▁", "</s>"])


def trained_lm(name, vocab):
    return ToyNgramClient(name, vocab, order=3).train([" " + s for s in SENTENCES])


@pytest.mark.parametrize("prompt", [" the cat", " a big", " the dog ran", " the"])
def test_clone_ensemble_is_a_no_op(prompt):
    vocab = word_vocab()
    lm, clone = trained_lm("lm", vocab), trained_lm("clone", vocab)
    spec = EnsembleSpec([lm, clone], "lm", {"clone": SparseMapping.identity(vocab)}, max_len=8)
    output, state = decode(spec, prompt)
    assert output == greedy_decode(lm, prompt, max_len=8)
    assert all(record.models["clone"].kept == 1 for record in state.step_log)


def scripted(name, vocab, tokens_and_probs):
    return ReplayClient(name, vocab, tokens_and_probs)


def test_replay_script_is_reproduced():
    vocab = Vocabulary.from_tokens(["a", "b", "c", "d", "</s>"])
    expected = ["a", "b", "c", "d", "a"]
    fillers = ["b", "c", "d", "a", "c"]
    first = scripted("first", vocab, [[(x, 0.6), (y, 0.4)] for x, y in zip(expected, fillers)])
    second = scripted("second", vocab, [[(x, 0.7), ("</s>", 0.3)] for x in expected])
    spec = EnsembleSpec([first, second], "first", {"second": SparseMapping.identity(vocab)}, max_len=5)
    output, state = decode(spec, "")
    assert output == "abcda"
    assert [r.token for r in state.step_log] == expected
    assert state.steps == 5 and state.finished


def test_stop_token_at_first_step():
    vocab = Vocabulary.from_tokens(["a", "b", "</s>"])
    pivot = scripted("p", vocab, [[("</s>", 0.8), ("a", 0.2)]])
    other = scripted("q", vocab, [[("</s>", 0.6), ("b", 0.4)]])
    output, state = decode(EnsembleSpec([pivot, other], "p", {"q": SparseMapping.identity(vocab)}), "hi")
    assert output == ""
    assert state.steps == 1
    assert state.step_log[0].stop


def test_max_len_bounds_output():
    vocab = word_vocab()
    lm = ToyNgramClient("lm", vocab, order=1).train([" cat cat cat"])
    clone = ToyNgramClient("clone", vocab, order=1).train([" cat cat cat"])
    output, state = decode(EnsembleSpec([lm, clone], "lm", {"clone": SparseMapping.identity(vocab)}, max_len=4), "")
    assert state.steps == 4
    assert output == " cat cat cat cat"
    assert decode(EnsembleSpec([lm, clone], "lm", {"clone": SparseMapping.identity(vocab)}, max_len=0), "")[0] == ""


def test_finished_state_cannot_step():
    spec = three_way_spec()
    _, state = decode(spec, "x")
    with pytest.raises(InvalidArgumentError):
        decode_step(spec, state)


class BrokenClient(ModelClient):
    def next_distribution(self, text_prefix, step=0):
        raise ClientError(f"{self.name}: backend unavailable")


def test_failure_policy_drop_and_abort(caplog):
    clients, mappings = three_way_clients()
    broken = BrokenClient("Q1", clients[0].vocabulary)
    with caplog.at_level(logging.WARNING):
        output, state = decode(EnsembleSpec([broken] + clients[1:], "Q2", mappings, n_filter=3, max_len=1), "")
    assert output == "und"
    assert state.step_log[0].models["Q1"].status == STATUS_FAILED
    assert "backend unavailable" in state.step_log[0].models["Q1"].error
    assert "dropping it for this step" in caplog.text

    strict = EnsembleSpec([broken] + clients[1:], "Q2", mappings, max_len=1, failure_policy="abort")
    with pytest.raises(ClientError, match="failed at step 0"):
        decode(strict, "")

    vocab = clients[1].vocabulary
    all_broken = EnsembleSpec([BrokenClient("Q2", vocab), BrokenClient("Q3", vocab)], "Q2",
                              {"Q3": SparseMapping.identity(vocab)})
    with pytest.raises(ClientError, match="Every model failed"):
        decode(all_broken, "")


def test_unmapped_support_counts_as_filtered():
    vocabs = {name: Vocabulary.from_tokens(tokens) for name, tokens in THREE_WAY_VOCABS.items()}
    q1 = scripted("Q1", vocabs["Q1"], [[("_Ext", 1.0)]])
    q2 = scripted("Q2", vocabs["Q2"], [[("_Typ", 0.6), ("und", 0.4)]])
    spec = EnsembleSpec([q1, q2], "Q2", {"Q1": three_way_mapping(vocabs["Q1"], vocabs["Q2"])}, max_len=1)
    output, state = decode(spec, "")
    assert output == "_Typ"
    assert state.step_log[0].models["Q1"].status == STATUS_ZERO_MASS
    assert state.step_log[0].models["Q2"].status == STATUS_OK


def test_all_filtered_falls_back_to_pivot(caplog):
    vocab = Vocabulary.from_tokens(["a", "b", "c", "d"])
    pivot = scripted("p", vocab, [[("a", 0.9), ("b", 0.1)]])
    other = scripted("q", vocab, [[("d", 0.8), ("c", 0.2)]])
    spec = EnsembleSpec([pivot, other], "p", {"q": SparseMapping.identity(vocab)}, n_filter=1, max_len=1)
    with caplog.at_level(logging.WARNING):
        output, state = decode(spec, "")
    assert output == "a"
    assert state.step_log[0].fallback
    assert "every model was filtered out" in caplog.text


def test_spec_validation():
    clients, mappings = three_way_clients()
    with pytest.raises(InvalidArgumentError, match="at least 2"):
        EnsembleSpec(clients[:1], "Q1")
    with pytest.raises(InvalidArgumentError, match="not one of"):
        EnsembleSpec(clients, "Q9", mappings)
    with pytest.raises(InvalidArgumentError, match="No mapping"):
        EnsembleSpec(clients, "Q2", {"Q1": mappings["Q1"]})
    with pytest.raises(DimensionMismatchError):
        EnsembleSpec(clients, "Q2", {"Q1": SparseMapping.identity(clients[1].vocabulary), "Q3": mappings["Q3"]})
    with pytest.raises(InvalidArgumentError, match="unique"):
        EnsembleSpec([clients[1], clients[1]], "Q2")


# -- properties over random steps ------------------------------------------------

def random_distribution(rng, size):
    weights = rng.random(size) ** 4
    weights[rng.random(size) < 0.3] = 0.0
    weights[rng.integers(size)] += 0.05
    return weights / weights.sum()


def random_mapping(rng, rows, cols):
    table = []
    for _ in range(rows):
        if rng.random() < 0.2:
            table.append([])
            continue
        picked = rng.choice(cols, size=int(rng.integers(1, min(3, cols) + 1)), replace=False)
        table.append(sorted((int(j), float(rng.uniform(0.1, 1.0))) for j in picked))
    return mapping_from_rows(table, cols)


def test_fuzzed_steps_keep_distribution_contracts():
    rng = np.random.default_rng(42)
    zero_mass = 0
    for trial in range(1000):
        sizes = rng.integers(3, 30, size=int(rng.integers(2, 5)))
        pivot = int(np.argmax(sizes))
        k, n = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        ps = []
        for ell, size in enumerate(sizes):
            q = topk_truncate(TokenDistribution(f"m{ell}", random_distribution(rng, size)), k)
            assert np.count_nonzero(q.probs) <= k
            assert abs(q.probs.sum() - 1) <= 1e-9
            if ell == pivot:
                ps.append(TokenDistribution(q.model_id, q.probs, "pivot"))
                continue
            try:
                ps.append(project(q, random_mapping(rng, size, sizes[pivot])))
            except ZeroMassError:
                zero_mass += 1
        pivot_dist = next(p for p in ps if p.model_id == f"m{pivot}")
        verdicts = filter_models(ps, n)
        fused, fell_back = fuse(ps, verdicts, pivot_dist)

        assert fell_back == (sum(verdicts) == 0)
        assert np.all(fused.probs >= 0)
        assert abs(fused.probs.sum() - 1) <= 1e-9
        survivors = [p for p, keep in zip(ps, verdicts) if keep] or [pivot_dist]
        support = np.any([p.probs > 0 for p in survivors], axis=0)
        assert not np.any(fused.probs[~support] > 0)
        if all(verdicts):
            np.testing.assert_array_equal(fused.probs, np.mean([p.probs for p in ps], axis=0))
    assert zero_mass < 1000


def test_fuzzed_decode_steps_with_replay_clients():
    rng = np.random.default_rng(7)
    for trial in range(200):
        sizes = rng.integers(3, 20, size=3)
        vocabs = [Vocabulary.from_tokens([f"m{ell}t{i}" for i in range(s)] + ["</s>"]) for ell, s in enumerate(sizes)]
        clients = []
        for ell, vocab in enumerate(vocabs):
            script = []
            for _ in range(3):
                probs = random_distribution(rng, len(vocab))
                script.append([(vocab.tokens[i], float(probs[i])) for i in np.flatnonzero(probs)])
            clients.append(ReplayClient(f"m{ell}", vocab, script))
        pivot = clients[int(np.argmax([len(v) for v in vocabs]))]
        mappings = {
            c.name: random_mapping(rng, len(c.vocabulary), len(pivot.vocabulary))
            for c in clients if c is not pivot
        }
        spec = EnsembleSpec(clients, pivot.name, mappings, k_trunc=int(rng.integers(1, 10)),
                            n_filter=int(rng.integers(1, 5)), max_len=3)
        _, state = decode(spec, "")
        assert 1 <= state.steps <= 3
        for record in state.step_log:
            assert record.token == pivot.vocabulary.tokens[record.token_id]


# -- the complementarity construction ------------------------------------------

def test_complementary_models_recover_both_halves():
    task = complementary_ngram_pair()
    even, odd = task.clients
    individual = [
        exact_match([greedy_decode(c, p, max_len=1) for p in task.prompts], task.answers)
        for c in task.clients
    ]
    spec = EnsembleSpec(task.clients, "even", {"odd": SparseMapping.identity(odd.vocabulary)},
                        n_filter=3, max_len=1)
    ensemble = exact_match([decode(spec, p)[0] for p in task.prompts], task.answers)
    assert ensemble >= max(individual)
    assert ensemble >= 0.95
    assert max(individual) < 0.9


# -- traces -------------------------------------------------------------------

def test_trace_round_trip(tmp_path):
    spec = three_way_spec()
    states = [decode(spec, prompt)[1] for prompt in ("Die Katze", "Der Hund")]
    write_trace(tmp_path / "trace.jsonl", states, digest="abc123")
    assert read_trace_digest(tmp_path / "trace.jsonl") == "abc123"
    assert read_trace_digest(tmp_path / "missing.jsonl") is None
    loaded = load_trace(tmp_path / "trace.jsonl")
    assert [s.prompt for s in loaded] == ["Die Katze", "Der Hund"]
    assert [s.generated for s in loaded] == ["und", "und"]
    for original, restored in zip(states, loaded):
        assert [r.to_dict() for r in restored.step_log] == [r.to_dict() for r in original.step_log]


def test_decode_state_prefix():
    state = DecodeState("Hello")
    state.generated = " world"
    assert state.text_prefix == "Hello world"
    assert state.steps == 0
