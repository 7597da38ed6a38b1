import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlst.data import EOS
from rlst.episode import READ, WRITE, Rollout, constant_outputs, infer_batch
from rlst.metrics import (corpus_bleu, evaluate, token_accuracy, trace_actions)
import oracles
from conftest import small_net, zero_net

sentences = st.lists(st.integers(4, 8), min_size=1, max_size=10)


def test_bleu_perfect():
    assert corpus_bleu([[4, 5, 6, 7, 8]], [[4, 5, 6, 7, 8]]) == 1.0


def test_bleu_no_bigram_matches():
    cand = "the the the the".split()
    ref = "the cat is here".split()
    assert corpus_bleu([cand], [ref]) == 0.0
    assert corpus_bleu([cand], [ref], smoothing="add-one") > 0.0


def test_bleu_two_sentence_hand_count():
    cands = ["a b c d e".split(), "x y z".split()]
    refs = ["a b c e d".split(), "x y w z".split()]
    score, num, den, c, r = oracles.hand_bleu(cands, refs)
    assert (num, den, c, r) == ([8, 3, 1, 0], [8, 6, 4, 2], 8, 9)
    assert corpus_bleu(cands, refs) == pytest.approx(score, abs=1e-9)


def test_bleu_hand_numbers():
    # cand "a b c d", ref "a b c e d": p1 = 4/4, p2 = 2/3, p3 = 1/2, p4 = 0
    assert corpus_bleu(["a b c d".split()], ["a b c e d".split()]) == 0.0
    s = corpus_bleu(["a b c d".split()], ["a b c e d".split()], smoothing="add-one")
    expected = (1.0 * (3 / 4) * (2 / 3) * (1 / 2)) ** 0.25 * np.exp(1 - 5 / 4)
    assert s == pytest.approx(expected, abs=1e-12)


def test_bleu_short_sentences_drop_empty_orders():
    assert corpus_bleu([[4, 5]], [[4, 5]]) == 1.0
    assert corpus_bleu([[4]], [[4, 5]]) == pytest.approx(np.exp(1 - 2), abs=1e-12)


def test_bleu_rejects_bad_input():
    with pytest.raises(ValueError):
        corpus_bleu([[4]], [[]])
    with pytest.raises(ValueError):
        corpus_bleu([[4]], [[4], [5]])
    with pytest.raises(ValueError):
        corpus_bleu([[4]], [[4]], smoothing="plus-two")
    assert corpus_bleu([[]], [[4]]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=6))
def test_bleu_matches_oracle(corpus):
    cands = [c for c, _ in corpus]
    refs = [r for _, r in corpus]
    score = oracles.hand_bleu(cands, refs)[0]
    got = corpus_bleu(cands, refs)
    assert got == pytest.approx(score, abs=1e-9)
    assert 0.0 <= got <= 1.0 + 1e-12
    if got == pytest.approx(1.0, abs=1e-12):
        assert cands == refs


@settings(max_examples=50, deadline=None)
@given(sentences, st.integers(0, 9))
def test_truncation_never_raises_score_above_one(ref, cut):
    cand = ref[:max(cut, 1)]
    assert corpus_bleu([cand], [ref]) <= 1.0
    assert corpus_bleu([cand], [ref]) <= corpus_bleu([ref], [ref])


def test_token_accuracy_examples():
    assert token_accuracy([[4, 5, EOS]], [[4, 5, EOS]]) == 1.0
    assert token_accuracy([[4, 4]], [[5, 5]]) == 0.0
    assert token_accuracy([[4, 5, EOS]], [[4, 6, EOS]]) == pytest.approx(2 / 3)


def test_trace_rrww():
    V = 5
    ro = Rollout.assemble(np.array([2]), np.array([[4, EOS]]),
                          np.array([[READ], [READ], [WRITE], [WRITE]]), np.ones((4, 1), bool),
                          constant_outputs([np.zeros((1, V + 2))] * 4), V, 3.0)
    rows = trace_actions(ro)
    assert [(r.t, r.reads, r.writes, r.active) for r in rows] == \
        [(0, 1, 0, 1), (1, 1, 0, 1), (2, 0, 1, 1), (3, 0, 1, 1)]


def test_trace_conservation(rng):
    net = small_net(seed=2)
    xs = [list(rng.integers(4, 9, int(rng.integers(0, 7)))) + [EOS] for _ in range(30)]
    ro = infer_batch(net, xs, max_out=10)
    rows = trace_actions(ro)
    assert all(r.reads + r.writes == r.active for r in rows)
    assert sum(r.writes for r in rows) == sum(len(z) for z in ro.tokens) - \
        int(sum(len(z) > 10 for z in ro.tokens))
    assert sum(r.reads for r in rows) == int((ro.action == READ).sum())


def test_trace_empty_selection_warns(caplog):
    ro = infer_batch(small_net(), [[4, EOS]])
    assert trace_actions(ro, rows=[]) == []
    assert "no rollouts" in caplog.text


def test_zero_network_read_lead_matches_trace_oracle():
    # |x| = |y| = 5: a zero net reads to the end of x, then the read mask
    # forces writes of token 0 (argmax of zero logits) until the cap
    net = zero_net()
    x = [4, 5, 6, 7, EOS]
    pairs = [(x, [4, 5, 6, 7, EOS])]
    rep = evaluate(net, pairs, max_out=5)
    actions = [READ] * 5 + [WRITE] * 5
    i = j = 0
    leads = []
    for a in actions:
        leads.append(i - j)
        i, j = (i + 1, j) if a == READ else (i, j + 1)
    assert rep.mean_read_lead == pytest.approx(np.mean(leads), abs=1e-12)
    assert rep.mean_first_write == 5 and rep.mean_first_write_frac == 1.0


def test_evaluate_deterministic(rng):
    net = small_net()
    pairs = [(list(rng.integers(4, 9, 3)) + [EOS], list(rng.integers(4, 9, 2)) + [EOS])
             for _ in range(20)]
    assert evaluate(net, pairs) == evaluate(net, pairs)
