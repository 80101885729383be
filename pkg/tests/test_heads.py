import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cognilab.autograd import Tape
from cognilab.heads import (AnalysisError, HeadId, SaliencyMap, check_induction_probe, cumulative_distinct,
                            detect, emergence_auc, format_ratio, head_saliency, induction_score,
                            layer_distribution, null_threshold, percentile, per_item_gate_grads,
                            shuffle_answers, speedup_pct, StageCounts, stage_counts, stage_retention, SpecializationRecord)
from cognilab.model import GATES, forward_on_tape, wrap_params
from cognilab.trainer import Example, make_batch


def probe_examples(k=3, seed=0, vocab=40):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        n = int(rng.integers(5, 10))
        seq = [int(x) for x in rng.integers(3, vocab, size=n + 1)]
        out.append(Example(seq[:-1], seq[1:], [i >= 2 for i in range(n)]))
    return out


def item_loss(params, cfg, ex):
    tape = Tape()
    b = make_batch([ex], 1)
    logits, _ = forward_on_tape(tape, cfg, wrap_params(params), b.tokens)
    return tape.weighted_nll(logits, b.targets, b.weights).item()


def gate_fd(params, cfg, probe, h=1e-6):
    L, H = params[GATES].shape
    out = np.zeros((len(probe), L, H))
    for l in range(L):
        for j in range(H):
            for i, ex in enumerate(probe):
                p = {k: v.copy() for k, v in params.items()}
                p[GATES][l, j] = 1 + h
                up = item_loss(p, cfg, ex)
                p[GATES][l, j] = 1 - h
                down = item_loss(p, cfg, ex)
                out[i, l, j] = (up - down) / (2 * h)
    return out


def test_per_item_gate_grads_match_fd(tiny_cfg, tiny_params):
    probe = probe_examples()
    g = per_item_gate_grads(tiny_params, tiny_cfg, probe)
    fd = gate_fd(tiny_params, tiny_cfg, probe)
    assert np.max(np.abs(g - fd) / np.maximum(1e-3, np.abs(fd))) < 1e-4
    sal = head_saliency(tiny_params, tiny_cfg, probe).values
    np.testing.assert_allclose(sal, np.abs(fd).mean(axis=0), rtol=1e-4)


def test_dead_path_saliency_is_exactly_zero(tiny_cfg, tiny_params):
    p = {k: v.copy() for k, v in tiny_params.items()}
    dh = tiny_cfg.d_head
    p["h1.attn.wo"][dh:2 * dh, :] = 0.0
    sal = head_saliency(p, tiny_cfg, probe_examples()).values
    assert sal[1, 1] == 0.0
    assert np.all(sal[0] > 0)


def test_duplicated_probe_same_saliency(tiny_cfg, tiny_params):
    probe = probe_examples()
    a = head_saliency(tiny_params, tiny_cfg, probe).values
    b = head_saliency(tiny_params, tiny_cfg, probe + probe).values
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_saliency_errors(tiny_cfg, tiny_params):
    with pytest.raises(AnalysisError):
        head_saliency(tiny_params, tiny_cfg, [])
    p = dict(tiny_params)
    p[GATES] = tiny_params[GATES] * 0.5
    with pytest.raises(AnalysisError):
        head_saliency(p, tiny_cfg, probe_examples())


def test_shuffle_answers_keeps_inputs_and_multiset():
    probe = probe_examples(4)
    shuf = shuffle_answers(probe, np.random.default_rng(0))
    assert [e.inputs for e in shuf] == [e.inputs for e in probe]
    before = sorted(t for e in probe for t, m in zip(e.targets, e.mask) if m)
    after = sorted(t for e in shuf for t, m in zip(e.targets, e.mask) if m)
    assert before == after


def test_null_threshold_deterministic(tiny_cfg, tiny_params):
    probe = probe_examples()
    a = null_threshold(tiny_params, tiny_cfg, probe, seed=4)
    assert a == null_threshold(tiny_params, tiny_cfg, probe, seed=4)
    assert a > 0
    with pytest.raises(AnalysisError):
        null_threshold(tiny_params, tiny_cfg, probe, n_null=5)


def test_percentile_examples():
    assert percentile(range(1, 101), 95) == pytest.approx(95.05)
    assert percentile([0.0] * 40, 95) == 0.0
    with pytest.raises(AnalysisError):
        percentile([], 50)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50))
def test_percentile_matches_numpy_linear(values):
    assert percentile(values, 95) == pytest.approx(float(np.percentile(values, 95)), rel=1e-12, abs=1e-9)


def test_zero_threshold_marks_every_nonzero_head():
    sal = SaliencyMap(np.array([[0.0, 0.1], [2.0, 0.0]]))
    rec = detect(sal, 0.0)
    assert rec.live == {HeadId(0, 1), HeadId(1, 0)}


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 10))
def test_detect_is_strict_exceedance(vals, tau):
    rec = detect(SaliencyMap(np.array(vals).reshape(2, 2)), tau)
    assert rec.live == {HeadId(l, h) for l in range(2) for h in range(2) if vals[2 * l + h] > tau}


def test_ratio_formatting():
    assert format_ratio(439, 0) == "439:0"
    assert format_ratio(5, 5) == "1:1"
    assert format_ratio(4, 10) == "1:2.5"
    dist = layer_distribution([HeadId(0, 0), HeadId(0, 1), HeadId(3, 0)], 4, (0, 1), (2, 3))
    assert dist.per_layer == [2, 0, 0, 1] and dist.ratio == "1:0.5" and dist.max_per_layer == 2
    uniform = layer_distribution([HeadId(l, 0) for l in range(4)], 4, (0, 1), (2, 3))
    assert uniform.ratio == "1:1"


def test_retention_examples():
    r = stage_retention({"A", "B", "C"}, {"A", "B", "D"})
    assert round(r.pct, 1) == 66.7
    assert stage_retention(range(378), range(4, 400)).label() == "374 / 378 (98.9%)"
    assert stage_retention({"A"}, {"A"}).pct == 100.0
    assert stage_retention(set(), {"A"}).label() == "0 / 0 (n/a)"


def test_stage_count_examples():
    five = frozenset(range(5))
    assert stage_counts([SpecializationRecord(0, five, 0)]) == StageCounts(5, 5, 5)
    assert stage_counts([SpecializationRecord(i, five, 0) for i in range(3)]) == StageCounts(5, 5, 15)
    c = stage_counts([SpecializationRecord(0, frozenset("A"), 0), SpecializationRecord(1, frozenset("B"), 0)])
    assert c.unique_union == 2
    with pytest.raises(AnalysisError):
        stage_counts([])


def _induction_tokens(k=5):
    xs = list(range(10, 10 + k))
    return [256] + xs + xs


def test_induction_hand_built_is_one():
    tokens = _induction_tokens()
    T, k = len(tokens), 5
    att = np.zeros((1, 2, T, T))
    att[..., np.arange(T), np.arange(T)] = 1.0  # head 1 stays on the diagonal
    for j in range(1, k + 1):
        att[0, 0, k + j] = 0.0
        att[0, 0, k + j, j + 1] = 1.0
    s = induction_score(att, tokens)
    assert s[0, 0] == 1.0 and s[0, 1] == 0.0


def test_induction_uniform_is_about_one_over_t():
    tokens = _induction_tokens(8)
    T = len(tokens)
    att = np.tril(np.ones((T, T)))
    att /= att.sum(-1, keepdims=True)
    s = induction_score(att[None, None], tokens)[0, 0]
    expected = np.mean([1.0 / (q + 1) for q in range(9, 17)])
    assert s == pytest.approx(expected)
    assert abs(s - 1.0 / T) < 0.05


def test_induction_probe_validation():
    assert check_induction_probe(_induction_tokens(3)) == 3
    with pytest.raises(AnalysisError):
        check_induction_probe([256, 1, 2, 1, 3])
    with pytest.raises(AnalysisError):
        check_induction_probe([256, 1, 1, 1, 1])


def test_emergence_examples():
    assert emergence_auc([0, 1, 2]) == 3
    assert cumulative_distinct([{1}, {2}, {1}]) == [1, 2, 2]
    assert round(speedup_pct(37870, 37562), 1) == 0.8
    assert speedup_pct(0, 5) is None
    with pytest.raises(AnalysisError):
        emergence_auc([2, 1])


@given(st.lists(st.sets(st.integers(0, 10), max_size=4), max_size=10))
def test_cumulative_counts_nondecreasing(sets):
    c = cumulative_distinct(sets)
    assert all(a <= b for a, b in zip(c, c[1:]))
