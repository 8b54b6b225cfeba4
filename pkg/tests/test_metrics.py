import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erlab.metrics import (MASK_ID, average_precision, auc_plausibility, correlate_across_approaches, f1_macro,
                           faithfulness, faithfulness_batch, kendall_tau_b, mean_std, normalised_scores,
                           plausibility, recall_at_k, top_k_count)
from erlab.model import CLS_ID, PAD_ID, ModelConfig, init_model, softmax_np

from oracles import (ap_bruteforce, auc_bruteforce, f1_macro_bruteforce, kendall_bruteforce,
                     recall_at_k_bruteforce)


def same(a, b, tol=1e-9):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


# -- worked examples --------------------------------------------------------------------

def test_auc_examples():
    assert auc_plausibility([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 100.0
    assert auc_plausibility([0.9, 0.8, 0.1], [1, 0, 1]) == 50.0
    assert auc_plausibility([0.3] * 4, [1, 0, 0, 1]) == 50.0
    assert math.isnan(auc_plausibility([0.1, 0.2], [1, 1]))


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(250 / 3)
    assert average_precision([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(100.0)
    assert average_precision([0.2, 0.5, 0.1], [1, 1, 1]) == pytest.approx(100.0)
    assert math.isnan(average_precision([0.2, 0.5], [0, 0]))


def test_recall_examples():
    assert recall_at_k([0.9, 0.8, 0.1], [1, 0, 1], k=2) == (50.0, 2)
    assert recall_at_k([0.9, 0.7, 0.2], [1, 1, 0]) == (100.0, 2)
    assert recall_at_k([0.1, 0.7, 0.2], [1, 0, 0], k=10)[0] == 100.0
    assert math.isnan(recall_at_k([0.1], [0])[0])
    with pytest.raises(ValueError):
        recall_at_k([0.1, 0.2], [1, 0], k=0)


def test_plausibility_bundle():
    p = plausibility([0.9, 0.8, 0.1], [1, 0, 1])
    assert (p.auc, p.k_used) == (50.0, 2)
    assert 0 <= p.average_precision <= 100 and 0 <= p.recall_at_k <= 100


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        auc_plausibility([0.1, 0.2], [1, 0, 1])


def test_f1_examples():
    assert f1_macro([0, 1, 1], [0, 1, 1]) == 100.0
    assert f1_macro([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(50.0)
    assert f1_macro([1, 1], [0, 1]) == pytest.approx(100 / 3)
    with pytest.raises(ValueError):
        f1_macro([], [])


def test_kendall_examples():
    assert kendall_tau_b([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(kendall_tau_b([1, 1, 1], [1, 2, 3]))


# -- oracle suite -----------------------------------------------------------------------

def test_metrics_agree_with_bruteforce_oracles():
    rng = np.random.default_rng(2024)
    cases = 0
    for _ in range(1500):
        n = int(rng.integers(1, 7))
        # few distinct values so ties are common
        s = list(rng.integers(0, 4, size=n) / 4.0) if rng.random() < 0.5 else list(rng.normal(size=n))
        m = list(rng.integers(0, 2, size=n))
        y = list(rng.integers(0, 3, size=n).astype(float))
        k = int(rng.integers(1, 8))
        assert same(auc_plausibility(s, m), auc_bruteforce(s, m))
        assert same(average_precision(s, m), ap_bruteforce(s, m))
        assert same(recall_at_k(s, m)[0], recall_at_k_bruteforce(s, m))
        assert same(recall_at_k(s, m, k)[0], recall_at_k_bruteforce(s, m, k))
        if n >= 2:
            assert same(kendall_tau_b(s, y), kendall_bruteforce(s, y))
        gold = list(rng.integers(0, 2, size=n))
        pred = list(rng.integers(0, 2, size=n))
        assert same(f1_macro(pred, gold), f1_macro_bruteforce(pred, gold))
        cases += 1
    assert cases >= 1000


# -- properties -------------------------------------------------------------------------

# integer-valued scores keep the exp-based map strictly increasing in floating point
score_lists = st.lists(st.integers(-20, 20), min_size=2, max_size=10)


@settings(max_examples=200, deadline=None)
@given(score_lists, st.data())
def test_ranking_metrics_invariant_under_monotone_maps(scores, data):
    mask = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    s = np.array(scores, dtype=float)
    t = np.exp(s / 2.0) * 3.0 + 1.0
    assert same(auc_plausibility(s, mask), auc_plausibility(t, mask))
    assert same(average_precision(s, mask), average_precision(t, mask))
    assert same(recall_at_k(s, mask)[0], recall_at_k(t, mask)[0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=2, max_size=10, unique=True), st.data())
def test_auc_of_negated_scores_is_complement(scores, data):
    mask = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if 0 < sum(mask) < len(mask):
        s = np.array(scores, dtype=float)
        assert auc_plausibility(s, mask) + auc_plausibility(-s, mask) == pytest.approx(100.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=8), st.data())
def test_kendall_in_range(x, data):
    y = data.draw(st.lists(st.floats(-3, 3, allow_nan=False), min_size=len(x), max_size=len(x)))
    tau = kendall_tau_b(x, y)
    assert math.isnan(tau) or -1.0 - 1e-12 <= tau <= 1.0 + 1e-12


# -- faithfulness -----------------------------------------------------------------------

class LookupModel:
    """Class-1 probability is a logistic function of per-token weights of unmasked tokens."""

    def __init__(self, weights, bias=0.0):
        self.w = dict(weights)
        self.bias = bias

    def predict_proba(self, ids):
        z = np.array([self.bias + sum(self.w.get(int(t), 0.0) for t in row if t not in (PAD_ID, CLS_ID, MASK_ID))
                      for row in np.atleast_2d(ids)])
        return softmax_np(np.stack([np.zeros_like(z), z], -1))


def test_null_diff_example():
    # bias log(1.5) gives p(1 | empty) = 0.6; token weight lifts p(1 | x) to 0.9
    m = LookupModel({5: math.log(9.0) - math.log(1.5)}, bias=math.log(1.5))
    out = faithfulness(m, [CLS_ID, 5], [1.0], alpha_grid=(1.0,))
    assert out.null_diff == pytest.approx(0.3)
    assert out.norm_suff[0] == pytest.approx(1.0)
    assert out.norm_comp[0] == pytest.approx(1.0)


def test_norm_comp_example():
    _, nc = normalised_scores([0.9], [0.2], suff0=0.5, comp1=0.4)
    assert nc[0] == pytest.approx(0.5)


def test_norm_suff_literal_variant_differs():
    ns, _ = normalised_scores([0.8, 1.0], [0.1, 0.2], suff0=0.6, comp1=0.4)
    np.testing.assert_allclose(ns, [0.5, 1.0])
    lit, _ = normalised_scores([0.8, 1.0], [0.1, 0.2], suff0=0.6, comp1=0.4, literal_suff=True)
    assert lit[0] == pytest.approx(1.0) and math.isnan(lit[1])


def test_zero_comp_reports_missing():
    m = LookupModel({}, bias=0.4)  # prediction ignores every token
    out = faithfulness(m, [CLS_ID, 4, 5, 6], [0.2, 0.5, 0.3])
    assert out.null_diff == 0.0
    assert np.all(np.isnan(out.norm_comp)) and np.all(np.isnan(out.norm_suff))


def test_faithfulness_matches_manual_masking():
    w = {4: 2.0, 5: -0.5, 6: 0.3, 7: 1.0}
    m = LookupModel(w, bias=-0.2)
    ids = [CLS_ID, 4, 5, 6, 7]
    scores = [0.9, 0.1, 0.2, 0.6]
    out = faithfulness(m, ids, scores, alpha_grid=(0.5,))
    p = lambda toks: m.predict_proba([CLS_ID] + toks)[0]
    y = int(np.argmax(p([4, 5, 6, 7])))
    full, empty = p([4, 5, 6, 7])[y], p([])[y]
    keep, drop = p([4, MASK_ID, MASK_ID, 7])[y], p([MASK_ID, 5, 6, MASK_ID])[y]
    nd = max(0.0, full - empty)
    assert out.null_diff == pytest.approx(nd)
    suff = 1 - max(0.0, full - keep)
    assert out.norm_suff[0] == pytest.approx(np.clip((suff - (1 - nd)) / nd, 0, 1))
    assert out.norm_comp[0] == pytest.approx(np.clip(max(0.0, full - drop) / nd, 0, 1))


def test_top_k_count():
    assert [top_k_count(a, 10) for a in (0.01, 0.2, 0.4, 1.0)] == [1, 2, 4, 10]
    assert top_k_count(0.6, 5) == 3


def test_faithfulness_length_mismatch():
    with pytest.raises(ValueError):
        faithfulness(LookupModel({}), [CLS_ID, 4, 5], [0.1])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_faithfulness_scores_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    model = init_model(ModelConfig(vocab_size=16, max_seq_len=10, d_model=8, d_ff=16, seed=seed % 7))
    lengths = rng.integers(1, 9, size=4)
    ids = np.full((4, 9), PAD_ID)
    ids[:, 0] = CLS_ID
    for i, n in enumerate(lengths):
        ids[i, 1: n + 1] = rng.integers(4, 16, size=n)
    scores = rng.random((4, 8))
    out = faithfulness_batch(model, ids, lengths, scores)
    assert np.all((out["null_diff"] >= 0) & (out["null_diff"] <= 1))
    for key in ("norm_suff", "norm_comp"):
        v = out[key][np.isfinite(out[key])]
        assert np.all((v >= 0) & (v <= 1))
        assert out[key].shape == (4, 6)


# -- correlation ----------------------------------------------------------------------------

def _records(approach, seeds, vectors):
    return [{"example": ex, "technique": "att", "layer": 1, "split": "dev", "seed": s, "approach": approach,
             "scores": list(vectors(s, ex))} for s in seeds for ex in range(30)]


def test_correlation_identical_and_reversed():
    base = lambda s, ex: np.arange(6.0) + ex
    recs = _records("a", [0, 1], base) + _records("b", [0, 1], lambda s, ex: -base(s, ex))
    assert correlate_across_approaches(recs, "att", "a", "a").mean_tau == pytest.approx(1.0)
    assert correlate_across_approaches(recs, "att", "a", "b").mean_tau == pytest.approx(-1.0)


def test_correlation_sanity_ordering():
    rng = np.random.default_rng(0)
    shared = rng.normal(size=(30, 8))
    noise = {(s, ex): rng.normal(size=8) for s in range(40) for ex in range(30)}
    trained = lambda s, ex: shared[ex] + 0.5 * noise[(s, ex)]
    untrained = lambda s, ex: noise[(s + 20, ex)]
    recs = _records("baseline", range(5), trained) + _records("untrained", range(5), untrained)
    same_tau = correlate_across_approaches(recs, "att", "baseline", "baseline", seed=1).mean_tau
    cross_tau = correlate_across_approaches(recs, "att", "baseline", "untrained", seed=1).mean_tau
    assert same_tau > cross_tau
    rec = correlate_across_approaches(recs, "att", "baseline", "untrained", seed=1, layer=1, split="dev")
    assert np.all(np.abs(rec.taus) <= 1.0)


def test_correlation_errors():
    recs = _records("a", [0], lambda s, ex: np.arange(3.0))
    with pytest.raises(ValueError, match="technique"):
        correlate_across_approaches(recs, "ixg", "a", "a")
    with pytest.raises(ValueError, match="two seeds"):
        correlate_across_approaches(recs, "att", "a", "a")
    with pytest.raises(ValueError, match="approach"):
        correlate_across_approaches(recs, "att", "a", "zzz")


def test_mean_std_ignores_missing():
    assert mean_std([1.0, float("nan"), 3.0]) == pytest.approx((2.0, math.sqrt(2.0)))
    assert all(math.isnan(v) for v in mean_std([float("nan")]))
