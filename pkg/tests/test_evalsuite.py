import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesioncap.datamodel import ClinicalMetadata
from lesioncap.evalsuite import (BOOTSTRAP_METRICS, CONVENTIONS, MetricReport, alignment_score, bleu4,
                                 extract_keywords, heatmap_caption_alignment, keyword_table, lcs_length, mes_accuracy,
                                 mentions_lesion, paired_bootstrap, report_from_items, rouge_l, score_items,
                                 token_precision)

WORDS = list("abcdef")


# -- independent oracles ----------------------------------------------------------------------

def oracle_bleu(hyp, ref):
    """Direct n-gram counting with explicit loops."""
    logs = []
    for n in range(1, 5):
        h = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        r = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        matched = 0
        for g in set(h):
            matched += min(h.count(g), r.count(g))
        p = matched / len(h) if matched else 1 / (len(h) + 1)
        logs.append(math.log(p))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return min(1.0, bp * math.exp(sum(logs) / 4))


def oracle_lcs(a, b):
    """Longest common subsequence by trying subsequences of the shorter side, longest first."""
    short, other = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for combo in itertools.combinations(short, k):
            it = iter(other)
            if all(tok in it for tok in combo):
                return k
    return 0


def oracle_rouge(hyp, ref):
    lcs = oracle_lcs(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def test_bleu_and_rouge_match_oracles_on_1000_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        hyp = list(rng.choice(WORDS, size=rng.integers(1, 11)))
        ref = list(rng.choice(WORDS, size=rng.integers(1, 11)))
        assert bleu4(hyp, ref) == pytest.approx(oracle_bleu(hyp, ref), abs=1e-9)
        assert rouge_l(hyp, ref) == pytest.approx(oracle_rouge(hyp, ref), abs=1e-9)
        assert lcs_length(hyp, ref) == oracle_lcs(hyp, ref)


def test_bleu_random_ten_token_pairs():
    rng = np.random.default_rng(1)
    for _ in range(200):
        hyp, ref = list(rng.choice(WORDS, 10)), list(rng.choice(WORDS, 10))
        assert bleu4(hyp, ref) == pytest.approx(oracle_bleu(hyp, ref), abs=1e-9)


# -- worked examples --------------------------------------------------------------------------

def test_bleu_identical_is_one():
    assert bleu4("mild erythema with bleeding present", "mild erythema with bleeding present") == 1.0


def test_bleu_disjoint_is_small_but_positive():
    hyp = [f"h{i}" for i in range(25)]
    ref = [f"r{i}" for i in range(25)]
    expected = math.exp(sum(math.log(1 / (25 - n + 2)) for n in range(1, 5)) / 4)
    assert bleu4(hyp, ref) == pytest.approx(expected, abs=1e-12)
    assert 0 < bleu4(hyp, ref) < 0.05


def test_bleu_errors_and_empty_hypothesis():
    with pytest.raises(ValueError):
        bleu4("a b c", "")
    assert bleu4([], ["a"]) == 0.0


def test_rouge_examples():
    assert rouge_l("a c b d", "a b c d") == pytest.approx(0.75)
    assert rouge_l("a b", "a b") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    with pytest.raises(ValueError):
        rouge_l("", "a")


def test_mes_accuracy_examples():
    assert mes_accuracy([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert mes_accuracy([1, 2, 3, 0], [0, 1, 2, 3]) == 0.0
    assert mes_accuracy([0, 1, 2, 0], [0, 1, 2, 3]) == 0.75
    with pytest.raises(ValueError):
        mes_accuracy([0], [0, 1])


def test_token_precision_examples():
    assert token_precision("a b c", "a b c") == 1.0
    assert token_precision("a b", "c d") == 0.0
    assert token_precision("a b x y", "a b c d") == 0.5
    assert token_precision("a a a a", "a b") == 0.25


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=12), st.lists(st.sampled_from(WORDS), min_size=1,
                                                                            max_size=12))
def test_metrics_in_unit_interval(hyp, ref):
    for fn in (bleu4, rouge_l, token_precision):
        assert 0.0 <= fn(hyp, ref) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=4, max_size=12))
def test_self_similarity_is_one(x):
    assert bleu4(x, x) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l(x, x) == 1.0
    assert token_precision(x, x) == 1.0


# -- keywords -----------------------------------------------------------------------------------

def test_keyword_table_is_versioned_data():
    assert keyword_table()["version"] == 1


def test_keywords_for_bleeding_only():
    meta = ClinicalMetadata(0)
    assert extract_keywords(meta) == {"normal", "visible vascular pattern"}
    bleed = ClinicalMetadata(1, bleeding=True)
    kws = extract_keywords(bleed)
    assert "bleeding present" in kws
    assert alignment_score("mild inflammation with visible vascular pattern", bleed) == pytest.approx(2 / 3)


def test_alignment_half_and_zero():
    meta = ClinicalMetadata(2, "obliterated", False, "moderate", "high")
    assert len(extract_keywords(meta)) == 4
    assert alignment_score("moderate inflammation and moderate erythema", meta) == 0.5
    assert alignment_score("nothing relevant here", meta) == 0.0


def test_alignment_needs_contiguous_phrase():
    meta = ClinicalMetadata(3, "obliterated", True, "marked", "high", "deep")
    cap = "severe inflammation vascular pattern obliterated bleeding present marked erythema high friability deep ulcers"
    assert alignment_score(cap, meta) == 1.0
    assert alignment_score(cap.replace("deep ulcers", "ulcers deep"), meta) == pytest.approx(5 / 6)


def test_lesion_mentions():
    assert mentions_lesion("moderate inflammation with bleeding present")
    assert not mentions_lesion("normal mucosal surface with visible vascular pattern")


# -- heatmap / caption alignment ---------------------------------------------------------------

def test_heatmap_equal_to_mask_with_lesion_caption():
    mask = np.zeros((8, 8))
    mask[2:5, 3:6] = 1
    assert heatmap_caption_alignment(mask, mask, "deep ulcers seen") == 1.0


def test_zero_heatmap_empty_mask_normal_caption():
    z = np.zeros((8, 8))
    assert heatmap_caption_alignment(z, z, "normal mucosal surface") == 1.0
    assert heatmap_caption_alignment(z, z, "marked erythema") == 1.0


def test_heatmap_mass_rule_without_lesion_words():
    heat = np.zeros((4, 4))
    heat[0, 0], heat[3, 3] = 3.0, 1.0
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    assert heatmap_caption_alignment(heat, mask, "normal") == pytest.approx(0.25)


def test_missing_mask_is_skipped_and_counted():
    assert heatmap_caption_alignment(np.zeros((4, 4)), None, "normal") is None
    meta = [ClinicalMetadata(0)] * 2
    rows = score_items(["a", "b"], [0, 0], [0, 1], ["normal", "normal"], ["normal", "normal"], meta,
                       np.zeros((2, 4, 4)), [np.zeros((4, 4)), None])
    rep = report_from_items(rows)
    assert rep.heatmap_skipped == 1 and rep.heatmap_caption_alignment == 1.0
    assert rep.mes_accuracy == 0.5 and rep.n == 2
    assert rep.to_dict()["conventions"] == CONVENTIONS


def test_report_requires_items():
    with pytest.raises(ValueError):
        report_from_items([])
    with pytest.raises(ValueError):
        MetricReport(0, 0, 0, 0, 0, 0, n=0)


# -- bootstrap ----------------------------------------------------------------------------------

def _acc(pred, lab):
    return mes_accuracy(pred, lab)


def test_bootstrap_identical_systems():
    rng = np.random.default_rng(0)
    labels = list(rng.integers(0, 4, 50))
    a = list(rng.integers(0, 4, 50))
    res = paired_bootstrap(_acc, a, a, labels, iterations=200)
    assert res.observed_delta == 0.0 and res.p_value == 0.5


def test_bootstrap_a_always_better():
    labels = [0, 1, 2, 3] * 10
    a = labels
    b = [(x + 1) % 4 for x in labels]
    for iters in (1, 10, 500):
        assert paired_bootstrap(_acc, a, b, labels, iterations=iters).p_value == 0.0


def test_bootstrap_deterministic_and_exchangeable():
    rng = np.random.default_rng(3)
    labels = list(rng.integers(0, 4, 40))
    a = [x if rng.random() < 0.6 else 0 for x in labels]
    b = [x if rng.random() < 0.5 else 0 for x in labels]
    ab = paired_bootstrap(_acc, a, b, labels, iterations=300, seed=5)
    assert ab == paired_bootstrap(_acc, a, b, labels, iterations=300, seed=5)
    ba = paired_bootstrap(_acc, b, a, labels, iterations=300, seed=5)
    assert abs(ab.p_value - (1 - ba.p_value)) <= 1 / 300
    assert 0.0 <= ab.p_value <= 1.0


def test_bootstrap_per_item_matches_system_mean():
    rng = np.random.default_rng(4)
    refs = [" ".join(rng.choice(WORDS, 6)) for _ in range(20)]
    a = [" ".join(rng.choice(WORDS, 6)) for _ in range(20)]
    b = [" ".join(rng.choice(WORDS, 6)) for _ in range(20)]
    corpus_fn = BOOTSTRAP_METRICS["bleu4"][0]
    x = paired_bootstrap(corpus_fn, a, b, refs, iterations=100, seed=1)
    y = paired_bootstrap(bleu4, a, b, refs, iterations=100, seed=1, per_item=True, name="bleu4")
    assert x.p_value == y.p_value and x.metric == y.metric == "bleu4"
    assert x.observed_delta == pytest.approx(y.observed_delta, abs=1e-12)


def test_bootstrap_length_mismatch():
    with pytest.raises(ValueError):
        paired_bootstrap(_acc, [0, 1], [0], [0, 1])
