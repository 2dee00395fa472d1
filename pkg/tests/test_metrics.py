import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbmtl.metrics import (MetricError, MetricsReport, exact_match_accuracy, intent_accuracy, perplexity,
                           residual_curve, setting_steps, slot_f1, spans)

TYPES = ["a", "b", "c"]


def random_tags(rng, n):
    pool = ["O"] + [f"{p}-{t}" for t in TYPES for p in "BI"]
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def oracle_spans(tags):
    """Index-walking enumeration: every maximal run that starts at a B-x, or at an I-x
    that does not continue a run of the same type."""
    found = []
    for i, tag in enumerate(tags):
        if tag == "O":
            continue
        kind = tag[2:]
        starts = tag[0] == "B" or i == 0 or tags[i - 1] == "O" or tags[i - 1][2:] != kind
        if not starts:
            continue
        j = i + 1
        while j < len(tags) and tags[j] == "I-" + kind:
            j += 1
        found.append((kind, i, j))
    return found


def oracle_f1(pred, gold):
    tp = npred = ngold = 0
    for p, g in zip(pred, gold):
        ps, gs = oracle_spans(p), oracle_spans(g)
        npred += len(ps)
        ngold += len(gs)
        tp += sum(1 for s in ps if s in gs)
    prec = tp / npred if npred else 0.0
    rec = tp / ngold if ngold else 0.0
    return prec, rec, (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


def test_intent_accuracy():
    assert intent_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert intent_accuracy([1, 0, 3, 0], [1, 2, 3, 4]) == 0.5
    with pytest.raises(MetricError):
        intent_accuracy([1], [1, 2])
    with pytest.raises(MetricError):
        intent_accuracy([], [])


def test_f1_identical():
    g = [["B-a", "I-a", "O", "B-b"]]
    assert slot_f1(g, g) == (1.0, 1.0, 1.0)


def test_f1_boundary_error():
    assert slot_f1([["B-a", "O"]], [["B-a", "I-a"]]) == (0.0, 0.0, 0.0)


def test_f1_spurious_span():
    p, r, f = slot_f1([["B-a", "O", "B-b"]], [["B-a", "O", "O"]])
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3, abs=1e-15)


def test_f1_empty_is_zero():
    assert slot_f1([["O", "O"]], [["O", "O"]]) == (0.0, 0.0, 0.0)


def test_f1_length_mismatch():
    with pytest.raises(MetricError):
        slot_f1([["O"]], [["O", "O"]])


def test_dangling_inside_opens_span():
    assert spans(["O", "I-a", "I-a", "I-b"]) == {("a", 1, 3), ("b", 3, 4)}


def test_f1_matches_bruteforce_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 12))
        pred, gold = [random_tags(rng, n)], [random_tags(rng, n)]
        assert sorted(spans(pred[0])) == sorted(oracle_spans(pred[0]))
        assert slot_f1(pred, gold) == oracle_f1(pred, gold)


def test_corpus_f1_is_micro_averaged():
    rng = np.random.default_rng(1)
    pred, gold = [], []
    for _ in range(50):
        n = int(rng.integers(1, 10))
        pred.append(random_tags(rng, n))
        gold.append(random_tags(rng, n))
    assert slot_f1(pred, gold) == oracle_f1(pred, gold)


def test_exact_match():
    assert exact_match_accuracy([1, 2], [["O"], ["B-a"]], [1, 2], [["O"], ["B-a"]]) == 1.0
    assert exact_match_accuracy([1, 2], [["O"], ["O"]], [1, 2], [["O"], ["B-a"]]) == 0.5
    with pytest.raises(MetricError):
        exact_match_accuracy([1], [["O"]], [1, 2], [["O"], ["O"]])


def test_exact_match_bounded_by_components():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        ig, ip = rng.integers(0, 3, size=n), rng.integers(0, 3, size=n)
        sg = [random_tags(rng, 2) for _ in range(n)]
        sp = [g if rng.random() < 0.5 else random_tags(rng, 2) for g in sg]
        ema = exact_match_accuracy(ip.tolist(), sp, ig.tolist(), sg)
        sent_acc = np.mean([p == g for p, g in zip(sp, sg)])
        assert ema <= min(intent_accuracy(ip.tolist(), ig.tolist()), sent_acc) + 1e-15


def test_perplexity_uniform():
    logp = np.full((4, 7, 10), -math.log(10))
    tgt = np.random.default_rng(3).integers(0, 10, size=(4, 7))
    assert abs(perplexity(logp, tgt) - 10.0) < 1e-9


def test_perplexity_perfect():
    tgt = np.array([[1, 2, 0]])
    logp = np.full((1, 3, 3), -np.inf)
    logp[0, np.arange(3), tgt[0]] = 0.0
    assert perplexity(logp, tgt) == 1.0


def test_perplexity_vs_cross_entropy():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5, 6))
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    tgt = rng.integers(0, 6, size=(3, 5))
    mask = (rng.random((3, 5)) < 0.7).astype(float)
    mask[0, 0] = 1
    nll = [-logp[i, j, tgt[i, j]] for i in range(3) for j in range(5) if mask[i, j]]
    assert perplexity(logp, tgt, mask) == pytest.approx(math.exp(np.mean(nll)), rel=1e-9)


def test_perplexity_needs_positions():
    with pytest.raises(MetricError):
        perplexity(np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


# -- setting steps --------------------------------------------------------------

def suffix_oracle(curve, pct):
    final = curve[-1][1]
    for i, (s, _) in enumerate(curve):
        if all(abs(v - final) <= abs(final) * pct / 100 for _, v in curve[i:]):
            return s
    raise AssertionError("the final point always qualifies")


def test_setting_steps_constant():
    assert setting_steps([(10, 3.0), (20, 3.0), (30, 3.0)]) == 10


def test_setting_steps_worked_example():
    curve = list(zip(range(0, 600, 100), [0, 50, 90, 98, 99, 100]))
    assert setting_steps(curve, 2.0) == 300


def test_setting_steps_random_vs_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        vals = 1 - np.exp(-np.arange(n) / rng.uniform(1, 10)) + rng.normal(0, 0.02, size=n)
        curve = list(zip(np.cumsum(rng.integers(1, 50, size=n)).tolist(), vals.tolist()))
        assert setting_steps(curve, 2.0) == suffix_oracle(curve, 2.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.5, 1.5), min_size=1, max_size=15), st.lists(st.floats(3.0, 10.0), max_size=5))
def test_setting_steps_prefix_invariance(vals, prefix):
    curve = [(100 + i, v) for i, v in enumerate(vals)]
    padded = [(i, v) for i, v in enumerate(prefix)] + curve
    # prefix values are at least twice the final value, far outside a 2% band
    assert setting_steps(padded) == setting_steps(curve)


def test_setting_steps_errors():
    with pytest.raises(MetricError):
        setting_steps([])
    with pytest.raises(MetricError):
        setting_steps([(1, 1.0)], 0.0)


# -- residual curve ------------------------------------------------------------------

def test_residual_curve_constant_and_length():
    y = np.ones((2, 3))
    for K in (1, 3, 6):
        r = residual_curve([y] * (K + 1))
        assert len(r) == K and r == [0.0] * K


def test_residual_curve_values():
    assert residual_curve([np.zeros(2), np.array([3.0, 4.0]), np.array([3.0, 5.0])]) == [5.0, 1.0]


# -- report ------------------------------------------------------------------------

def test_report_roundtrip_reference_values():
    rep = MetricsReport(intent_acc=94.5, slot_f1=0.9, ppl=11.33,
                        setting_steps={"intent_acc": 828, "slot_f1": 1995})
    back = MetricsReport.from_json(rep.to_json())
    assert back == rep and back.intent_acc == 94.5 and back.ppl == 11.33
    other = MetricsReport.from_dict({"setting_steps.intent_acc": 1732, "setting_steps.slot_f1": 3311})
    assert other.setting_steps == {"intent_acc": 1732, "slot_f1": 3311}


def test_report_keys():
    d = MetricsReport(intent_acc=0.5, slot_p=0.1, slot_r=0.2, slot_f1=0.3, ema=0.1, ppl=2.0,
                      setting_steps={"ema": 50}).to_dict()
    for key in ("intent_acc", "slot_p", "slot_r", "slot_f1", "ema", "ppl", "setting_steps.ema"):
        assert key in d


def test_final_residual_mean_over_tasks():
    rep = MetricsReport(residuals={"a": [1.0, 0.2], "b": [3.0, 0.4]})
    assert rep.final_residual() == pytest.approx(0.3)
    assert math.isnan(MetricsReport().final_residual())
