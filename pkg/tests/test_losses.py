import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbmtl import tensor as T
from fbmtl.losses import LossCombiner, LossConfig, LossConfigError, combined_loss, convergence_loss, task_loss
from fbmtl.tensor import Tensor


def trace_of(arrays, grad=False):
    return [Tensor(np.asarray(a, dtype=float), requires_grad=grad) for a in arrays]


def direct_sum(arrays, beta):
    """Written independently of the library: plain loops, no tensors."""
    K = len(arrays) - 1
    total = 0.0
    for k in range(1, K):
        sq = 0.0
        for u, v in zip(np.ravel(arrays[k + 1]), np.ravel(arrays[k])):
            sq += (u - v) ** 2
        total += beta ** (K - k) * math.sqrt(sq)
    return total


def test_hand_case():
    assert convergence_loss(trace_of([[7.0], [0.0], [1.0], [1.0]]), 0.5).item() == 0.25


def test_constant_trace_is_zero():
    y = np.random.default_rng(0).random((2, 3))
    assert convergence_loss(trace_of([y] * 5), 0.7).item() == 0.0


def test_k1_is_empty_sum():
    assert convergence_loss(trace_of([[1.0, 2.0], [3.0, 4.0]]), 0.3).item() == 0.0


def test_first_entry_never_enters():
    a = convergence_loss(trace_of([[0.0], [1.0], [2.0]]), 0.5).item()
    b = convergence_loss(trace_of([[100.0], [1.0], [2.0]]), 0.5).item()
    assert a == b == 0.5


@pytest.mark.parametrize("seed", range(100))
def test_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 7))
    shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
    arrays = [rng.normal(size=shape) for _ in range(K + 1)]
    beta = float(rng.uniform(0.05, 0.95))
    assert abs(convergence_loss(trace_of(arrays), beta).item() - direct_sum(arrays, beta)) < 1e-12


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5])
def test_beta_outside_open_interval(beta):
    with pytest.raises(LossConfigError):
        convergence_loss(trace_of([[0.0], [1.0]]), beta)
    with pytest.raises(LossConfigError):
        LossConfig(beta=beta)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 2.0))
def test_nonnegative_and_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=3) for _ in range(5)]
    base = convergence_loss(trace_of(arrays), 0.6).item()
    assert base >= 0
    # push the last entry further along its own difference: that norm grows, the others stay put
    d = arrays[4] - arrays[3]
    if np.linalg.norm(d) < 1e-9:
        return
    bigger = arrays[:4] + [arrays[4] + bump * d]
    assert convergence_loss(trace_of(bigger), 0.6).item() > base


def test_batched_norm_is_mean_of_per_example_norms():
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=(4, 3)) for _ in range(4)]
    got = convergence_loss(trace_of(arrays), 0.5, batch_axis=0).item()
    want = np.mean([direct_sum([a[i] for a in arrays], 0.5) for i in range(4)])
    assert abs(got - want) < 1e-12


def test_mask_ignores_padding():
    rng = np.random.default_rng(2)
    arrays = [rng.normal(size=(2, 3, 2)) for _ in range(4)]
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    noisy = [a.copy() for a in arrays]
    for a in noisy:
        a[mask == 0] = rng.normal(size=(int((mask == 0).sum()), 2))
    l1 = convergence_loss(trace_of(arrays), 0.5, mask=mask, batch_axis=0).item()
    l2 = convergence_loss(trace_of(noisy), 0.5, mask=mask, batch_axis=0).item()
    assert abs(l1 - l2) < 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    arrays = [rng.normal(size=(2, 3)) for _ in range(5)]

    for k in range(1, 5):
        def fn(x, k=k):
            tr = trace_of(arrays)
            tr[k] = x
            return convergence_loss(tr, 0.7, batch_axis=0)
        assert T.finite_diff_check(fn, arrays[k]) < 1e-5


# -- task losses ----------------------------------------------------------------

def test_confident_prediction_has_tiny_loss():
    logits = np.full((3, 4), -10.0)
    tgt = np.array([0, 2, 3])
    logits[np.arange(3), tgt] = 10.0
    assert task_loss("intent", Tensor(logits), tgt).item() < 1e-6


@pytest.mark.parametrize("kind,shape", [("intent", (5,)), ("slot", (2, 3)), ("lm", (2, 3))])
def test_uniform_prediction_is_log_v(kind, shape):
    V = 7
    tgt = np.random.default_rng(4).integers(0, V, size=shape)
    mask = None if kind == "intent" else np.ones(shape)
    assert task_loss(kind, Tensor(np.zeros(shape + (V,))), tgt, mask).item() == pytest.approx(math.log(V), abs=1e-12)


def test_slot_loss_vs_per_token_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 3, 5))
    tgt = np.array([[1, 4, 0]])
    per_token = [-(logits[0, t, tgt[0, t]] - np.log(np.exp(logits[0, t]).sum())) for t in range(3)]
    got = task_loss("slot", Tensor(logits), tgt, np.ones((1, 3))).item()
    assert abs(got - np.mean(per_token)) < 1e-12


def test_unknown_labels_are_skipped():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(1, 3, 5))
    a = task_loss("slot", Tensor(logits), np.array([[1, -1, 0]]), np.ones((1, 3))).item()
    b = task_loss("slot", Tensor(logits), np.array([[1, 0, 0]]), np.array([[1, 0, 1]])).item()
    assert a == b


def test_length_mismatch():
    with pytest.raises(ValueError):
        task_loss("slot", Tensor(np.zeros((1, 3, 4))), np.zeros((1, 2), dtype=int))


# -- combination -------------------------------------------------------------------

def test_fixed_weights_plain_sum():
    losses = {"a": Tensor(1.5), "b": Tensor(2.25)}
    cfg = LossConfig(conv_weight=0.0)
    assert combined_loss(losses, {"a": Tensor(9.0)}, cfg).item() == 3.75


def test_inverse_magnitude_hand_case():
    cfg = LossConfig(weighting="inverse", eps=0.0)
    comb = LossCombiner(cfg)
    total = combined_loss({"a": Tensor(2.0), "b": Tensor(4.0)}, {}, cfg, comb)
    assert comb.last_weights["a"] == pytest.approx(4 / 3, abs=1e-15)
    assert comb.last_weights["b"] == pytest.approx(2 / 3, abs=1e-15)
    assert total.item() == pytest.approx(16 / 3, abs=1e-14)


def test_inverse_weights_are_constants():
    cfg = LossConfig(weighting="inverse", conv_weight=0.0)
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(4.0), requires_grad=True)
    total = combined_loss({"a": x, "b": y}, {}, cfg)
    T.backward(total)
    assert x.grad == pytest.approx(4 / 3) and y.grad == pytest.approx(2 / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=5))
def test_inverse_weights_positive_and_sum_to_task_count(vals):
    comb = LossCombiner(LossConfig(weighting="inverse"))
    w = comb.weights({str(i): Tensor(v) for i, v in enumerate(vals)})
    arr = np.array(list(w.values()))
    assert np.all(np.isfinite(arr)) and np.all(arr > 0)
    assert arr.sum() == pytest.approx(len(vals))


def test_constant_trace_adds_nothing():
    y = np.ones((2, 3))
    conv = {"a": convergence_loss(trace_of([y] * 4), 0.5)}
    cfg = LossConfig(conv_weight=1.0)
    assert combined_loss({"a": Tensor(0.75)}, conv, cfg).item() == 0.75


def test_empty_loss_set():
    with pytest.raises(ValueError):
        combined_loss({}, {}, LossConfig())
