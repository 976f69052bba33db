import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnlab.attention import (
    HeadWeights,
    Kernel,
    MaskPolicy,
    attend,
    attend_projected,
    attention_scores,
    combine,
    kernel_eval,
    normalizer,
    register_kernel,
    softmax_attend,
    softmax_weights,
)
from attnlab.errors import DegenerateRowError, MaskAlignmentError, NonFiniteError, ShapeError, SpecError
from oracles import attention_loops, scaled_exp


def _head(rng, d_in, d_qk, d_v):
    return HeadWeights(rng.standard_normal((d_in, d_qk)), rng.standard_normal((d_in, d_qk)), rng.standard_normal((d_in, d_v)))


def test_kernel_values():
    assert kernel_eval(Kernel.scaled_exp(4), [0, 0, 0, 0], [0, 0, 0, 0]) == 1.0
    assert abs(kernel_eval(Kernel.scaled_exp(4), [1, 1, 0, 0], [1, 1, 0, 0]) - math.e) < 1e-15
    assert kernel_eval(Kernel.linear(), [1, 2], [3, 4]) == 11.0


def test_kernel_validation():
    with pytest.raises(SpecError):
        Kernel.scaled_exp(0)
    with pytest.raises(SpecError):
        Kernel.custom("never-registered")
    with pytest.raises(ShapeError):
        kernel_eval(Kernel.scaled_exp(3), [1, 2], [3, 4])


def test_custom_kernel():
    register_kernel("square", lambda x: x * x, positive=False)
    k = Kernel.custom("square")
    assert kernel_eval(k, [1, 2], [1, 1]) == 9.0
    assert not k.positive and Kernel.scaled_exp(2).positive


def test_scores_single_pair():
    q, k = np.array([[0.5, -1.0]]), np.array([[2.0, 0.25]])
    a = attention_scores(q, k, Kernel.scaled_exp(2))
    assert a.shape == (1, 1)
    assert abs(a[0, 0] - math.exp(0.75 / math.sqrt(2))) < 1e-15


def test_causal_pattern():
    a = attention_scores(np.ones((3, 2)), np.ones((3, 2)), Kernel.scaled_exp(2), MaskPolicy.causal())
    assert np.array_equal(a > 0, np.tril(np.ones((3, 3), dtype=bool)))


def test_causal_offset_alignment():
    keep = MaskPolicy.causal().keep(2, 5)
    np.testing.assert_array_equal(keep, [[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]])
    np.testing.assert_array_equal(MaskPolicy.causal(0).keep(2, 5), [[1, 0, 0, 0, 0], [1, 1, 0, 0, 0]])
    with pytest.raises(MaskAlignmentError):
        MaskPolicy.causal().keep(3, 2)
    with pytest.raises(MaskAlignmentError):
        MaskPolicy.explicit([{0}]).keep(2, 2)
    with pytest.raises(MaskAlignmentError):
        MaskPolicy.explicit([{3}]).keep(1, 2)


def test_mask_formulations_agree_on_random_case():
    rng = np.random.default_rng(0)
    q, k = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    kern = Kernel.scaled_exp(4)
    for mask in (MaskPolicy.causal(), MaskPolicy.explicit([{0, 2}, {1}, {0, 1, 2}])):
        add = attention_scores(q, k, kern, mask, "additive")
        mul = attention_scores(q, k, kern, mask, "multiplicative")
        assert np.max(np.abs(add - mul)) < 1e-12
    with pytest.raises(SpecError):
        attention_scores(q, k, Kernel.linear(), MaskPolicy.causal(), "additive")


def test_normalizer():
    np.testing.assert_array_equal(normalizer([[1.0, 1.0]]), [2.0])
    np.testing.assert_array_equal(normalizer(np.eye(3)), [1.0, 1.0, 1.0])
    a = np.random.default_rng(1).uniform(0.1, 2.0, (4, 5))
    oracle = [sum(row) for row in a.tolist()]
    assert np.max(np.abs(normalizer(a) - oracle)) < 1e-12
    with pytest.raises(DegenerateRowError):
        normalizer([[1.0, -1.0]])


def test_single_key_output_is_its_value():
    rng = np.random.default_rng(2)
    w = HeadWeights(*(rng.uniform(0, 1, (3, d)) for d in (2, 2, 4)))
    xq, xkv = rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (1, 3))
    for kern in (Kernel.scaled_exp(2), Kernel.linear()):
        y = attend(xq, xkv, xkv, w, kern)
        np.testing.assert_allclose(y, np.repeat(xkv @ w.wv, 3, axis=0), atol=1e-14)


def test_identical_keys_give_value_mean():
    rng = np.random.default_rng(3)
    q, v = rng.standard_normal((4, 3)), rng.standard_normal((5, 2))
    k = np.repeat(rng.standard_normal((1, 3)), 5, axis=0)
    y = attend_projected(q, k, v, Kernel.scaled_exp(3))
    np.testing.assert_allclose(y, np.repeat(v.mean(axis=0, keepdims=True), 4, axis=0), atol=1e-14)


def test_attend_matches_scalar_loop_oracle():
    rng = np.random.default_rng(4)
    w = _head(rng, 5, 3, 2)
    x = rng.standard_normal((4, 5))
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    want = attention_loops(q, k, v, scaled_exp(3))
    assert np.max(np.abs(attend(x, x, x, w, Kernel.scaled_exp(3)) - want)) < 1e-10
    assert np.max(np.abs(softmax_attend(x, x, x, w) - want)) < 1e-10
    assert np.max(np.abs(softmax_attend(x, x, x, w) - attend(x, x, x, w, Kernel.scaled_exp(3)))) < 1e-12
    causal = MaskPolicy.causal()
    want_c = attention_loops(q, k, v, scaled_exp(3), lambda i, j: j <= i)
    assert np.max(np.abs(attend(x, x, x, w, Kernel.scaled_exp(3), causal) - want_c)) < 1e-10


def test_linear_kernel_matches_oracle():
    rng = np.random.default_rng(5)
    q, k, v = rng.uniform(0, 1, (3, 2)), rng.uniform(0, 1, (4, 2)), rng.standard_normal((4, 3))
    want = attention_loops(q, k, v, lambda dot: dot)
    assert np.max(np.abs(attend_projected(q, k, v, Kernel.linear()) - want)) < 1e-12


def test_uniform_weights_for_equal_logits():
    q = np.eye(3)
    w = softmax_weights(q, q * 0)
    np.testing.assert_allclose(w, np.full((3, 3), 1 / 3), atol=1e-15)


def test_softmax_shift_invariance_per_row():
    rng = np.random.default_rng(6)
    q, k = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    # a constant key column adds a per-row constant to the logits
    k_aug = np.hstack([k, np.ones((5, 1))])
    q_shift = np.hstack([q, rng.uniform(-50, 50, (3, 1))])
    q_zero = np.hstack([q, np.zeros((3, 1))])
    np.testing.assert_allclose(softmax_weights(q_shift, k_aug), softmax_weights(q_zero, k_aug), atol=1e-14)


def test_large_logits_overflow_is_reported():
    q = np.array([[100.0]])
    k = np.array([[100.0], [99.0]])
    with pytest.raises(NonFiniteError):
        attend_projected(q, k, np.ones((2, 1)), Kernel.scaled_exp(1))
    np.testing.assert_allclose(softmax_weights(q, k).sum(), 1.0)


def test_fully_masked_row_raises():
    q, k = np.ones((2, 2)), np.ones((2, 2))
    mask = MaskPolicy.explicit([{0}, set()])
    with pytest.raises(DegenerateRowError):
        attend_projected(q, k, np.ones((2, 1)), Kernel.scaled_exp(2), mask)
    with pytest.raises(DegenerateRowError):
        softmax_weights(q, k, mask)


def test_combine_rows_are_convex():
    a = np.array([[1.0, 3.0], [2.0, 2.0]])
    np.testing.assert_allclose(combine(a, [[4.0], [8.0]]), [[7.0], [6.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_additive_equals_multiplicative_on_random_subsets(n_q, n_kv, d, seed):
    rng = np.random.default_rng(seed)
    sets = [{j for j in range(n_kv) if rng.random() < 0.5} or {0} for _ in range(n_q)]
    mask = MaskPolicy.explicit(sets)
    q, k = rng.standard_normal((n_q, d)), rng.standard_normal((n_kv, d))
    kern = Kernel.scaled_exp(d)
    add = attention_scores(q, k, kern, mask, "additive")
    mul = attention_scores(q, k, kern, mask, "multiplicative")
    assert np.array_equal(add, mul)
