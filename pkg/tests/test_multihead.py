import numpy as np
import pytest

from attnlab.attention import HeadWeights, Kernel, MaskPolicy, attend, attend_projected
from attnlab.errors import ShapeError, SpecError
from attnlab.multihead import (
    MhaSpec,
    MhaWeights,
    expand_kv_heads,
    mha_forward,
    self_attention,
    stacked_weights,
)
from attnlab.tokenizer import RopeParams, rope_rotate
from oracles import causal_allowed, mha_loops


def test_spec_validation_and_kind():
    assert MhaSpec.square(4, 8).kind == "mha"
    assert MhaSpec.square(4, 8, n_kv_heads=2).kind == "gqa"
    assert MhaSpec.square(4, 8, n_kv_heads=1).kind == "mqa"
    with pytest.raises(SpecError):
        MhaSpec.square(4, 8, n_kv_heads=3)
    with pytest.raises(SpecError):
        MhaSpec(0, 1, 2, 2, 2, 2)
    spec = MhaSpec.square(6, 12, n_kv_heads=2)
    assert [spec.kv_head(h) for h in range(6)] == [0, 0, 0, 1, 1, 1]


def test_weights_check_reports_bad_shapes():
    spec = MhaSpec.square(2, 4)
    w = MhaWeights.random(spec, np.random.default_rng(0))
    w.check(spec)
    bad = MhaWeights(w.wq, w.wk, w.wv, np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        bad.check(spec)
    with pytest.raises(SpecError):
        MhaWeights(w.wq[:1], w.wk, w.wv, w.wo).check(spec)


def test_one_head_identity_output_is_single_head_attend():
    rng = np.random.default_rng(1)
    spec = MhaSpec(1, 1, 5, 3, 4, 4)
    w = MhaWeights([rng.standard_normal((5, 3))], [rng.standard_normal((5, 3))], [rng.standard_normal((5, 4))], np.eye(4))
    x, y = rng.standard_normal((3, 5)), rng.standard_normal((6, 5))
    want = attend(x, y, y, HeadWeights(w.wq[0], w.wk[0], w.wv[0]), Kernel.scaled_exp(3))
    np.testing.assert_array_equal(mha_forward(x, y, w, spec), want)


def test_redundant_heads_average_back_to_one_head():
    rng = np.random.default_rng(2)
    wq, wk, wv = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    wo = np.vstack([0.5 * np.eye(3), 0.5 * np.eye(3)])
    spec = MhaSpec(2, 2, 4, 2, 3, 3)
    x = rng.standard_normal((5, 4))
    got = self_attention(x, MhaWeights([wq, wq], [wk, wk], [wv, wv], wo), spec)
    want = attend(x, x, x, HeadWeights(wq, wk, wv), Kernel.scaled_exp(2))
    np.testing.assert_allclose(got, want, atol=1e-14)


@pytest.mark.parametrize("n_kv_heads", [4, 2, 1])
def test_grouped_heads_equal_duplicated_kv_oracle(n_kv_heads):
    rng = np.random.default_rng(3)
    spec = MhaSpec(4, n_kv_heads, 6, 3, 2, 5)
    w = MhaWeights.random(spec, rng)
    xq, xkv = rng.standard_normal((3, 6)), rng.standard_normal((7, 6))
    group = 4 // n_kv_heads
    dup_k = [w.wk[h // group] for h in range(4)]
    dup_v = [w.wv[h // group] for h in range(4)]
    want = mha_loops(xq, xkv, w.wq, dup_k, dup_v, w.wo)
    assert np.max(np.abs(mha_forward(xq, xkv, w, spec) - want)) < 1e-12
    full_w, full_spec = expand_kv_heads(w, spec)
    assert np.max(np.abs(mha_forward(xq, xkv, full_w, full_spec) - want)) < 1e-12


def test_stacked_weights():
    one = np.arange(6.0).reshape(3, 2)
    wq, _, _ = stacked_weights(MhaWeights([one], [one], [one], np.eye(2)))
    np.testing.assert_array_equal(wq, one)
    two = MhaWeights([[[1.0], [0.0]], [[0.0], [1.0]]], [[[1.0], [0.0]]] * 2, [[[1.0], [0.0]]] * 2, np.eye(2))
    np.testing.assert_array_equal(stacked_weights(two)[0], np.eye(2))
    rng = np.random.default_rng(4)
    spec = MhaSpec(3, 3, 5, 2, 4, 5)
    w = MhaWeights.random(spec, rng)
    x = rng.standard_normal((4, 5))
    sq, _, sv = stacked_weights(w)
    for h in range(3):
        np.testing.assert_allclose((x @ sq)[:, 2 * h:2 * h + 2], x @ w.wq[h], atol=1e-14)
        np.testing.assert_allclose((x @ sv)[:, 4 * h:4 * h + 4], x @ w.wv[h], atol=1e-14)


def test_single_token_self_attention_is_value_path():
    rng = np.random.default_rng(5)
    spec = MhaSpec.square(2, 6)
    w = MhaWeights.random(spec, rng)
    x = rng.standard_normal((1, 6))
    want = np.hstack([x @ wv for wv in w.wv]) @ w.wo
    np.testing.assert_allclose(self_attention(x, w, spec), want, atol=1e-14)


def test_self_attention_is_mha_forward():
    rng = np.random.default_rng(6)
    spec = MhaSpec.square(2, 6, n_kv_heads=1)
    w = MhaWeights.random(spec, rng)
    x = rng.standard_normal((4, 6))
    assert self_attention(x, w, spec).tobytes() == mha_forward(x, x, w, spec).tobytes()


def test_causal_prefix_stability_and_loop_oracle():
    rng = np.random.default_rng(7)
    spec = MhaSpec.square(2, 6)
    w = MhaWeights.random(spec, rng)
    x = rng.standard_normal((6, 6))
    causal = MaskPolicy.causal()
    full = self_attention(x, w, spec, causal)
    assert np.max(np.abs(full - mha_loops(x, x, w.wq, w.wk, w.wv, w.wo, causal_allowed(6, 6)))) < 1e-12
    for t in range(1, 6):
        assert np.max(np.abs(self_attention(x[:t], w, spec, causal) - full[:t])) < 1e-10


def test_rope_rotates_queries_and_keys_at_absolute_positions():
    rng = np.random.default_rng(8)
    spec = MhaSpec(1, 1, 4, 2, 2, 2)
    w = MhaWeights.random(spec, rng)
    x = rng.standard_normal((3, 4))
    rope = RopeParams(2)
    pos = 5 + np.arange(3)
    q = rope_rotate(x @ w.wq[0], pos, rope)
    k = rope_rotate(x @ w.wk[0], pos, rope)
    want = attend_projected(q, k, x @ w.wv[0], Kernel.scaled_exp(2)) @ w.wo
    np.testing.assert_allclose(self_attention(x, w, spec, rope=rope, start=5), want, atol=1e-14)


def test_return_scores_and_input_checks():
    rng = np.random.default_rng(9)
    spec = MhaSpec.square(2, 4)
    w = MhaWeights.random(spec, rng)
    y, scores = self_attention(rng.standard_normal((3, 4)), w, spec, return_scores=True)
    assert len(scores) == 2 and scores[0].shape == (3, 3)
    with pytest.raises(ShapeError):
        self_attention(np.ones((2, 5)), w, spec)
