import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stclip import autodiff as ad
from stclip.errors import ConfigError, ShapeError
from stclip.gradcheck import TOY_CONFIG, run_gradcheck, toy_batch, toy_vocab
from stclip.model import context_vectors, init_model, text_features
from stclip.scamp import (aspect_row_aggregate, build_class_text_input, cross_aspect_attention,
                          cross_modal_attention, init_prompts, inject_context)

seeds = st.integers(0, 2 ** 31)
T = ad.Tensor


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_prompt_init_std():
    w = init_prompts(np.random.default_rng(0), 4, 16, 512)["prompt.w"]
    assert w.shape == (4, 16, 512)
    assert abs(w.mean()) < 1e-3 and w.std() == pytest.approx(0.02, rel=0.02)


def test_inject_context_cases():
    rng = np.random.default_rng(0)
    w, r = rng.normal(size=(3, 4, 8)), rng.normal(size=8)
    assert np.array_equal(inject_context(T(w), T(np.zeros(8))).data, w)
    np.testing.assert_array_equal(inject_context(T(np.zeros((3, 4, 8))), T(r)).data, np.broadcast_to(r, (3, 4, 8)))
    out = inject_context(T(w), T(r)).data
    for p in range(3):
        for m in range(4):
            np.testing.assert_array_equal(out[p, m], w[p, m] + r)
    batched = inject_context(T(w), T(np.stack([r, 2 * r]))).data
    np.testing.assert_array_equal(batched[1], w + 2 * r)
    with pytest.raises(ShapeError):
        inject_context(T(w), T(np.zeros(5)))


def mha_weights(rng, d, scale=1.0):
    return [T(rng.normal(0, scale, (d, d))) for _ in range(4)]


def test_cross_modal_identical_patches():
    rng = np.random.default_rng(1)
    wq, wk, wv, wo = mha_weights(rng, 8)
    u = rng.normal(size=8)
    out = cross_modal_attention(T(rng.normal(size=(4, 8))), T(np.tile(u, (5, 1))), wq, wk, wv, wo, 2).data
    np.testing.assert_allclose(out, np.tile(u @ wv.data @ wo.data, (4, 1)), atol=1e-12)


def test_cross_modal_zero_query_is_mean():
    rng = np.random.default_rng(2)
    _, wk, wv, wo = mha_weights(rng, 8)
    f = rng.normal(size=(5, 8))
    out = cross_modal_attention(T(rng.normal(size=(4, 8))), T(f), T(np.zeros((8, 8))), wk, wv, wo, 2).data
    expected = (f @ wv.data).mean(axis=0) @ wo.data
    np.testing.assert_allclose(out, np.tile(expected, (4, 1)), atol=1e-12)


def test_cross_modal_single_head_by_hand():
    rng = np.random.default_rng(3)
    v, f = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    wq, wk, wv, wo = mha_weights(rng, 4)
    out, weights = cross_modal_attention(T(v), T(f), wq, wk, wv, wo, 1, return_weights=True)
    q, k, val = v @ wq.data, f @ wk.data, f @ wv.data
    a = np.zeros((2, 3))
    for i in range(2):
        s = np.array([q[i] @ k[j] for j in range(3)]) / 2.0
        a[i] = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(weights.data[0], a, rtol=1e-12)
    np.testing.assert_allclose(out.data, (a @ val) @ wo.data, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_cross_modal_duplicate_patches_invariant(seed):
    rng = np.random.default_rng(seed)
    w = mha_weights(rng, 8)
    v, f = T(rng.normal(size=(4, 8))), rng.normal(size=(3, 8))
    a = cross_modal_attention(v, T(f), *w, 2).data
    b = cross_modal_attention(v, T(np.concatenate([f, f])), *w, 2).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_cross_modal_per_aspect_weights():
    rng = np.random.default_rng(4)
    v, f = rng.normal(size=(2, 3, 8)), rng.normal(size=(5, 8))
    ws = [rng.normal(size=(2, 8, 8)) for _ in range(4)]
    out = cross_modal_attention(T(v), T(f), *map(T, ws), 2).data
    for p in range(2):
        single = cross_modal_attention(T(v[p]), T(f), *(T(w[p]) for w in ws), 2).data
        np.testing.assert_allclose(out[p], single, rtol=1e-12)


def test_cross_aspect_single_zero():
    v = np.random.default_rng(5).normal(size=(1, 3, 4))
    out = cross_aspect_attention(T(v), T(np.zeros((1, 1, 4, 4)))).data
    np.testing.assert_allclose(out[0], np.tile(v[0].mean(axis=0), (3, 1)), atol=1e-12)


def test_cross_aspect_direct_evaluation():
    rng = np.random.default_rng(6)
    vh = rng.normal(size=(2, 4))
    v = np.stack([vh, vh])
    wa = rng.normal(size=(2, 2, 4, 4))
    out = cross_aspect_attention(T(v), T(wa)).data
    for p in range(2):
        expected = sum(np_softmax(vh @ wa[p, q] @ vh.T / 2.0) @ vh for q in range(2))
        np.testing.assert_allclose(out[p], expected, rtol=1e-12)
    # every output row lies in the row span of the shared input
    coef, *_ = np.linalg.lstsq(vh.T, out.reshape(-1, 4).T, rcond=None)
    np.testing.assert_allclose(vh.T @ coef, out.reshape(-1, 4).T, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_cross_aspect_rows_stochastic(seed):
    rng = np.random.default_rng(seed)
    _, att = cross_aspect_attention(T(rng.normal(0, 2, (3, 4, 8))), T(rng.normal(size=(3, 3, 8, 8))),
                                    return_weights=True)
    assert att.shape == (3, 3, 4, 4)
    assert np.all(att.data >= 0)
    np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seeds, st.permutations(range(3)))
def test_cross_aspect_permutation_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    v, wa = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 3, 8, 8))
    perm = list(perm)
    out = cross_aspect_attention(T(v), T(wa)).data
    out_p = cross_aspect_attention(T(v[perm]), T(wa[perm][:, perm])).data
    # the sum over q runs in a different order, so agreement is to rounding only
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12, atol=1e-12)


def test_cross_aspect_shape_error():
    with pytest.raises(ShapeError):
        cross_aspect_attention(T(np.ones((2, 3, 4))), T(np.ones((3, 3, 4, 4))))


def test_aggregate_rows_normalised():
    att = np.random.default_rng(7).random((3, 3, 4, 4))
    agg = aspect_row_aggregate(att)
    np.testing.assert_allclose(agg.sum(axis=1), 1.0)
    sums = att.sum(axis=(2, 3))
    np.testing.assert_allclose(agg, sums / sums.sum(axis=1, keepdims=True))


def test_class_insertion_positions():
    v = np.arange(16 * 2, dtype=float).reshape(16, 2)
    c = np.array([-1.0, -2.0])
    end = build_class_text_input(T(v), T(c), "end").data
    np.testing.assert_array_equal(end[:16], v)
    np.testing.assert_array_equal(end[16], c)
    start = build_class_text_input(T(v), T(c), "start").data
    np.testing.assert_array_equal(start[0], c)
    np.testing.assert_array_equal(start[1:], v)
    mid = build_class_text_input(T(v), T(c), "middle").data
    np.testing.assert_array_equal(mid[:8], v[:8])
    np.testing.assert_array_equal(mid[8], c)
    np.testing.assert_array_equal(mid[9:], v[8:])
    with pytest.raises(ConfigError):
        build_class_text_input(T(v), T(c), "left")


# full prompt pipeline at toy dimensions --------------------------------------------

@pytest.fixture(scope="module")
def toy():
    state = init_model(TOY_CONFIG, toy_vocab(), seed=0)
    return state, toy_batch(state, 3, 0)


def features(state, batch, r=None):
    if r is None:
        r = context_vectors(state, batch)
    return text_features(state, r, batch.patches).data


def test_text_feature_shape(toy):
    state, batch = toy
    assert features(state, batch).shape == (3, 2, 5, TOY_CONFIG.dim)


def test_aspects_are_coupled(toy):
    state, batch = toy
    base = features(state, batch)
    s = state.copy()
    s.params["prompt.w"].data[1] = 0.0
    assert not np.allclose(features(s, batch)[:, 0], base[:, 0])


def test_nca_decouples_aspects(toy):
    state, batch = toy
    nca = state.with_config(ablations=("nca",))
    base = features(nca, batch)
    s = nca.copy()
    s.params["prompt.w"].data[1] = 0.0
    s.params["cm.wq"].data[1] *= 3.0
    assert np.array_equal(features(s, batch)[:, 0], base[:, 0])


def test_zero_context_equals_nst(toy):
    state, batch = toy
    zero = features(state, batch, r=ad.Tensor(np.zeros((3, TOY_CONFIG.dim))))
    assert np.array_equal(zero, features(state.with_config(ablations=("nst",)), batch))


def test_all_flags_give_static_prompts(toy):
    state, batch = toy
    s = state.with_config(ablations=("nst", "ncm", "nca"))
    out = features(s, batch)
    # nothing sample-specific reaches the text path any more
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_full_chain_gradient():
    result = run_gradcheck()
    assert result.max_error < 1e-4
    assert not any(result.frozen_nonzero.values())


def test_attention_scale_matches_width():
    # scores are divided by sqrt(D): doubling both inputs' scale by sqrt(2) doubles the logits
    rng = np.random.default_rng(8)
    v = rng.normal(size=(1, 2, 4))
    wa = np.ones((1, 1, 4, 4))
    _, att = cross_aspect_attention(T(v), T(wa), return_weights=True)
    s = v[0] @ wa[0, 0] @ v[0].T / math.sqrt(4)
    np.testing.assert_allclose(att.data[0, 0], np_softmax(s), rtol=1e-12)
