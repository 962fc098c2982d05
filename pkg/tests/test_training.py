import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stclip import autodiff as ad
from stclip.aspects import ASPECTS, CLASS_WORDS
from stclip.errors import ContractViolation, DataError, NumericError, SamplingError
from stclip.experiment import desk_model_config, desk_train_config
from stclip.gradcheck import TOY_CONFIG, toy_batch, toy_vocab
from stclip.model import batch_loss, init_model, probabilities
from stclip.training import (TrainConfig, aspect_loss, class_probabilities, cosine_lr, few_shot_sample, total_loss,
                             train)

T = ad.Tensor


def test_identical_texts_give_uniform():
    p = class_probabilities(T(np.array([1.0, 2.0, 0.5])), [T(np.array([0.3, -1.0, 2.0]))] * 4, 0.01).data
    np.testing.assert_allclose(p, 0.25)


def test_two_class_values():
    i = np.array([0.6, -0.8])
    p = class_probabilities(T(i), [T(i), T(-i)], 1.0).data
    e = math.exp(1.0), math.exp(-1.0)
    np.testing.assert_allclose(p, [e[0] / sum(e), e[1] / sum(e)], rtol=1e-12)
    assert p == pytest.approx([0.8808, 0.1192], abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100))
def test_temperature_scaling_keeps_argmax(seed, c):
    rng = np.random.default_rng(seed)
    i, t = T(rng.normal(size=6)), T(rng.normal(size=(4, 6)))
    a = class_probabilities(i, t, 0.05).data
    b = class_probabilities(i, t, 0.05 * c).data
    assert np.argmax(a) == np.argmax(b)
    assert sum(b) == pytest.approx(1.0, abs=1e-12)


def test_aspect_loss_values():
    assert aspect_loss(T(np.array([0.0, 1.0, 0.0])), [0, 1, 0]).item() == 0.0
    assert aspect_loss(T(np.full(5, 0.2)), [0, 0, 0, 1, 0]).item() == pytest.approx(math.log(5))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(4))
        k = rng.integers(4)
        assert aspect_loss(T(p), np.eye(4)[k]).item() == pytest.approx(-math.log(p[k]), rel=1e-14)
    with pytest.raises(DataError):
        aspect_loss(T(np.full(2, 0.5)), [1, 1])


def test_total_loss_sums():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(3))
    y = np.eye(3)[2]
    single = total_loss([(T(p), y)]).item()
    assert single == aspect_loss(T(p), y).item()
    assert total_loss([(T(p), y)] * 2).item() == pytest.approx(2 * single)
    items, expected = [], 0.0
    for _ in range(3):
        for a in ASPECTS:
            k = len(CLASS_WORDS[a])
            q = rng.dirichlet(np.ones(k))
            c = rng.integers(k)
            items.append((T(q), np.eye(k)[c]))
            expected += -math.log(q[c])
    assert len(items) == 12
    assert total_loss(items).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(DataError):
        total_loss([(T(p), None)])


def test_batch_loss_is_mean_of_sample_sums():
    # mu = 1 keeps every probability far above the 1e-12 clamp of the unfused loss
    state = init_model(TOY_CONFIG, toy_vocab(), seed=0).with_config(mu=1.0)
    batch = toy_batch(state, 3, 0)
    p = probabilities(state, batch).data
    items = []
    for b in range(3):
        for a_i, a in enumerate(TOY_CONFIG.aspects):
            k = len(CLASS_WORDS[a])
            items.append((T(p[b, a_i, :k]), np.eye(k)[batch.labels[b, a_i]]))
    assert batch_loss(state, batch).item() == pytest.approx(total_loss(items).item() / 3, rel=1e-10)


def test_cosine_lr_values():
    assert cosine_lr(0, 100, 0.002) == 0.002
    assert cosine_lr(100, 100, 0.002) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.002) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.002)


def test_few_shot_full_selection():
    labels = np.array([[k % 5, k % 4, k % 4, k % 3] for k in range(5)])
    labels[4] = [4, 0, 0, 0]
    assert list(few_shot_sample(labels, 1, seed=0)) == [0, 1, 2, 3, 4]


def test_few_shot_counts_and_determinism():
    rng = np.random.default_rng(0)
    labels = np.stack([np.repeat(np.arange(len(CLASS_WORDS[a])), 10)[rng.permutation(10 * len(CLASS_WORDS[a]))][:30]
                       if a == "accessibility" else rng.permutation(np.resize(np.arange(len(CLASS_WORDS[a])), 30))
                       for a in ASPECTS], axis=1)
    rows = few_shot_sample(labels, 4, seed=3)
    assert np.array_equal(rows, few_shot_sample(labels, 4, seed=3))
    # every aspect's draw contributes four per class; the union can only hold more
    for p, a in enumerate(ASPECTS):
        counts = np.bincount(labels[rows, p], minlength=len(CLASS_WORDS[a]))
        assert np.all(counts >= 4)
    one_aspect = few_shot_sample(labels[:, 3:], 4, seed=3, aspects=("accessibility",))
    assert list(np.bincount(labels[one_aspect, 3])) == [4, 4, 4]


def test_few_shot_starved_class_named():
    labels = np.array([[0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 2, 1], [3, 3, 3, 0], [4, 0, 0, 1]])
    with pytest.raises(SamplingError, match="accessibility='extremely hard'"):
        few_shot_sample(labels, 1, seed=0)


@pytest.fixture
def toy():
    state = init_model(TOY_CONFIG, toy_vocab(), seed=0)
    return state, toy_batch(state, 4, 0)


def test_zero_epochs_and_zero_lr(toy):
    state, batch = toy
    h = state.full_hash()
    train(state, batch, TrainConfig(epochs=0))
    assert state.full_hash() == h
    train(state, batch, TrainConfig(epochs=1, lr=0.0, batch_size=1))
    assert state.full_hash() == h


def central_difference(f, p, eps=1e-5):
    g = np.zeros_like(p.data)
    for idx in np.ndindex(p.shape):
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = f()
        p.data[idx] = orig - eps
        down = f()
        p.data[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def test_one_step_matches_finite_difference(toy):
    state, batch = toy
    one = batch.take(np.array([0]))
    lr = 1e-3
    old = {k: v.data.copy() for k, v in state.trainable().items()}
    f = lambda: batch_loss(state, one).item()  # noqa: E731
    fd = {k: central_difference(f, v) for k, v in state.trainable().items()}
    train(state, one, TrainConfig(epochs=1, lr=lr, batch_size=1))
    worst = max(np.abs(state.params[k].data - (old[k] - lr * fd[k])).max() for k in old)
    assert worst < 1e-6


def test_frozen_change_is_a_contract_violation(toy):
    state, batch = toy

    def tamper(row):
        state.params["txt.proj"].data = state.params["txt.proj"].data + 1.0

    with pytest.raises(ContractViolation):
        train(state, batch, TrainConfig(epochs=1, lr=0.1), epoch_callback=tamper)


def test_non_finite_loss_aborts_with_coordinates(toy):
    state, batch = toy
    state.params["prompt.w"].data[0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch 1"):
        train(state, batch, TrainConfig(epochs=1, lr=0.1))


@pytest.fixture(scope="module")
def desk_runs(request):
    ds, vocab = request.getfixturevalue("small")
    mc = desk_model_config(ds)
    runs = []
    for seed in range(5):
        state = init_model(mc, vocab, seed)
        rows = few_shot_sample(ds.labels, 4, seed)
        before = state.frozen_hash()
        state, log = train(state, ds.batch(state, rows), desk_train_config(seed, shots=4, epochs=20))
        runs.append((state, log, before))
    return runs


def test_loss_trend_majority(desk_runs):
    falling = sum(log[19]["mean_loss"] < log[0]["mean_loss"] for _, log, _ in desk_runs)
    assert falling >= 4


def test_frozen_hash_stable(desk_runs):
    assert all(state.frozen_hash() == before for state, _, before in desk_runs)


def test_seed_determinism(small):
    ds, vocab = small
    mc = desk_model_config(ds)
    rows = few_shot_sample(ds.labels, 2, 0)
    out = []
    for _ in range(2):
        state = init_model(mc, vocab, 7)
        state, log = train(state, ds.batch(state, rows), desk_train_config(7, shots=2, epochs=3))
        out.append((state.full_hash(), log))
    assert out[0] == out[1]
