import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageseq.errors import DimensionError, StateError
from stageseq.lstm import (
    LossWeights,
    LstmState,
    cross_entropy,
    init_lstm_params,
    lstm_backward,
    lstm_head,
    lstm_head_backward,
    lstm_step,
    lstm_unroll,
    lstm_unroll_batch,
    sequence_loss,
    total_loss,
    weighted_ce_batch,
)
from stageseq.numerics import finite_diff_gradient, gradcheck_relative_error

C, G, K = 5, 6, 3


def tiny_params(seed=0):
    return init_lstm_params(C, G, K, np.random.default_rng(seed))


def scalar_step(z, h_prev, c_prev, params):
    """Pure-scalar reference for one LSTM step."""
    def gate(name, squash):
        out = []
        for r in range(G):
            acc = params[f"lstm_b{name}"][r]
            acc += math.fsum(params[f"lstm_w{name}"][r, j] * z[j] for j in range(C))
            acc += math.fsum(params[f"lstm_u{name}"][r, j] * h_prev[j] for j in range(G))
            out.append(squash(acc))
        return np.array(out)

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = gate("i", sig)
    f = gate("f", sig)
    g = gate("g", math.tanh)
    o = gate("o", sig)
    c_new = f * c_prev + i * g
    return o * np.tanh(c_new), c_new


# ---------------------------------------------------------------------------
# recurrence


def test_step_all_zero_params_gives_zero_state():
    params = {name: np.zeros_like(p) for name, p in tiny_params().items()}
    state = lstm_step(np.random.default_rng(0).normal(size=C), LstmState.zeros(G), params)
    assert np.array_equal(state.h, np.zeros(G))
    assert np.array_equal(state.c, np.zeros(G))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_hidden_state_bounded(seed):
    rng = np.random.default_rng(seed)
    params = init_lstm_params(C, G, K, rng)
    state = LstmState.zeros(G)
    for _ in range(4):
        state = lstm_step(rng.normal(size=C) * 3, state, params)
        assert np.all(np.abs(state.h) < 1)


def test_step_matches_scalar_recurrence():
    params = tiny_params(3)
    rng = np.random.default_rng(4)
    z = rng.normal(size=C)
    prev = LstmState(rng.normal(size=G) * 0.5, rng.normal(size=G))
    got = lstm_step(z, prev, params)
    want_h, want_c = scalar_step(z, prev.h, prev.c, params)
    assert np.max(np.abs(got.h - want_h)) <= 1e-12
    assert np.max(np.abs(got.c - want_c)) <= 1e-12


def test_step_dimension_errors():
    params = tiny_params()
    with pytest.raises(DimensionError):
        lstm_step(np.zeros(C + 1), LstmState.zeros(G), params)
    with pytest.raises(DimensionError):
        lstm_step(np.zeros(C), LstmState.zeros(G + 2), params)


def test_unroll_single_position_equals_one_step():
    params = tiny_params(5)
    z = np.random.default_rng(6).normal(size=(1, C))
    hidden = lstm_unroll_batch(z[None], params)[0][0]
    step = lstm_step(z[0], LstmState.zeros(G), params)
    assert np.max(np.abs(hidden[0] - step.h)) <= 1e-12


def test_unroll_matches_manual_chaining():
    params = tiny_params(7)
    features = np.random.default_rng(8).normal(size=(4, C))
    hidden = lstm_unroll(features, params)
    state = LstmState.zeros(G)
    for pos in range(4):
        state = lstm_step(features[pos], state, params)
        assert np.max(np.abs(hidden[pos] - state.h)) <= 1e-12


def test_unroll_causal_prefix_property():
    params = tiny_params(9)
    rng = np.random.default_rng(10)
    features = rng.normal(size=(K, C))
    hidden = lstm_unroll(features, params)
    tampered = features.copy()
    tampered[-1] += rng.normal(size=C)
    hidden2 = lstm_unroll(tampered, params)
    assert np.array_equal(hidden[:-1], hidden2[:-1])
    assert not np.array_equal(hidden[-1], hidden2[-1])


# ---------------------------------------------------------------------------
# head


def test_head_zero_weights_uniform_rows():
    params = tiny_params()
    params["head_w"] = np.zeros_like(params["head_w"])
    params["head_b"] = np.zeros_like(params["head_b"])
    probs = lstm_head(np.random.default_rng(1).normal(size=(K, G)), params)
    assert np.allclose(probs, 1.0 / K)


def test_head_rows_are_distributions_and_independent():
    params = tiny_params(11)
    hidden = np.random.default_rng(12).normal(size=(K, G))
    probs = lstm_head(hidden, params)
    assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-12
    for pos in range(K):
        row = lstm_head(hidden[pos][None], params)[0]
        assert np.max(np.abs(probs[pos] - row)) <= 1e-12


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_one_hot_is_zero():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0


def test_cross_entropy_uniform_is_log_k():
    assert abs(cross_entropy(np.full(4, 0.25), 2) - math.log(4)) <= 1e-12


def test_cross_entropy_frozen_value():
    # -log(0.7) evaluated at 50-digit precision: 0.35667494393873237891...
    got = cross_entropy(np.array([0.7, 0.1, 0.1, 0.1]), 0)
    assert abs(got - 0.3566749439387324) <= 1e-12


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(np.full(4, 0.25), 4)


def test_cross_entropy_clamps_zero_probability():
    loss = cross_entropy(np.array([0.0, 1.0]), 0)
    assert math.isfinite(loss)
    assert abs(loss - (-math.log(1e-12))) <= 1e-9


def test_sequence_loss_perfect_prediction():
    probs = np.eye(K)
    assert sequence_loss(probs, [0, 1, 2], np.ones(K)) == 0.0


def test_sequence_loss_zero_weights():
    probs = np.full((K, K), 1.0 / K)
    assert sequence_loss(probs, [0, 1, 2], np.zeros(K)) == 0.0


def test_sequence_loss_uniform_rows():
    probs = np.full((4, 4), 0.25)
    got = sequence_loss(probs, [0, 1, 2, 3], np.ones(4))
    assert abs(got - 4 * math.log(4)) <= 1e-12


def test_total_loss_beta_zero_reduces_to_lstm_term():
    rng = np.random.default_rng(13)
    probs_l = np.exp(rng.normal(size=(4, 4)))
    probs_l /= probs_l.sum(-1, keepdims=True)
    probs_v = np.full((4, 4), 0.25)
    weights = LossWeights((1, 1, 1, 1), (0, 0, 0, 0))
    labels = [0, 1, 2, 3]
    assert total_loss(probs_l, probs_v, labels, weights) == sequence_loss(probs_l, labels, np.ones(4))


def test_total_loss_uniform_heads():
    probs = np.full((4, 4), 0.25)
    got = total_loss(probs, probs, [0, 1, 2, 3], LossWeights.ones(4))
    assert abs(got - 8 * math.log(4)) <= 1e-12


def test_total_loss_swap_symmetry():
    rng = np.random.default_rng(14)
    pl_ = np.exp(rng.normal(size=(K, K)))
    pl_ /= pl_.sum(-1, keepdims=True)
    pv = np.exp(rng.normal(size=(K, K)))
    pv /= pv.sum(-1, keepdims=True)
    w = LossWeights((1.0, 0.5, 2.0), (1.0, 0.5, 2.0))
    labels = [0, 2, 1]
    assert abs(total_loss(pl_, pv, labels, w) - total_loss(pv, pl_, labels, w)) <= 1e-12


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights((0, 0), (0, 0))
    with pytest.raises(ValueError):
        LossWeights((-1, 1), (1, 1))
    with pytest.raises(ValueError):
        LossWeights((1, 1), (1, 1, 1))


def test_zero_initialized_heads_give_log_k_rows():
    params = tiny_params(15)
    params["head_w"] = np.zeros_like(params["head_w"])
    params["head_b"] = np.zeros_like(params["head_b"])
    features = np.random.default_rng(16).normal(size=(K, C))
    probs = lstm_head(lstm_unroll(features, params), params)
    for pos in range(K):
        assert abs(cross_entropy(probs[pos], pos) - math.log(K)) <= 1e-9


# ---------------------------------------------------------------------------
# backward (BPTT)


def _total_loss_via_batch(features, labels, params, weights):
    hidden, _ = lstm_unroll_batch(features, params)
    probs = lstm_head(hidden, params)
    losses, _ = weighted_ce_batch(probs, labels, weights)
    return float(losses.sum())


def test_backward_zero_upstream():
    params = tiny_params(17)
    features = np.random.default_rng(18).normal(size=(2, K, C))
    _, cache = lstm_unroll_batch(features, params)
    grads, dz = lstm_backward(cache, params, np.zeros((2, K, G)))
    assert np.array_equal(dz, np.zeros_like(dz))
    for g in grads.values():
        assert np.array_equal(g, np.zeros_like(g))


def test_backward_matches_finite_differences():
    params = tiny_params(19)
    rng = np.random.default_rng(20)
    features = rng.normal(size=(2, K, C)) * 0.7
    labels = np.array([[0, 1, 2], [2, 0, 1]])
    weights = np.array([1.0, 0.5, 2.0])

    hidden, cache = lstm_unroll_batch(features, params)
    probs = lstm_head(hidden, params)
    _, dprobs = weighted_ce_batch(probs, labels, weights)
    head_grads, dhidden = lstm_head_backward(hidden, probs, params, dprobs)
    grads, dfeatures = lstm_backward(cache, params, dhidden)
    grads.update(head_grads)

    numeric = finite_diff_gradient(
        lambda p: _total_loss_via_batch(features, labels, p, weights), params, 1e-5
    )
    for name in params:
        err = gradcheck_relative_error(grads[name], numeric[name])
        assert err <= 1e-4, f"{name}: {err}"

    # input gradient against finite differences as well
    fd_features = np.zeros_like(features)
    for index in np.ndindex(features.shape):
        original = features[index]
        features[index] = original + 1e-5
        up = _total_loss_via_batch(features, labels, params, weights)
        features[index] = original - 1e-5
        down = _total_loss_via_batch(features, labels, params, weights)
        features[index] = original
        fd_features[index] = (up - down) / 2e-5
    assert gradcheck_relative_error(dfeatures, fd_features) <= 1e-4


def test_backward_requires_cache():
    with pytest.raises(StateError):
        lstm_backward({}, tiny_params(), np.zeros((1, K, G)))


def test_last_position_feature_gradient_is_causal():
    """Losses at earlier positions contribute nothing to the last z gradient."""
    params = tiny_params(21)
    rng = np.random.default_rng(22)
    features = rng.normal(size=(1, K, C))
    labels = np.array([[0, 1, 2]])

    hidden, cache = lstm_unroll_batch(features, params)
    probs = lstm_head(hidden, params)

    # keep only the losses of positions 0..K-2
    weights_front = np.array([1.0, 1.0, 0.0])
    _, dprobs = weighted_ce_batch(probs, labels, weights_front)
    _, dhidden = lstm_head_backward(hidden, probs, params, dprobs)
    _, dfeatures = lstm_backward(cache, params, dhidden)
    assert np.array_equal(dfeatures[0, -1], np.zeros(C))

    # and perturbing the last feature row leaves earlier losses unchanged
    loss_front = _total_loss_via_batch(features, labels, params, weights_front)
    features[0, -1] += rng.normal(size=C)
    assert _total_loss_via_batch(features, labels, params, weights_front) == loss_front
