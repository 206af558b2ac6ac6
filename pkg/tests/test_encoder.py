import numpy as np
import pytest

from stageseq.encoder import (
    EncoderConfig,
    encode,
    encode_sequence,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
    vision_head,
)
from stageseq.errors import DimensionError, StateError
from stageseq.numerics import finite_diff_gradient, gradcheck_relative_error

TINY = EncoderConfig(image_height=12, image_width=12, feature_dim=8, conv_channels=(3, 4))


def tiny_params(seed=0, num_stages=3, config=TINY):
    return init_encoder_params(config, num_stages, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# config


def test_config_stage_dims():
    cfg = EncoderConfig()
    assert cfg.stage_dims() == [(30, 30), (15, 15), (13, 13), (6, 6)]
    assert cfg.flat_dim == 6 * 6 * 16


def test_config_rejects_too_small_image():
    with pytest.raises(ValueError):
        EncoderConfig(image_height=8, image_width=8)


def test_config_requires_two_conv_blocks():
    with pytest.raises(ValueError):
        EncoderConfig(conv_channels=(8, 16, 32))


def test_feature_dim_must_cover_stages():
    with pytest.raises(ValueError):
        init_encoder_params(TINY, num_stages=9, rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# forward


def test_zero_image_zero_biases_gives_zero_features():
    params = tiny_params()
    features = encode(np.zeros((12, 12)), params, TINY)
    assert np.array_equal(features, np.zeros(8))


def test_encode_deterministic():
    params = tiny_params(3)
    image = np.random.default_rng(1).uniform(size=(12, 12))
    assert np.array_equal(encode(image, params, TINY), encode(image, params, TINY))


def naive_forward(image, params, config):
    """Scalar-loop reference encoder (conv/relu/pool/dense)."""
    from tests.test_numerics import conv2d_naive, maxpool2_naive

    x = image[..., None] if image.ndim == 2 else image
    a1 = np.maximum(conv2d_naive(x, params["conv1_w"], params["conv1_b"]), 0.0)
    p1 = maxpool2_naive(a1)
    a2 = np.maximum(conv2d_naive(p1, params["conv2_w"], params["conv2_b"]), 0.0)
    p2 = maxpool2_naive(a2)
    dense = params["dense_w"] @ p2.reshape(-1) + params["dense_b"]
    return np.maximum(dense, 0.0)


def test_encode_matches_naive_reference():
    params = tiny_params(5)
    image = np.random.default_rng(6).uniform(size=(12, 12))
    got = encode(image, params, TINY)
    assert np.max(np.abs(got - naive_forward(image, params, TINY))) <= 1e-10


def test_encode_rejects_wrong_size():
    with pytest.raises(DimensionError):
        encode(np.zeros((10, 12)), tiny_params(), TINY)


def test_encode_sequence_shares_parameters():
    params = tiny_params(2)
    image = np.random.default_rng(2).uniform(size=(12, 12))
    rows = encode_sequence([image, image, image], params, TINY)
    assert np.array_equal(rows[0], rows[1])
    assert np.array_equal(rows[1], rows[2])


def test_encode_sequence_is_positionwise():
    params = tiny_params(4)
    rng = np.random.default_rng(3)
    images = [rng.uniform(size=(12, 12)) for _ in range(4)]
    rows = encode_sequence(images, params, TINY)
    permuted = encode_sequence(images[::-1], params, TINY)
    assert np.array_equal(rows[::-1], permuted)
    # per-row recomputation oracle; one-image batches take different BLAS
    # paths, so equality is to tolerance rather than bitwise
    for i, image in enumerate(images):
        assert np.max(np.abs(rows[i] - encode(image, params, TINY))) <= 1e-12


# ---------------------------------------------------------------------------
# vision head


def test_vision_head_zero_weights_uniform():
    params = tiny_params()
    params["vision_w"] = np.zeros_like(params["vision_w"])
    params["vision_b"] = np.zeros_like(params["vision_b"])
    probs = vision_head(np.random.default_rng(0).uniform(size=8), params)
    assert np.allclose(probs, 1 / 3)


def test_vision_head_is_a_distribution():
    probs = vision_head(np.random.default_rng(4).normal(size=8), tiny_params(7))
    assert abs(probs.sum() - 1.0) <= 1e-12
    assert np.all(probs > 0)


def test_vision_head_logits_match_affine_oracle():
    from stageseq.numerics import affine, softmax

    params = tiny_params(8)
    z = np.random.default_rng(5).normal(size=8)
    expected = softmax(affine(z, params["vision_w"], params["vision_b"]))
    assert np.max(np.abs(vision_head(z, params) - expected)) <= 1e-12


def test_vision_head_dimension_error():
    with pytest.raises(DimensionError):
        vision_head(np.zeros(5), tiny_params())


# ---------------------------------------------------------------------------
# backward


def _loss_parts(images, params, config, probe, dprobs_weights):
    """Scalar loss: linear probe on features + weighted log-probs of the head."""
    features, probs, _ = encoder_forward(images, params, config)
    return float((probe * features).sum() + (dprobs_weights * np.log(probs)).sum())


def test_backward_zero_upstream_gives_zero_grads():
    params = tiny_params(1)
    images = np.random.default_rng(2).uniform(size=(3, 12, 12))
    _, probs, cache = encoder_forward(images, params, TINY)
    grads = encoder_backward(cache, params, np.zeros((3, 8)), np.zeros_like(probs))
    for g in grads.values():
        assert np.array_equal(g, np.zeros_like(g))


def test_backward_matches_finite_differences():
    config = TINY
    params = tiny_params(11)
    rng = np.random.default_rng(12)
    images = rng.uniform(size=(2, 12, 12))
    probe = rng.normal(size=(2, 8))
    logw = rng.normal(size=(2, 3))

    features, probs, cache = encoder_forward(images, params, config)
    # d/dprobs of sum(logw * log(probs)) = logw / probs
    grads = encoder_backward(cache, params, probe, logw / probs)

    def loss_fn(p):
        return _loss_parts(images, p, config, probe, logw)

    numeric = finite_diff_gradient(loss_fn, params, 1e-5)
    for name in params:
        err = gradcheck_relative_error(grads[name], numeric[name])
        assert err <= 1e-4, f"{name}: {err}"


def test_shared_weight_grads_sum_over_positions():
    params = tiny_params(9)
    rng = np.random.default_rng(10)
    images = rng.uniform(size=(3, 12, 12))
    probe = rng.normal(size=(3, 8))
    _, probs, cache = encoder_forward(images, params, TINY)
    total = encoder_backward(cache, params, probe, None)
    summed = {name: np.zeros_like(g) for name, g in total.items()}
    for pos in range(3):
        solo = np.zeros_like(probe)
        solo[pos] = probe[pos]
        part = encoder_backward(cache, params, solo, None)
        for name in summed:
            summed[name] += part[name]
    for name in total:
        assert np.max(np.abs(total[name] - summed[name])) <= 1e-12


def test_backward_requires_cache():
    with pytest.raises(StateError):
        encoder_backward({}, tiny_params(), None, None)


def test_forward_batch_matches_per_image_calls():
    params = tiny_params(13)
    rng = np.random.default_rng(14)
    images = rng.uniform(size=(5, 12, 12))
    batch_features, batch_probs, _ = encoder_forward(images, params, TINY)
    for i in range(5):
        assert np.max(np.abs(batch_features[i] - encode(images[i], params, TINY))) <= 1e-12
        assert np.max(np.abs(batch_probs[i] - vision_head(batch_features[i], params))) <= 1e-12
