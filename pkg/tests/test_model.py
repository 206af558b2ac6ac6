import numpy as np
import pytest

from stageseq.encoder import EncoderConfig
from stageseq.errors import DataError
from stageseq.lstm import LossWeights
from stageseq.model import (
    KIND_BASELINE,
    KIND_PROPOSED,
    ModelConfig,
    baseline_batch_loss,
    expected_param_shapes,
    init_params,
    load_model,
    param_order,
    predict_probs,
    predict_stages,
    proposed_batch_loss,
    proposed_forward,
    save_model,
)
from stageseq.sampler import test_sequence as repeated_test_sequence

CFG = ModelConfig(
    encoder=EncoderConfig(image_height=12, image_width=12, feature_dim=8, conv_channels=(3, 4)),
    num_stages=3,
    hidden_dim=6,
)


def make(kind, seed=0):
    return init_params(kind, CFG, np.random.default_rng(seed))


def test_baseline_params_are_encoder_subset():
    baseline = make(KIND_BASELINE)
    proposed = make(KIND_PROPOSED)
    for name in param_order(KIND_BASELINE):
        assert baseline[name].shape == proposed[name].shape
    assert set(param_order(KIND_PROPOSED)) == set(proposed)
    shapes = expected_param_shapes(KIND_PROPOSED, CFG)
    for name, p in proposed.items():
        assert p.shape == shapes[name]


def test_proposed_forward_shapes_and_rows():
    params = make(KIND_PROPOSED, 1)
    rng = np.random.default_rng(2)
    sequences = rng.uniform(size=(2, 3, 12, 12))
    probs_l, probs_v, _ = proposed_forward(sequences, params, CFG)
    assert probs_l.shape == (2, 3, 3) and probs_v.shape == (2, 3, 3)
    assert np.max(np.abs(probs_l.sum(-1) - 1.0)) <= 1e-12
    assert np.max(np.abs(probs_v.sum(-1) - 1.0)) <= 1e-12


def test_losses_are_finite_and_nonnegative():
    rng = np.random.default_rng(3)
    params = make(KIND_PROPOSED, 3)
    sequences = rng.uniform(size=(2, 3, 12, 12))
    labels = np.array([[0, 1, 2], [1, 2, 0]])
    loss, grads = proposed_batch_loss(sequences, labels, params, CFG, LossWeights.ones(3))
    assert loss >= 0 and np.isfinite(loss)
    assert set(grads) == set(params)

    bparams = make(KIND_BASELINE, 4)
    images = rng.uniform(size=(5, 12, 12))
    blabels = np.array([0, 1, 2, 1, 0])
    bloss, bgrads = baseline_batch_loss(images, blabels, bparams, CFG)
    assert bloss >= 0 and np.isfinite(bloss)
    assert set(bgrads) == set(bparams)


# ---------------------------------------------------------------------------
# repeated-sequence prediction protocol


def test_prediction_equals_explicit_repeated_sequence_forward():
    """The fast path must agree with literally repeating the image K times."""
    params = make(KIND_PROPOSED, 5)
    rng = np.random.default_rng(6)
    images = rng.uniform(size=(4, 12, 12))
    fast_vision = predict_probs(images, params, CFG, KIND_PROPOSED, "vision")
    fast_lstm = predict_probs(images, params, CFG, KIND_PROPOSED, "lstm")
    for i in range(4):
        sample = repeated_test_sequence(images[i], CFG.num_stages)
        sequence = np.stack(sample.images)[None]
        probs_l, probs_v, _ = proposed_forward(sequence, params, CFG)
        assert np.max(np.abs(fast_vision[i] - probs_v[0, 0])) <= 1e-12
        assert np.max(np.abs(fast_lstm[i] - probs_l[0, 0])) <= 1e-12


def test_prediction_pure_function_of_single_image():
    params = make(KIND_PROPOSED, 7)
    image = np.random.default_rng(8).uniform(size=(12, 12))
    first = predict_probs(image[None], params, CFG, KIND_PROPOSED, "lstm")
    again = predict_probs(image[None], params, CFG, KIND_PROPOSED, "lstm")
    assert np.array_equal(first, again)


def test_predict_ties_break_to_lowest_stage():
    params = make(KIND_PROPOSED, 9)
    for name in ("vision_w", "vision_b", "head_w", "head_b"):
        params[name] = np.zeros_like(params[name])
    images = np.random.default_rng(10).uniform(size=(6, 12, 12))
    assert np.array_equal(predict_stages(images, params, CFG, KIND_PROPOSED, "vision"), np.zeros(6))
    assert np.array_equal(predict_stages(images, params, CFG, KIND_PROPOSED, "lstm"), np.zeros(6))


def test_baseline_rejects_lstm_head():
    params = make(KIND_BASELINE, 11)
    with pytest.raises(ValueError):
        predict_probs(np.zeros((1, 12, 12)), params, CFG, KIND_BASELINE, "lstm")


# ---------------------------------------------------------------------------
# model file round trip


@pytest.mark.parametrize("kind", [KIND_BASELINE, KIND_PROPOSED])
def test_save_load_round_trip(tmp_path, kind):
    params = make(kind, 12)
    path = tmp_path / "model.stsq"
    save_model(path, kind, CFG, params)
    loaded_kind, loaded_cfg, loaded = load_model(path)
    assert loaded_kind == kind
    assert loaded_cfg.encoder == CFG.encoder
    assert loaded_cfg.num_stages == CFG.num_stages
    if kind == KIND_PROPOSED:
        assert loaded_cfg.hidden_dim == CFG.hidden_dim
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name], params[name])


def test_model_file_magic_and_version(tmp_path):
    path = tmp_path / "model.stsq"
    save_model(path, KIND_BASELINE, CFG, make(KIND_BASELINE))
    assert path.read_bytes()[:4] == b"STSQ"

    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(DataError, match="not a stageseq"):
        load_model(path)


def test_model_file_truncation_detected(tmp_path):
    path = tmp_path / "model.stsq"
    save_model(path, KIND_PROPOSED, CFG, make(KIND_PROPOSED))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError, match="truncated"):
        load_model(path)


def test_model_file_trailing_bytes_detected(tmp_path):
    path = tmp_path / "model.stsq"
    save_model(path, KIND_BASELINE, CFG, make(KIND_BASELINE))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        load_model(path)


def test_save_is_byte_deterministic(tmp_path):
    params = make(KIND_PROPOSED, 13)
    a, b = tmp_path / "a.stsq", tmp_path / "b.stsq"
    save_model(a, KIND_PROPOSED, CFG, params)
    save_model(b, KIND_PROPOSED, CFG, params)
    assert a.read_bytes() == b.read_bytes()
