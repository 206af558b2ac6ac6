"""The two networks under study, assembled from the encoder and LSTM pieces.

The proposed network runs the shared encoder over every position of a K-long
image sequence, unrolls the LSTM over the feature rows, and emits per-position
stage distributions from both the LSTM head and the vision head. The baseline
network is exactly the encoder plus vision head applied to single images.

Single-image prediction follows the repeated-sequence protocol: the image is
(conceptually) repeated K times and only the first position's output of the
chosen head is read. Because the encoder is shared and the recurrence is
causal, that first output depends only on the single image, so prediction here
computes one encoder pass and one LSTM step; tests assert equality with the
explicit repeated-sequence forward pass.

Model file format (little endian throughout):

    magic   4 bytes  b"STSQ"
    version u16      1
    kind    u8       0 = baseline, 1 = proposed
    config  9 x u32  image_height, image_width, channels, feature_dim,
                     conv_channels[0], conv_channels[1], kernel_size,
                     num_stages, hidden_dim (0 for baseline)
    tensors          in PARAM_ORDER for the kind, each as
                     u8 ndim, ndim x u32 extents, float64 data (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stageseq.encoder import EncoderConfig, encoder_forward, encoder_backward, init_encoder_params
from stageseq.errors import DataError, DimensionError
from stageseq.lstm import (
    LossWeights,
    init_lstm_params,
    lstm_backward,
    lstm_head,
    lstm_head_backward,
    lstm_step_batch,
    lstm_unroll_batch,
    weighted_ce_batch,
)
from stageseq.numerics import Params

KIND_BASELINE = "baseline"
KIND_PROPOSED = "proposed"
KINDS = (KIND_BASELINE, KIND_PROPOSED)

MAGIC = b"STSQ"
FORMAT_VERSION = 1

ENCODER_PARAM_ORDER = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "dense_w", "dense_b", "vision_w", "vision_b",
)
LSTM_PARAM_ORDER = (
    "lstm_wi", "lstm_ui", "lstm_bi",
    "lstm_wf", "lstm_uf", "lstm_bf",
    "lstm_wg", "lstm_ug", "lstm_bg",
    "lstm_wo", "lstm_uo", "lstm_bo",
    "head_w", "head_b",
)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    num_stages: int
    hidden_dim: int = 64

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("num_stages must be >= 2")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")


def param_order(kind: str) -> tuple[str, ...]:
    if kind == KIND_BASELINE:
        return ENCODER_PARAM_ORDER
    if kind == KIND_PROPOSED:
        return ENCODER_PARAM_ORDER + LSTM_PARAM_ORDER
    raise ValueError(f"unknown model kind {kind!r}")


def init_params(kind: str, config: ModelConfig, rng: np.random.Generator) -> Params:
    params = init_encoder_params(config.encoder, config.num_stages, rng)
    if kind == KIND_PROPOSED:
        params.update(init_lstm_params(config.encoder.feature_dim, config.hidden_dim,
                                       config.num_stages, rng))
    elif kind != KIND_BASELINE:
        raise ValueError(f"unknown model kind {kind!r}")
    return params


# ---------------------------------------------------------------------------
# forward / backward


def proposed_forward(sequences: np.ndarray, params: Params,
                     config: ModelConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    """Both heads' outputs for a batch of sequences (B,K,H,W).

    Returns (probs_lstm (B,K,K), probs_vision (B,K,K), cache).
    """
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 4:
        raise DimensionError(f"expected (B,K,H,W) sequences, got {sequences.shape}")
    b, k = sequences.shape[:2]
    if k != config.num_stages:
        raise DimensionError(f"sequence length {k} != stage count {config.num_stages}")
    flat_images = sequences.reshape(b * k, *sequences.shape[2:])
    features, probs_vision, enc_cache = encoder_forward(flat_images, params, config.encoder)
    feature_rows = features.reshape(b, k, -1)
    hidden, lstm_cache = lstm_unroll_batch(feature_rows, params)
    probs_lstm = lstm_head(hidden, params)
    cache = {"enc": enc_cache, "lstm": lstm_cache, "hidden": hidden,
             "probs_lstm": probs_lstm, "b": b, "k": k}
    return probs_lstm, probs_vision.reshape(b, k, -1), cache


def proposed_backward(cache: dict, params: Params, dprobs_lstm: np.ndarray,
                      dprobs_vision: np.ndarray) -> Params:
    """Gradients of all parameters from upstream gradients on both heads."""
    b, k = cache["b"], cache["k"]
    head_grads, dhidden = lstm_head_backward(cache["hidden"], cache["probs_lstm"], params, dprobs_lstm)
    lstm_grads, dfeatures = lstm_backward(cache["lstm"], params, dhidden)
    enc_grads = encoder_backward(cache["enc"], params,
                                 dfeatures.reshape(b * k, -1),
                                 dprobs_vision.reshape(b * k, -1))
    return {**enc_grads, **lstm_grads, **head_grads}


def proposed_batch_loss(sequences: np.ndarray, labels: np.ndarray, params: Params,
                        config: ModelConfig, weights: LossWeights,
                        with_grads: bool = True):
    """Mean-over-batch combined loss; optionally its parameter gradients."""
    probs_lstm, probs_vision, cache = proposed_forward(sequences, params, config)
    labels = np.asarray(labels)
    alpha = np.asarray(weights.alpha, dtype=np.float64)
    beta = np.asarray(weights.beta, dtype=np.float64)
    losses_l, dprobs_l = weighted_ce_batch(probs_lstm, labels, alpha)
    losses_v, dprobs_v = weighted_ce_batch(probs_vision, labels, beta)
    b = sequences.shape[0]
    loss = float((losses_l + losses_v).mean())
    if not with_grads:
        return loss, None
    grads = proposed_backward(cache, params, dprobs_l / b, dprobs_v / b)
    return loss, grads


def baseline_forward(images: np.ndarray, params: Params,
                     config: ModelConfig) -> tuple[np.ndarray, dict]:
    """Stage distributions (N,K) for single images (N,H,W)."""
    _, probs, cache = encoder_forward(images, params, config.encoder)
    return probs, cache


def baseline_batch_loss(images: np.ndarray, labels: np.ndarray, params: Params,
                        config: ModelConfig, with_grads: bool = True):
    """Mean cross-entropy over a batch of single images; optionally gradients."""
    probs, cache = baseline_forward(images, params, config)
    labels = np.asarray(labels)
    losses, dprobs = weighted_ce_batch(probs[:, None, :], labels[:, None], np.ones(1))
    loss = float(losses.mean())
    if not with_grads:
        return loss, None
    grads = encoder_backward(cache, params, None, dprobs[:, 0, :] / images.shape[0])
    return loss, grads


# ---------------------------------------------------------------------------
# single-image prediction (repeated-sequence test protocol)


def predict_probs(images: np.ndarray, params: Params, config: ModelConfig,
                  kind: str, head: str) -> np.ndarray:
    """First-position stage distribution per single image (N,H,W) -> (N,K)."""
    if kind == KIND_BASELINE:
        if head != "vision":
            raise ValueError("the baseline network has only the vision head")
        return baseline_forward(images, params, config)[0]
    if kind != KIND_PROPOSED:
        raise ValueError(f"unknown model kind {kind!r}")
    if head not in ("vision", "lstm"):
        raise ValueError(f"unknown head {head!r}")
    features, probs_vision, _ = encoder_forward(images, params, config.encoder)
    if head == "vision":
        return probs_vision
    zeros = np.zeros((features.shape[0], config.hidden_dim))
    h, _, _ = lstm_step_batch(features, zeros, zeros, params)
    return lstm_head(h, params)


def predict_stages(images: np.ndarray, params: Params, config: ModelConfig,
                   kind: str, head: str, chunk: int = 512) -> np.ndarray:
    """Argmax prediction per image; ties break toward the lowest stage index."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty(images.shape[0], dtype=np.intp)
    for start in range(0, images.shape[0], chunk):
        probs = predict_probs(images[start : start + chunk], params, config, kind, head)
        out[start : start + chunk] = probs.argmax(axis=-1)
    return out


def predict_stages_all_heads(images: np.ndarray, params: Params, config: ModelConfig,
                             kind: str, chunk: int = 512) -> dict[str, np.ndarray]:
    """Per-head argmax predictions sharing one encoder pass per chunk."""
    images = np.asarray(images, dtype=np.float64)
    heads = ("vision", "lstm") if kind == KIND_PROPOSED else ("vision",)
    out = {head: np.empty(images.shape[0], dtype=np.intp) for head in heads}
    for start in range(0, images.shape[0], chunk):
        stop = min(start + chunk, images.shape[0])
        features, probs_vision, _ = encoder_forward(images[start:stop], params, config.encoder)
        out["vision"][start:stop] = probs_vision.argmax(axis=-1)
        if kind == KIND_PROPOSED:
            zeros = np.zeros((features.shape[0], config.hidden_dim))
            h, _, _ = lstm_step_batch(features, zeros, zeros, params)
            out["lstm"][start:stop] = lstm_head(h, params).argmax(axis=-1)
    return out


# ---------------------------------------------------------------------------
# serialization


def expected_param_shapes(kind: str, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    enc = config.encoder
    k = enc.kernel_size
    c1, c2 = enc.conv_channels
    c, s = enc.feature_dim, config.num_stages
    shapes: dict[str, tuple[int, ...]] = {
        "conv1_w": (k, k, enc.channels, c1), "conv1_b": (c1,),
        "conv2_w": (k, k, c1, c2), "conv2_b": (c2,),
        "dense_w": (c, enc.flat_dim), "dense_b": (c,),
        "vision_w": (s, c), "vision_b": (s,),
    }
    if kind == KIND_PROPOSED:
        g = config.hidden_dim
        for gate in "ifgo":
            shapes[f"lstm_w{gate}"] = (g, c)
            shapes[f"lstm_u{gate}"] = (g, g)
            shapes[f"lstm_b{gate}"] = (g,)
        shapes["head_w"] = (s, g)
        shapes["head_b"] = (s,)
    return shapes


def save_model(path, kind: str, config: ModelConfig, params: Params) -> None:
    order = param_order(kind)
    enc = config.encoder
    header = MAGIC + struct.pack("<HB", FORMAT_VERSION, KINDS.index(kind))
    header += struct.pack(
        "<9I",
        enc.image_height, enc.image_width, enc.channels, enc.feature_dim,
        enc.conv_channels[0], enc.conv_channels[1], enc.kernel_size,
        config.num_stages, config.hidden_dim if kind == KIND_PROPOSED else 0,
    )
    with open(Path(path), "wb") as f:
        f.write(header)
        for name in order:
            tensor = np.ascontiguousarray(params[name], dtype="<f8")
            f.write(struct.pack("<B", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(tensor.tobytes())


def load_model(path) -> tuple[str, ModelConfig, Params]:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()

    def take(n: int, pos: int) -> tuple[bytes, int]:
        if pos + n > len(data):
            raise DataError(f"{path}: truncated model file")
        return data[pos : pos + n], pos + n

    raw, pos = take(4, 0)
    if raw != MAGIC:
        raise DataError(f"{path}: not a stageseq model file")
    raw, pos = take(3, pos)
    version, kind_byte = struct.unpack("<HB", raw)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if kind_byte >= len(KINDS):
        raise DataError(f"{path}: unknown model kind byte {kind_byte}")
    kind = KINDS[kind_byte]
    raw, pos = take(36, pos)
    (h, w, channels, feat, c1, c2, ksize, stages, hidden) = struct.unpack("<9I", raw)
    config = ModelConfig(
        encoder=EncoderConfig(image_height=h, image_width=w, channels=channels,
                              feature_dim=feat, conv_channels=(c1, c2), kernel_size=ksize),
        num_stages=stages,
        hidden_dim=hidden if kind == KIND_PROPOSED else 64,
    )
    shapes = expected_param_shapes(kind, config)
    params: Params = {}
    for name in param_order(kind):
        raw, pos = take(1, pos)
        ndim = raw[0]
        raw, pos = take(4 * ndim, pos)
        shape = struct.unpack(f"<{ndim}I", raw)
        if shape != shapes[name]:
            raise DataError(f"{path}: tensor {name!r} has shape {shape}, expected {shapes[name]}")
        count = int(np.prod(shape)) if ndim else 1
        raw, pos = take(8 * count, pos)
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    return kind, config, params
