"""Shared convolutional feature extractor and the per-image classifier head.

The trunk is conv->relu->pool twice, then flatten->dense->relu, producing a
feature vector of length `feature_dim`. The vision head is a softmax
classifier over stages applied directly to that feature vector; the same
trunk+head is also the entire baseline network. Applied to a sequence, the
encoder uses identical parameters at every position, so repeated images
produce repeated feature rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stageseq.errors import DimensionError, StateError
from stageseq.numerics import (
    Params,
    conv2d_batch_cols,
    conv2d_input_grad,
    conv2d_param_grads,
    maxpool2_backward,
    maxpool2_forward,
    softmax,
    softmax_backward,
)


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 1
    feature_dim: int = 64
    conv_channels: tuple[int, int] = (8, 16)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if len(self.conv_channels) != 2:
            raise ValueError("exactly two conv blocks are supported")
        if min(self.image_height, self.image_width, self.feature_dim, self.kernel_size) < 1:
            raise ValueError("encoder dimensions must be positive")
        if min(self.conv_channels) < 1 or self.channels < 1:
            raise ValueError("channel counts must be positive")
        self.stage_dims()  # raises if the image cannot survive two conv+pool blocks

    def stage_dims(self) -> list[tuple[int, int]]:
        """Spatial dims after each of conv1, pool1, conv2, pool2."""
        k = self.kernel_size
        h, w = self.image_height, self.image_width
        dims = []
        for _ in range(2):
            h, w = h - k + 1, w - k + 1
            if h < 2 or w < 2:
                raise ValueError(
                    f"image {self.image_height}x{self.image_width} too small for two "
                    f"conv(k={k})+pool blocks"
                )
            dims.append((h, w))
            h, w = h // 2, w // 2
            dims.append((h, w))
        return dims

    @property
    def flat_dim(self) -> int:
        h, w = self.stage_dims()[-1]
        return h * w * self.conv_channels[1]


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_encoder_params(config: EncoderConfig, num_stages: int, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases; includes the vision head."""
    if config.feature_dim < num_stages:
        raise ValueError(f"feature_dim {config.feature_dim} must be >= stage count {num_stages}")
    k = config.kernel_size
    c_in, (c1, c2) = config.channels, config.conv_channels
    flat = config.flat_dim
    c = config.feature_dim
    return {
        "conv1_w": glorot_uniform((k, k, c_in, c1), k * k * c_in, k * k * c1, rng),
        "conv1_b": np.zeros(c1),
        "conv2_w": glorot_uniform((k, k, c1, c2), k * k * c1, k * k * c2, rng),
        "conv2_b": np.zeros(c2),
        "dense_w": glorot_uniform((c, flat), flat, c, rng),
        "dense_b": np.zeros(c),
        "vision_w": glorot_uniform((num_stages, c), c, num_stages, rng),
        "vision_b": np.zeros(num_stages),
    }


def _as_nhwc(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DimensionError(f"expected (N,H,W) or (N,H,W,C) images, got {images.shape}")
    if images.shape[1:] != (config.image_height, config.image_width, config.channels):
        raise DimensionError(
            f"image batch {images.shape[1:]} does not match configured "
            f"{(config.image_height, config.image_width, config.channels)}"
        )
    return images


def encoder_forward(images: np.ndarray, params: Params, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    """Features and vision-head probabilities for a batch of images.

    Returns (features (N,C), probs (N,K), cache); the cache carries the
    intermediates :func:`encoder_backward` needs.
    """
    x = _as_nhwc(images, config)
    # relu applied in place on the conv output; (act > 0) recovers the mask
    act1, cols1 = conv2d_batch_cols(x, params["conv1_w"], params["conv1_b"])
    np.maximum(act1, 0.0, out=act1)
    pool1, corners1 = maxpool2_forward(act1)
    act2, cols2 = conv2d_batch_cols(pool1, params["conv2_w"], params["conv2_b"])
    np.maximum(act2, 0.0, out=act2)
    pool2, corners2 = maxpool2_forward(act2)
    flat = pool2.reshape(x.shape[0], -1)
    features = flat @ params["dense_w"].T + params["dense_b"]
    np.maximum(features, 0.0, out=features)
    probs = softmax(features @ params["vision_w"].T + params["vision_b"], axis=-1)
    cache = {
        "cols1": cols1,
        "act1_shape": act1.shape,
        "act1_mask": act1 > 0.0,
        "corners1": corners1,
        "pool1": pool1,
        "cols2": cols2,
        "act2_shape": act2.shape,
        "act2_mask": act2 > 0.0,
        "corners2": corners2,
        "pool2": pool2,
        "flat": flat,
        "features": features,
        "probs": probs,
    }
    return features, probs, cache


def encode_batch(images: np.ndarray, params: Params, config: EncoderConfig) -> np.ndarray:
    return encoder_forward(images, params, config)[0]


def encode(image: np.ndarray, params: Params, config: EncoderConfig) -> np.ndarray:
    """Feature vector (length C) for one image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise DimensionError(f"expected one (H,W) or (H,W,C) image, got {image.shape}")
    return encode_batch(image[None], params, config)[0]


def encode_sequence(images, params: Params, config: EncoderConfig) -> np.ndarray:
    """Per-position features (K,C); the same parameters are used at every position."""
    return encode_batch(np.stack([np.asarray(im, dtype=np.float64) for im in images]), params, config)


def vision_head(z: np.ndarray, params: Params) -> np.ndarray:
    """Softmax stage distribution from a feature vector (or batch of rows)."""
    z = np.asarray(z, dtype=np.float64)
    w, b = params["vision_w"], params["vision_b"]
    if z.shape[-1] != w.shape[1]:
        raise DimensionError(f"feature length {z.shape[-1]} != head input {w.shape[1]}")
    return softmax(z @ w.T + b, axis=-1)


def encoder_backward(cache: dict, params: Params, dfeatures: np.ndarray | None,
                     dprobs: np.ndarray | None) -> Params:
    """Parameter gradients from upstream gradients on features and head outputs.

    `dfeatures` is dL/d(feature rows) coming from any consumer of z (the LSTM
    path); `dprobs` is dL/d(vision-head probability rows). Either may be None.
    Gradients for the shared weights accumulate over all rows in the batch.
    """
    for key in ("cols1", "corners1", "pool1", "cols2", "corners2", "pool2",
                "flat", "features", "probs"):
        if key not in cache:
            raise StateError(f"encoder cache is missing {key!r}; run encoder_forward first")
    features = cache["features"]
    dz = np.zeros_like(features) if dfeatures is None else np.array(dfeatures, dtype=np.float64)
    if dz.shape != features.shape:
        raise DimensionError(f"dfeatures shape {dz.shape} != features {features.shape}")
    grads: Params = {}
    if dprobs is not None:
        probs = cache["probs"]
        if dprobs.shape != probs.shape:
            raise DimensionError(f"dprobs shape {dprobs.shape} != probs {probs.shape}")
        dlogits = softmax_backward(probs, dprobs)
        grads["vision_w"] = dlogits.T @ features
        grads["vision_b"] = dlogits.sum(axis=0)
        dz = dz + dlogits @ params["vision_w"]
    else:
        grads["vision_w"] = np.zeros_like(params["vision_w"])
        grads["vision_b"] = np.zeros_like(params["vision_b"])

    ddense_pre = dz * (cache["features"] > 0.0)
    grads["dense_w"] = ddense_pre.T @ cache["flat"]
    grads["dense_b"] = ddense_pre.sum(axis=0)
    dflat = ddense_pre @ params["dense_w"]

    dpool2 = dflat.reshape(cache["pool2"].shape)
    dact2 = maxpool2_backward(dpool2, cache["corners2"], cache["pool2"], cache["act2_shape"])
    dact2 *= cache["act2_mask"]
    k2, _, c2_in, _ = params["conv2_w"].shape
    grads["conv2_w"], grads["conv2_b"] = conv2d_param_grads(cache["cols2"], dact2, k2, c2_in)

    dpool1 = conv2d_input_grad(dact2, params["conv2_w"])
    dact1 = maxpool2_backward(dpool1, cache["corners1"], cache["pool1"], cache["act1_shape"])
    dact1 *= cache["act1_mask"]
    k1, _, c1_in, _ = params["conv1_w"].shape
    grads["conv1_w"], grads["conv1_b"] = conv2d_param_grads(cache["cols1"], dact1, k1, c1_in)
    return grads
