"""Dense/convolutional tensor math, activations, optimizer and gradient checker.

All tensors are float64 numpy arrays; every operation here is a deterministic
pure function of its inputs. Convolution is valid (no padding) cross-correlation,
pooling is 2x2 windows with stride 2. The batched conv/pool variants are the
training hot path (im2col + one matmul); the single-input forms keep the
simpler contracts used throughout the model code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stageseq.errors import DimensionError, NumericError

Params = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# activations and simple ops


def sigmoid(x) -> np.ndarray:
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        pos = 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        neg = ex / (1.0 + ex)
    return np.where(x >= 0.0, pos, neg)


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W.x + b for a single vector x."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"affine expects matrix/vector/vector, got {w.shape}, {x.shape}, {b.shape}")
    m, n = w.shape
    if x.shape[0] != n or b.shape[0] != m:
        raise DimensionError(f"affine shapes do not conform: W {w.shape}, x {x.shape}, b {b.shape}")
    return w @ x + b


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Exp-normalize along `axis` with max subtraction for stability.

    Output entries are strictly positive and sum to 1 along `axis`; adding a
    constant to all logits leaves the result unchanged.
    """
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given softmax outputs and dL/dprobs (last axis)."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(images: np.ndarray, k: int) -> np.ndarray:
    """(N,H,W,C) -> (N,Ho,Wo,k*k*C) patch matrix, channel-minor like the kernels."""
    win = sliding_window_view(images, (k, k), axis=(1, 2))  # (N,Ho,Wo,C,k,k)
    n, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n, ho, wo, -1)


def conv2d_batch_cols(images: np.ndarray, kernels: np.ndarray,
                      bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of (N,H,W,Cin) with (k,k,Cin,Cout) kernels.

    Also returns the im2col patch matrix, which :func:`conv2d_param_grads`
    reuses so the backward pass does not rebuild it.
    """
    images = np.asarray(images, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if images.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (N,H,W,Cin) and (k,k,Cin,Cout), got {images.shape}, {kernels.shape}")
    n, h, w, c_in = images.shape
    kh, kw, kc_in, c_out = kernels.shape
    if kh != kw:
        raise DimensionError(f"square kernels required, got {kernels.shape}")
    if kc_in != c_in:
        raise DimensionError(f"kernel input channels {kc_in} != image channels {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than image {h}x{w}")
    cols = _im2col(images, kh).reshape(-1, kh * kw * c_in)
    out = cols @ kernels.reshape(-1, c_out)
    out += bias
    return out.reshape(n, h - kh + 1, w - kw + 1, c_out), cols


def conv2d_batch(images: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return conv2d_batch_cols(images, kernels, bias)[0]


def conv2d(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-image form of :func:`conv2d_batch`; image is (H,W,Cin)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"conv2d image must be (H,W,Cin), got {image.shape}")
    return conv2d_batch(image[None], kernels, bias)[0]


def conv2d_param_grads(cols: np.ndarray, dout: np.ndarray, k: int,
                       c_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. kernels and bias from the cached patch matrix."""
    c_out = dout.shape[-1]
    dkernels = (cols.T @ dout.reshape(-1, c_out)).reshape(k, k, c_in, c_out)
    dbias = dout.sum(axis=(0, 1, 2))
    return dkernels, dbias


def conv2d_input_grad(dout: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the input images of a valid cross-correlation."""
    n, ho, wo, c_out = dout.shape
    k, _, c_in, _ = kernels.shape
    dimages = np.zeros((n, ho + k - 1, wo + k - 1, c_in))
    dflat = dout.reshape(-1, c_out)
    for a in range(k):
        for b in range(k):
            contrib = dflat @ kernels[a, b].T
            dimages[:, a : a + ho, b : b + wo, :] += contrib.reshape(n, ho, wo, c_in)
    return dimages


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling over (N,H,W,C); odd trailing row/column dropped.

    Also returns the (4,N,ph,pw,C) window-corner array (contiguous) that the
    backward pass compares against.
    """
    n, h, w, c = x.shape
    ph, pw = h // 2, w // 2
    if ph == 0 or pw == 0:
        raise DimensionError(f"feature map {h}x{w} too small for 2x2 pooling")
    corners = np.stack([x[:, oy : 2 * ph : 2, ox : 2 * pw : 2, :] for oy, ox in _POOL_OFFSETS])
    return np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3])), corners


def maxpool2_batch(x: np.ndarray) -> np.ndarray:
    return maxpool2_forward(x)[0]


def maxpool2_backward(dpooled: np.ndarray, corners: np.ndarray, pooled: np.ndarray,
                      x_shape: tuple) -> np.ndarray:
    """Route each window's gradient to its max; ties go to the first position."""
    ph, pw = pooled.shape[1:3]
    dx = np.zeros(x_shape)
    taken = np.zeros(pooled.shape, dtype=bool)
    for index, (oy, ox) in enumerate(_POOL_OFFSETS):
        hit = (corners[index] == pooled) & ~taken
        np.copyto(dx[:, oy : 2 * ph : 2, ox : 2 * pw : 2, :], dpooled, where=hit)
        taken |= hit
    return dx


def maxpool2(x: np.ndarray) -> np.ndarray:
    """Single-map pooling; accepts (H,W) or (H,W,C) and preserves the rank."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return maxpool2_batch(x[None, :, :, None])[0, :, :, 0]
    if x.ndim == 3:
        return maxpool2_batch(x[None])[0]
    raise DimensionError(f"maxpool2 expects (H,W) or (H,W,C), got {x.shape}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """SGD state: Nesterov momentum buffers plus the inverse-time decay counter.

    The effective rate at step t is lr0 / (1 + decay * t) with t counted from 0;
    `update_count` increments once per step, after the rate is computed.
    """

    learning_rate0: float
    decay: float = 0.0
    momentum: float = 0.0
    update_count: int = 0
    velocity: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate0 < 0.0:
            raise ValueError("learning_rate0 must be nonnegative")
        if self.decay < 0.0:
            raise ValueError("decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def for_params(cls, params: Params, learning_rate0: float, decay: float = 0.0,
                   momentum: float = 0.0) -> "OptimizerState":
        velocity = {name: np.zeros_like(p) for name, p in params.items()}
        return cls(learning_rate0, decay, momentum, 0, velocity)

    def effective_rate(self) -> float:
        return self.learning_rate0 / (1.0 + self.decay * self.update_count)


def sgd_nesterov_step(params: Params, grads: Params, state: OptimizerState) -> tuple[Params, OptimizerState]:
    """One Nesterov step, in place: v <- m*v - lr*g; p <- p + m*v - lr*g."""
    if set(grads) != set(params) or set(state.velocity) != set(params):
        raise DimensionError("params, grads and velocity must share the same tensor names")
    lr = state.effective_rate()
    m = state.momentum
    for name, p in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"shape mismatch for '{name}': p {p.shape}, g {g.shape}, v {v.shape}")
        v *= m
        v -= lr * g
        p += m * v - lr * g
    state.update_count += 1
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_gradient(loss_fn: Callable[[Params], float], params: Params, eps: float) -> Params:
    """Central-difference gradient of a scalar loss w.r.t. every parameter entry.

    `loss_fn` must be deterministic for fixed params; it is re-evaluated with
    each coordinate nudged by +/-eps (the dict is perturbed in place and
    restored). Quadratic in parameter count -- tiny models only.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    grads: Params = {}
    for name, p in params.items():
        g = np.zeros(p.size)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + eps
            lp = float(loss_fn(params))
            p.flat[i] = orig - eps
            lm = float(loss_fn(params))
            p.flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"non-finite loss while probing '{name}'[{i}]")
            g[i] = (lp - lm) / (2.0 * eps)
        grads[name] = g.reshape(p.shape)
    return grads


def gradcheck_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Symmetric per-tensor error: ||a - f|| / (||a|| + ||f||), 0 when both vanish."""
    diff = np.linalg.norm((analytic - numeric).ravel())
    denom = np.linalg.norm(analytic.ravel()) + np.linalg.norm(numeric.ravel())
    if denom == 0.0:
        return 0.0
    return float(diff / denom)
