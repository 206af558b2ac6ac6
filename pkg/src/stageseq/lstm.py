"""Stage-progression LSTM: recurrence, per-stage head, losses, and BPTT.

The recurrence is the standard forget-gate LSTM,

    i = sig(Wi z + Ui h + bi)      f = sig(Wf z + Uf h + bf)
    g = tanh(Wg z + Ug h + bg)     o = sig(Wo z + Uo h + bo)
    c' = f*c + i*g                 h' = o * tanh(c')

started from h = c = 0 and applied at every position of the K-long feature
sequence, so the hidden state for the first position exists too. The head is
one softmax classifier applied independently to each hidden state. Losses are
per-position cross entropies under nonnegative per-stage weights, with the
LSTM-head and vision-head sums added together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stageseq.encoder import glorot_uniform
from stageseq.errors import DimensionError, StateError
from stageseq.numerics import Params, sigmoid, softmax, softmax_backward

PROB_CLAMP = 1e-12  # probabilities are clamped here before log

GATES = ("i", "f", "g", "o")


@dataclass
class LstmState:
    """Hidden and cell state; |h| < 1 elementwise by construction."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


def init_lstm_params(feature_dim: int, hidden_dim: int, num_stages: int,
                     rng: np.random.Generator) -> Params:
    """Glorot-uniform gate weights; forget bias 1.0, everything else 0."""
    params: Params = {}
    for gate in GATES:
        params[f"lstm_w{gate}"] = glorot_uniform((hidden_dim, feature_dim), feature_dim, hidden_dim, rng)
        params[f"lstm_u{gate}"] = glorot_uniform((hidden_dim, hidden_dim), hidden_dim, hidden_dim, rng)
        params[f"lstm_b{gate}"] = np.full(hidden_dim, 1.0) if gate == "f" else np.zeros(hidden_dim)
    params["head_w"] = glorot_uniform((num_stages, hidden_dim), hidden_dim, num_stages, rng)
    params["head_b"] = np.zeros(num_stages)
    return params


def _gate_preacts(z: np.ndarray, h: np.ndarray, params: Params, gate: str) -> np.ndarray:
    return z @ params[f"lstm_w{gate}"].T + h @ params[f"lstm_u{gate}"].T + params[f"lstm_b{gate}"]


def lstm_step_batch(z: np.ndarray, h: np.ndarray, c: np.ndarray,
                    params: Params) -> tuple[np.ndarray, np.ndarray, dict]:
    """One recurrence step over a batch: (B,C),(B,G),(B,G) -> (h',c',cache)."""
    if z.shape[-1] != params["lstm_wi"].shape[1]:
        raise DimensionError(f"feature width {z.shape[-1]} != LSTM input width {params['lstm_wi'].shape[1]}")
    if h.shape[-1] != params["lstm_ui"].shape[1] or h.shape != c.shape:
        raise DimensionError(f"state shapes {h.shape}/{c.shape} do not match LSTM width")
    i = sigmoid(_gate_preacts(z, h, params, "i"))
    f = sigmoid(_gate_preacts(z, h, params, "f"))
    g = np.tanh(_gate_preacts(z, h, params, "g"))
    o = sigmoid(_gate_preacts(z, h, params, "o"))
    c_new = f * c + i * g
    t = np.tanh(c_new)
    h_new = o * t
    return h_new, c_new, {"z": z, "h_prev": h, "c_prev": c, "i": i, "f": f, "g": g, "o": o, "t": t}


def lstm_step(z: np.ndarray, prev: LstmState, params: Params) -> LstmState:
    """Single-vector form of the recurrence step."""
    z = np.asarray(z, dtype=np.float64)
    h, c, _ = lstm_step_batch(z[None], prev.h[None], prev.c[None], params)
    return LstmState(h[0], c[0])


def lstm_unroll_batch(features: np.ndarray, params: Params) -> tuple[np.ndarray, dict]:
    """Run the recurrence over (B,K,C) from zero state; hidden rows (B,K,G)."""
    b, k, _ = features.shape
    g_dim = params["lstm_ui"].shape[1]
    h = np.zeros((b, g_dim))
    c = np.zeros((b, g_dim))
    hidden = np.empty((b, k, g_dim))
    steps = []
    for pos in range(k):
        h, c, step_cache = lstm_step_batch(features[:, pos, :], h, c, params)
        hidden[:, pos, :] = h
        steps.append(step_cache)
    return hidden, {"steps": steps, "features_shape": features.shape}


def lstm_unroll(features: np.ndarray, params: Params) -> np.ndarray:
    """Hidden-state sequence (K,G) for one feature sequence (K,C)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError(f"expected a (K,C) feature sequence, got {features.shape}")
    return lstm_unroll_batch(features[None], params)[0][0]


def lstm_head(hidden: np.ndarray, params: Params) -> np.ndarray:
    """Per-position softmax over stages; rows are computed independently."""
    hidden = np.asarray(hidden, dtype=np.float64)
    w, b = params["head_w"], params["head_b"]
    if hidden.shape[-1] != w.shape[1]:
        raise DimensionError(f"hidden width {hidden.shape[-1]} != head input {w.shape[1]}")
    return softmax(hidden @ w.T + b, axis=-1)


def lstm_head_backward(hidden: np.ndarray, probs: np.ndarray, params: Params,
                       dprobs: np.ndarray) -> tuple[Params, np.ndarray]:
    """Head gradients plus dL/dhidden for batched (B,K,·) rows."""
    dlogits = softmax_backward(probs, dprobs)
    grads = {
        "head_w": np.einsum("bkj,bkg->jg", dlogits, hidden),
        "head_b": dlogits.sum(axis=(0, 1)),
    }
    return grads, dlogits @ params["head_w"]


def lstm_backward(cache: dict, params: Params, dhidden: np.ndarray) -> tuple[Params, np.ndarray]:
    """Backpropagation through time.

    `dhidden` is dL/d(hidden rows) of shape (B,K,G). Returns the parameter
    gradients and dL/d(feature rows) of shape (B,K,C) for the encoder.
    """
    if "steps" not in cache:
        raise StateError("LSTM cache is missing step intermediates; run lstm_unroll_batch first")
    steps = cache["steps"]
    b, k, _ = cache["features_shape"]
    if dhidden.shape[:2] != (b, k):
        raise DimensionError(f"dhidden leading dims {dhidden.shape[:2]} != cached ({b}, {k})")
    grads: Params = {}
    for gate in GATES:
        for part in ("w", "u", "b"):
            name = f"lstm_{part}{gate}"
            grads[name] = np.zeros_like(params[name])
    dfeatures = np.empty((b, k, params["lstm_wi"].shape[1]))
    dh_next = np.zeros((b, params["lstm_ui"].shape[1]))
    dc_next = np.zeros_like(dh_next)
    for pos in reversed(range(k)):
        s = steps[pos]
        dh = dhidden[:, pos, :] + dh_next
        dc = dc_next + dh * s["o"] * (1.0 - s["t"] ** 2)
        dpre = {
            "o": dh * s["t"] * s["o"] * (1.0 - s["o"]),
            "f": dc * s["c_prev"] * s["f"] * (1.0 - s["f"]),
            "i": dc * s["g"] * s["i"] * (1.0 - s["i"]),
            "g": dc * s["i"] * (1.0 - s["g"] ** 2),
        }
        dz = None
        dh_next = None
        for gate in GATES:
            d = dpre[gate]
            grads[f"lstm_w{gate}"] += d.T @ s["z"]
            grads[f"lstm_u{gate}"] += d.T @ s["h_prev"]
            grads[f"lstm_b{gate}"] += d.sum(axis=0)
            dz = d @ params[f"lstm_w{gate}"] if dz is None else dz + d @ params[f"lstm_w{gate}"]
            dh_next = (d @ params[f"lstm_u{gate}"] if dh_next is None
                       else dh_next + d @ params[f"lstm_u{gate}"])
        dfeatures[:, pos, :] = dz
        dc_next = dc * s["f"]
    return grads, dfeatures


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    """Per-stage weights for the LSTM-head (alpha) and vision-head (beta) losses."""

    alpha: tuple[float, ...]
    beta: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != len(self.beta):
            raise ValueError("alpha and beta must have equal length")
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ValueError("loss weights must be nonnegative")
        if not any(self.alpha) and not any(self.beta):
            raise ValueError("loss weights must not all be zero")

    @classmethod
    def ones(cls, num_stages: int) -> "LossWeights":
        return cls((1.0,) * num_stages, (1.0,) * num_stages)


def cross_entropy(prob_row: np.ndarray, true_stage: int) -> float:
    """-log p[true_stage], with p clamped at 1e-12 before the log."""
    prob_row = np.asarray(prob_row, dtype=np.float64)
    if not 0 <= true_stage < prob_row.shape[-1]:
        raise ValueError(f"label {true_stage} outside [0, {prob_row.shape[-1] - 1}]")
    return float(-np.log(max(prob_row[true_stage], PROB_CLAMP)))


def sequence_loss(probs: np.ndarray, labels, weights) -> float:
    """Weighted sum over positions of per-position cross entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    labels = list(labels)
    if probs.shape[0] != len(labels) or probs.shape[0] != weights.shape[0]:
        raise DimensionError(
            f"positions disagree: probs {probs.shape[0]}, labels {len(labels)}, weights {weights.shape[0]}"
        )
    return float(sum(w * cross_entropy(row, y) for row, y, w in zip(probs, labels, weights)))


def total_loss(probs_lstm: np.ndarray, probs_vision: np.ndarray, labels, weights: LossWeights) -> float:
    """Combined training loss: alpha-weighted LSTM CE plus beta-weighted vision CE."""
    return sequence_loss(probs_lstm, labels, weights.alpha) + sequence_loss(probs_vision, labels, weights.beta)


def weighted_ce_batch(probs: np.ndarray, labels: np.ndarray,
                      weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted CE over (B,K,K) rows, plus dL/dprobs (unscaled).

    Returns losses (B,) where losses[b] = sum_k weights[k] * CE(probs[b,k], labels[b,k]).
    """
    labels = np.asarray(labels)
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    p_clamped = np.maximum(p_true, PROB_CLAMP)
    losses = -(np.log(p_clamped) * weights).sum(axis=-1)
    dvals = np.where(p_true >= PROB_CLAMP, -weights / p_clamped, 0.0)
    dprobs = np.zeros_like(probs)
    np.put_along_axis(dprobs, labels[..., None], dvals[..., None], axis=-1)
    return losses, dprobs
