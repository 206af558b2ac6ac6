"""Experimental protocol: balancing, splits, augmentation, training, evaluation.

Training draws fresh sequence batches (proposed) or single-image batches
(baseline) every step, with fresh rotation augmentation per image. Validation
loss is computed once per epoch on a deterministic pass over the validation
set; early stopping restores the parameters of the best-validation epoch. The
comparison experiment repeats balance -> split -> train both networks ->
evaluate over fresh seeds and reports mean +/- std accuracies per method.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, replace

import numpy as np

try:  # the GEMMs here are too small for BLAS threading to help; pin to one thread
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def single_threaded_blas():
    if threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=1, user_api="blas")

from stageseq.encoder import EncoderConfig
from stageseq.errors import DataError, NumericError, TrainingError
from stageseq.lstm import LossWeights
from stageseq.model import (
    KIND_BASELINE,
    KIND_PROPOSED,
    KINDS,
    ModelConfig,
    baseline_batch_loss,
    init_params,
    predict_stages,
    predict_stages_all_heads,
    proposed_batch_loss,
)
from stageseq.numerics import OptimizerState, Params, sgd_nesterov_step
from stageseq.sampler import sample_sequence
from stageseq.synth import LabeledDataset

SEQUENCE_MODES = ("cyclic", "nonregression")
AUGMENT_MAX_DEGREES = 5.0
EVAL_CHUNK = 256


# ---------------------------------------------------------------------------
# dataset protocol: balancing, splitting, augmentation


def balance_undersample(dataset: LabeledDataset, n_per_class: int,
                        rng: np.random.Generator) -> LabeledDataset:
    """Exactly n_per_class images per stage, drawn without replacement."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    picks = []
    for stage in range(dataset.num_stages):
        idx = dataset.stage_indices(stage)
        if len(idx) < n_per_class:
            raise DataError(
                f"class {dataset.stage_names[stage]!r}: need {n_per_class} images, "
                f"have {len(idx)} (deficit {n_per_class - len(idx)})"
            )
        picks.append(rng.choice(idx, size=n_per_class, replace=False))
    return dataset.subset(np.concatenate(picks))


def split_dataset(dataset: LabeledDataset,
                  rng: np.random.Generator) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified (train, val, test): 10% test, then 10% of the rest to val.

    Both 10% shares round down per class; the large side takes the remainder.
    """
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    train_ids, val_ids, test_ids = [], [], []
    for stage in range(dataset.num_stages):
        idx = dataset.stage_indices(stage)
        if len(idx) < 3:
            raise DataError(
                f"class {dataset.stage_names[stage]!r} has {len(idx)} images; need at least 3 to split"
            )
        perm = rng.permutation(idx)
        n_test = len(perm) // 10
        rest = perm[n_test:]
        n_val = len(rest) // 10
        test_ids.append(perm[:n_test])
        val_ids.append(rest[:n_val])
        train_ids.append(rest[n_val:])
    return (
        dataset.subset(np.concatenate(train_ids)),
        dataset.subset(np.concatenate(val_ids)),
        dataset.subset(np.concatenate(test_ids)),
    )


_ROTATE_GRID: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def rotate_bilinear_batch(images: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Rotate each (H,W) image about its center; bilinear sampling, zero fill.

    Out-of-frame samples are handled by surrounding the image with one ring of
    zeros and clamping source indices onto it, which is equivalent to masked
    zero fill without per-corner validity masks.
    """
    images = np.asarray(images, dtype=np.float64)
    m, h, w = images.shape
    theta = np.deg2rad(np.asarray(degrees, dtype=np.float64)).reshape(m, 1, 1)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if (h, w) not in _ROTATE_GRID:
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        _ROTATE_GRID[(h, w)] = (yy - cy, xx - cx)
    dy, dx = _ROTATE_GRID[(h, w)]
    src_y = cy + cos * dy - sin * dx
    src_x = cx + sin * dy + cos * dx
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    wy = src_y - y0
    wx = src_x - x0
    padded = np.zeros((m, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = images
    flat = padded.reshape(m, -1)
    y0i = np.clip(y0.astype(np.intp) + 1, 0, h + 1)
    y1i = np.clip(y0.astype(np.intp) + 2, 0, h + 1)
    x0i = np.clip(x0.astype(np.intp) + 1, 0, w + 1)
    x1i = np.clip(x0.astype(np.intp) + 2, 0, w + 1)

    def gather(ys, xs):
        idx = (ys * (w + 2) + xs).reshape(m, -1)
        return np.take_along_axis(flat, idx, axis=1).reshape(m, h, w)

    return (
        (1 - wy) * ((1 - wx) * gather(y0i, x0i) + wx * gather(y0i, x1i))
        + wy * ((1 - wx) * gather(y1i, x0i) + wx * gather(y1i, x1i))
    )


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    return rotate_bilinear_batch(np.asarray(image, dtype=np.float64)[None], np.array([degrees]))[0]


def augment_rotate(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation by an angle uniform in [-5, +5] degrees."""
    return rotate_bilinear(image, float(rng.uniform(-AUGMENT_MAX_DEGREES, AUGMENT_MAX_DEGREES)))


# ---------------------------------------------------------------------------
# configs and results


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = KIND_PROPOSED
    sequence_mode: str = "cyclic"
    steps_per_epoch: int = 100
    batch_size: int | None = None  # default: 16 proposed / 64 baseline
    max_epochs: int = 100
    patience: int = 10
    learning_rate0: float = 0.001
    decay: float = 1e-6
    momentum: float = 0.9
    alpha: tuple[float, ...] | None = None  # default: all ones
    beta: tuple[float, ...] | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.sequence_mode not in SEQUENCE_MODES:
            raise ValueError(f"unknown sequence mode {self.sequence_mode!r}")
        if self.steps_per_epoch < 1 or self.max_epochs < 1:
            raise ValueError("steps_per_epoch and max_epochs must be positive")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if self.model_kind == KIND_PROPOSED else 64

    def loss_weights(self, num_stages: int) -> LossWeights:
        alpha = self.alpha if self.alpha is not None else (1.0,) * num_stages
        beta = self.beta if self.beta is not None else (1.0,) * num_stages
        if len(alpha) != num_stages or len(beta) != num_stages:
            raise ValueError(f"loss weights must have length {num_stages}")
        return LossWeights(tuple(alpha), tuple(beta))


@dataclass
class TrainedModel:
    kind: str
    params: Params
    model_config: ModelConfig
    train_config: TrainConfig
    history: dict[str, list[float]]
    best_epoch: int
    best_val_loss: float
    update_count: int

    @property
    def num_epochs(self) -> int:
        return len(self.history["val_loss"])


@dataclass
class EvalReport:
    accuracy: float
    confusion_matrix: np.ndarray  # (K,K) ints, rows = true stage
    head_used: str
    per_class_counts: np.ndarray
    stage_names: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "head_used": self.head_used,
            "confusion_matrix": self.confusion_matrix.tolist(),
            "per_class_counts": self.per_class_counts.tolist(),
            "stage_names": list(self.stage_names),
            "total": int(self.confusion_matrix.sum()),
        }

    def format_confusion(self) -> str:
        names = list(self.stage_names)
        width = max(5, max(len(n) for n in names) + 1)
        head = " " * (width + 7) + "".join(f"{n:>{width}}" for n in names) + "  (predicted)"
        lines = [head]
        for i, name in enumerate(names):
            cells = "".join(f"{int(v):>{width}}" for v in self.confusion_matrix[i])
            lines.append(f"true {name:>{width}} {cells}")
        lines.append(f"accuracy: {self.accuracy:.4f} ({int(np.trace(self.confusion_matrix))}"
                     f"/{int(self.confusion_matrix.sum())})")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# training


def _check_all_classes(ds: LabeledDataset, role: str) -> None:
    for stage in range(ds.num_stages):
        if len(ds.stage_indices(stage)) == 0:
            raise DataError(f"{role} set has no images of stage {ds.stage_names[stage]!r}")


def _proposed_step_batch(train_set: LabeledDataset, mode: str, batch_size: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = train_set.num_stages
    h, w = train_set.images.shape[1:]
    images = np.empty((batch_size, k, h, w))
    labels = np.empty((batch_size, k), dtype=np.intp)
    for b in range(batch_size):
        sample = sample_sequence(train_set, mode, k, rng)
        images[b] = np.stack(sample.images)
        labels[b] = sample.labels
    angles = rng.uniform(-AUGMENT_MAX_DEGREES, AUGMENT_MAX_DEGREES, size=batch_size * k)
    images = rotate_bilinear_batch(images.reshape(-1, h, w), angles).reshape(batch_size, k, h, w)
    return images, labels


def _baseline_step_batch(train_set: LabeledDataset, batch_size: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(len(train_set), size=batch_size)
    angles = rng.uniform(-AUGMENT_MAX_DEGREES, AUGMENT_MAX_DEGREES, size=batch_size)
    return rotate_bilinear_batch(train_set.images[idx], angles), train_set.labels[idx]


def _validation_pack(val_set: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic zero-shift cyclic sequences covering every validation image.

    Sequence t takes the (t mod count)-th image of each stage class, so the
    number of sequences is the largest class count.
    """
    k = val_set.num_stages
    h, w = val_set.images.shape[1:]
    length = max(len(val_set.stage_indices(s)) for s in range(k))
    images = np.empty((length, k, h, w))
    for stage in range(k):
        ids = val_set.stage_indices(stage)
        picks = ids[np.arange(length) % len(ids)]
        images[:, stage] = val_set.images[picks]
    labels = np.tile(np.arange(k, dtype=np.intp), (length, 1))
    return images, labels


def _mean_loss_chunked(loss_fn, inputs: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    total, count = 0.0, 0
    for start in range(0, inputs.shape[0], chunk):
        stop = min(start + chunk, inputs.shape[0])
        loss, _ = loss_fn(inputs[start:stop], labels[start:stop])
        total += loss * (stop - start)
        count += stop - start
    return total / count


def train(config: TrainConfig, train_set: LabeledDataset, val_set: LabeledDataset,
          progress=None) -> TrainedModel:
    """Train one network; returns the parameters of the best-validation epoch.

    `progress`, when given, is called as progress(epoch_index, stats_dict)
    after each epoch.
    """
    if train_set.stage_names != val_set.stage_names:
        raise DataError("train and validation sets disagree on stage names")
    _check_all_classes(train_set, "train")
    _check_all_classes(val_set, "validation")
    k = train_set.num_stages
    model_config = ModelConfig(encoder=config.encoder, num_stages=k, hidden_dim=config.hidden_dim)
    weights = config.loss_weights(k)
    kind = config.model_kind
    batch_size = config.resolved_batch_size

    rng = np.random.default_rng(config.seed)
    params = init_params(kind, model_config, rng)
    opt = OptimizerState.for_params(params, config.learning_rate0, config.decay, config.momentum)

    if kind == KIND_PROPOSED:
        val_images, val_labels = _validation_pack(val_set)

        def val_loss_fn():
            return _mean_loss_chunked(
                lambda im, lb: proposed_batch_loss(im, lb, params, model_config, weights, with_grads=False),
                val_images, val_labels)
    else:
        def val_loss_fn():
            return _mean_loss_chunked(
                lambda im, lb: baseline_batch_loss(im, lb, params, model_config, with_grads=False),
                val_set.images, val_set.labels, chunk=EVAL_CHUNK)

    heads = ("vision", "lstm") if kind == KIND_PROPOSED else ("vision",)
    history: dict[str, list[float]] = {"train_loss": [], "val_loss": []}
    for head in heads:
        for role in ("train", "val"):
            history[f"{role}_acc_{head}"] = []

    best_val = math.inf
    best_params: Params = {name: p.copy() for name, p in params.items()}
    best_epoch = -1
    epochs_since_best = 0

    with single_threaded_blas():
        for epoch in range(config.max_epochs):
            epoch_loss = 0.0
            for step in range(config.steps_per_epoch):
                if kind == KIND_PROPOSED:
                    images, labels = _proposed_step_batch(train_set, config.sequence_mode, batch_size, rng)
                    loss, grads = proposed_batch_loss(images, labels, params, model_config, weights)
                else:
                    images, labels = _baseline_step_batch(train_set, batch_size, rng)
                    loss, grads = baseline_batch_loss(images, labels, params, model_config)
                if not math.isfinite(loss):
                    raise TrainingError(f"training loss diverged at epoch {epoch}, step {step}", epoch, step)
                sgd_nesterov_step(params, grads, opt)
                epoch_loss += loss
            val_loss = val_loss_fn()
            if not math.isfinite(val_loss):
                raise TrainingError(f"validation loss diverged at epoch {epoch}", epoch, -1)

            stats = {"train_loss": epoch_loss / config.steps_per_epoch, "val_loss": val_loss}
            for role, ds in (("train", train_set), ("val", val_set)):
                preds = predict_stages_all_heads(ds.images, params, model_config, kind,
                                                 chunk=EVAL_CHUNK)
                for head in heads:
                    stats[f"{role}_acc_{head}"] = float((preds[head] == ds.labels).mean())
            for key, value in stats.items():
                history[key].append(value)
            if progress is not None:
                progress(epoch, stats)

            if val_loss < best_val:
                best_val = val_loss
                best_params = {name: p.copy() for name, p in params.items()}
                best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience:
                    break

    return TrainedModel(
        kind=kind,
        params=best_params,
        model_config=model_config,
        train_config=config,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        update_count=opt.update_count,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: TrainedModel, testset: LabeledDataset, head: str) -> EvalReport:
    """Accuracy and confusion matrix under the repeated-sequence test protocol."""
    if head not in ("vision", "lstm"):
        raise ValueError(f"unknown head {head!r}")
    if model.kind == KIND_BASELINE and head == "lstm":
        raise ValueError("the baseline model has no LSTM head; use --head vision")
    k = model.model_config.num_stages
    if testset.num_stages != k:
        raise DataError(f"test set has {testset.num_stages} stages, model expects {k}")
    preds = predict_stages(testset.images, model.params, model.model_config, model.kind, head,
                           chunk=EVAL_CHUNK)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (testset.labels, preds), 1)
    accuracy = float(np.trace(confusion) / len(testset))
    return EvalReport(
        accuracy=accuracy,
        confusion_matrix=confusion,
        head_used=head,
        per_class_counts=confusion.sum(axis=1),
        stage_names=testset.stage_names,
    )


# ---------------------------------------------------------------------------
# repeated comparison experiment


@dataclass
class MethodRow:
    method: str
    model_kind: str
    head: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else math.nan


@dataclass
class CompareResult:
    repeats: int
    seed: int
    steps_per_epoch: int
    stage_names: tuple[str, ...]
    blocks: list[tuple[str, list[MethodRow]]]  # (sequence_mode, rows)
    failures: list[dict]

    @property
    def num_successes(self) -> int:
        return self.repeats - len(self.failures)

    def to_json_dict(self) -> dict:
        return {
            "repeats": self.repeats,
            "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
            "stage_names": list(self.stage_names),
            "blocks": [
                {
                    "sequence_mode": mode,
                    "rows": [
                        {
                            "method": row.method,
                            "model_kind": row.model_kind,
                            "head": row.head,
                            "accuracies": row.accuracies,
                            "mean": row.mean,
                            "std": row.std,
                        }
                        for row in rows
                    ],
                }
                for mode, rows in self.blocks
            ],
            "failures": self.failures,
        }

    def format_table(self) -> str:
        lines = []
        for mode, rows in self.blocks:
            lines.append(f"stage sequences: {mode} | repeats={self.num_successes}"
                         f" steps/epoch={self.steps_per_epoch} seed={self.seed}")
            name_width = max(len(r.method) for r in rows) + 2
            lines.append(f"{'method':<{name_width}}accuracy")
            lines.append("-" * (name_width + 16))
            for row in rows:
                lines.append(f"{row.method:<{name_width}}{100 * row.mean:.2f} +/- {100 * row.std:.2f} %")
            lines.append("")
        if self.failures:
            for failure in self.failures:
                lines.append(f"repeat {failure['repeat']} FAILED: {failure['error']}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"


def _run_compare_repeat(job) -> dict:
    data, base_config, modes, n_per_class, child_ss = job
    rng_ss, baseline_ss, proposed_ss = child_ss.spawn(3)
    rng = np.random.default_rng(rng_ss)
    balanced = balance_undersample(data, n_per_class, rng)
    train_set, val_set, test_set = split_dataset(balanced, rng)
    baseline_config = replace(base_config, model_kind=KIND_BASELINE,
                              seed=int(baseline_ss.generate_state(1)[0]))
    baseline_model = train(baseline_config, train_set, val_set)
    out = {"baseline": evaluate(baseline_model, test_set, "vision").accuracy, "modes": {}}
    for mode, mode_ss in zip(modes, proposed_ss.spawn(len(modes))):
        proposed_config = replace(base_config, model_kind=KIND_PROPOSED, sequence_mode=mode,
                                  seed=int(mode_ss.generate_state(1)[0]))
        model = train(proposed_config, train_set, val_set)
        out["modes"][mode] = {
            "vision": evaluate(model, test_set, "vision").accuracy,
            "lstm": evaluate(model, test_set, "lstm").accuracy,
        }
    return out


def compare_experiment(data: LabeledDataset, base_config: TrainConfig, repeats: int, seed: int,
                       n_per_class: int | None = None, modes=("cyclic",),
                       workers: int = 1) -> CompareResult:
    """Train baseline and proposed on identical fresh splits, `repeats` times.

    The baseline is sequence-mode independent, so it is trained once per
    repeat and its row is shared by every requested mode block. Per-repeat
    training failures are recorded and skipped; surviving repeats make up the
    reported statistics.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for mode in modes:
        if mode not in SEQUENCE_MODES:
            raise ValueError(f"unknown sequence mode {mode!r}")
    if n_per_class is None:
        n_per_class = int(data.class_counts().min())
    jobs = [(data, base_config, tuple(modes), n_per_class, child)
            for child in np.random.SeedSequence(seed).spawn(repeats)]
    results: list[dict | None] = [None] * repeats
    failures: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_compare_repeat, job) for job in jobs]
            for idx, future in enumerate(futures):
                try:
                    results[idx] = future.result()
                except (TrainingError, NumericError, DataError) as exc:
                    failures.append({"repeat": idx, "error": str(exc)})
    else:
        for idx, job in enumerate(jobs):
            try:
                results[idx] = _run_compare_repeat(job)
            except (TrainingError, NumericError, DataError) as exc:
                failures.append({"repeat": idx, "error": str(exc)})

    ok = [r for r in results if r is not None]
    blocks = []
    for mode in modes:
        rows = [
            MethodRow("baseline", KIND_BASELINE, "vision", [r["baseline"] for r in ok]),
            MethodRow("proposed (vision output)", KIND_PROPOSED, "vision",
                      [r["modes"][mode]["vision"] for r in ok]),
            MethodRow("proposed (lstm output)", KIND_PROPOSED, "lstm",
                      [r["modes"][mode]["lstm"] for r in ok]),
        ]
        blocks.append((mode, rows))
    return CompareResult(
        repeats=repeats,
        seed=seed,
        steps_per_epoch=base_config.steps_per_epoch,
        stage_names=data.stage_names,
        blocks=blocks,
        failures=failures,
    )
