"""Construction of stage-ordered training sequences and test-phase sequences.

A training sample is a K-long image sequence whose labels walk the stage set
starting from a random shift: cyclically (wrapping past the last stage back to
the first) or in non-regression form (clamping at the final stage). At test
time a single image is repeated K times and only the first position's output
is read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stageseq.errors import DataError

RETINOPATHY_STAGES = ("NDR", "SDR", "PPDR", "PDR")


@dataclass(frozen=True)
class StageSet:
    """The ordered set of K disease stages."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a stage set needs at least 2 stages")
        if len(set(self.names)) != len(self.names):
            raise ValueError("stage names must be unique")

    @property
    def k(self) -> int:
        return len(self.names)

    @classmethod
    def default(cls, k: int) -> "StageSet":
        if k == 4:
            return cls(RETINOPATHY_STAGES)
        return cls(tuple(f"S{i}" for i in range(k)))


@dataclass
class SequenceSample:
    """One K-long (image, label) training sequence.

    `shift` is the starting stage index; for test-phase repeated-image
    sequences the labels are placeholders and carry no meaning.
    """

    images: list[np.ndarray]
    labels: list[int]
    shift: int
    mode: str  # "cyclic" | "nonregression"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")


def _check_shift(k: int, i: int) -> None:
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    if not 0 <= i < k:
        raise ValueError(f"shift {i} out of range [0, {k - 1}]")


def cyclic_labels(k: int, i: int) -> list[int]:
    """Stage labels [i, i+1, ...] wrapping modulo K."""
    _check_shift(k, i)
    return [(i + j) % k for j in range(k)]


def nonregression_labels(k: int, i: int) -> list[int]:
    """Stage labels [i, i+1, ...] clamped at the final stage K-1."""
    _check_shift(k, i)
    return [min(i + j, k - 1) for j in range(k)]


def labels_for(mode: str, k: int, i: int) -> list[int]:
    if mode == "cyclic":
        return cyclic_labels(k, i)
    if mode == "nonregression":
        return nonregression_labels(k, i)
    raise ValueError(f"unknown sequence mode {mode!r}")


def sample_sequence_with_shift(dataset, mode: str, shift: int, rng: np.random.Generator) -> SequenceSample:
    """Draw one sequence for a fixed shift: per position, a uniform image of that stage.

    Draws are independent across positions, so an image may repeat where a
    non-regression tail repeats its stage.
    """
    k = dataset.num_stages
    labels = labels_for(mode, k, shift)
    images = []
    for stage in labels:
        idx = dataset.stage_indices(stage)
        if len(idx) == 0:
            raise DataError(f"no images available for stage {dataset.stage_names[stage]!r}")
        images.append(dataset.images[idx[rng.integers(len(idx))]])
    return SequenceSample(images=images, labels=labels, shift=shift, mode=mode)


def sample_sequence(dataset, mode: str, k: int, rng: np.random.Generator) -> SequenceSample:
    """Draw one training sequence with the shift itself uniform in [0, K-1]."""
    if k != dataset.num_stages:
        raise DataError(f"sequence length {k} != dataset stage count {dataset.num_stages}")
    shift = int(rng.integers(k))
    return sample_sequence_with_shift(dataset, mode, shift, rng)


def test_sequence(image: np.ndarray, k: int) -> SequenceSample:
    """Repeat a single test image K times; labels are placeholders (unused)."""
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    return SequenceSample(images=[image] * k, labels=list(range(k)), shift=0, mode="cyclic")
