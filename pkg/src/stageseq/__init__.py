"""Stage-sequence learning for staged image classification.

A compact CNN encoder shared across all positions of a stage-ordered image
sequence feeds an unrolled LSTM; both an LSTM head and an auxiliary per-image
vision head emit per-stage class distributions. Training, evaluation and the
baseline comparison protocol live in :mod:`stageseq.pipeline`; the synthetic
stage-progression dataset generator in :mod:`stageseq.synth`.
"""

from stageseq.errors import (
    DataError,
    DimensionError,
    NumericError,
    StageSeqError,
    StateError,
    TrainingError,
)

__all__ = [
    "StageSeqError",
    "DimensionError",
    "DataError",
    "StateError",
    "NumericError",
    "TrainingError",
]

__version__ = "0.1.0"
