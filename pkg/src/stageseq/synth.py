"""Seeded synthetic stage-progression images plus dataset ingestion.

Each stage-k image is a shared sinusoidal "vessel" background with
lesion_base*k bright Gaussian blobs at seeded positions, a per-stage global
brightness drift and additive Gaussian noise. Stage identity therefore has a
discrete cue (blob count) and a continuous cue (brightness drift), so both a
per-image classifier and a progression learner have signal to work with.

Images are stored as binary PGM (P5, maxval 255) next to a `manifest.csv`
("path,stage" with a header) and a JSON sidecar echoing the generator config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stageseq.errors import DataError
from stageseq.sampler import StageSet

MANIFEST_NAME = "manifest.csv"
CONFIG_SIDECAR_NAME = "generator_config.json"

# blob rendering constants: bright cores well above the background + drift
BLOB_AMPLITUDE = 0.6
BLOB_SIGMA_FRACTION = 0.05  # blob radius as a fraction of image side
BLOB_MARGIN_FRACTION = 0.15  # keep centers away from the border
BLOB_MIN_SEPARATION_FRACTION = 0.22  # keep blobs countable as components
BACKGROUND_LEVEL = 0.15
BACKGROUND_AMPLITUDE = 0.10


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs; (config, seed) fully determines every emitted byte."""

    num_stages: int = 4
    per_stage: int = 100
    size: int = 32
    lesion_base: int = 2
    noise_sigma: float = 0.05
    drift: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("num_stages must be >= 2")
        if self.per_stage < 1:
            raise ValueError("per_stage must be >= 1")
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class LabeledDataset:
    """In-memory labeled image collection with per-stage index lists."""

    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    stage_names: tuple[str, ...]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self._by_stage = [np.flatnonzero(self.labels == k) for k in range(self.num_stages)]

    @property
    def num_stages(self) -> int:
        return len(self.stage_names)

    def __len__(self) -> int:
        return self.images.shape[0]

    def stage_indices(self, stage: int) -> np.ndarray:
        return self._by_stage[stage]

    def class_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self._by_stage])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(self.images[indices], self.labels[indices], self.stage_names)


# ---------------------------------------------------------------------------
# PGM (P5) I/O


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Write a [0,1] float image as binary PGM with maxval 255."""
    quantized = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary PGM into a [0,1] float64 array (maxval up to 255)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        # header tokens are whitespace separated; '#' starts a comment line
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if not 1 <= maxval <= 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / float(maxval)


# ---------------------------------------------------------------------------
# image synthesis


def _vessel_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """A fixed sinusoidal pattern shared by every image of the dataset."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(2.0, 4.0) * 2.0 * np.pi / size
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ridge = np.sin(freq * (np.cos(theta) * yy + np.sin(theta) * xx) + phase)
    return BACKGROUND_LEVEL + BACKGROUND_AMPLITUDE * ridge


def _blob_centers(count: int, size: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Seeded rejection sampling keeps blobs inside the frame and separated."""
    margin = size * BLOB_MARGIN_FRACTION
    min_sep = size * BLOB_MIN_SEPARATION_FRACTION
    centers: list[tuple[float, float]] = []
    rejects = 0
    while len(centers) < count:
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        if all((cy - oy) ** 2 + (cx - ox) ** 2 >= min_sep**2 for oy, ox in centers):
            centers.append((cy, cx))
            rejects = 0
        else:
            rejects += 1
            if rejects > 200:  # dense stages: relax separation rather than spin forever
                min_sep *= 0.8
                rejects = 0
    return centers


def render_images(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render the full corpus in memory; returns (images (N,H,W), labels (N,))."""
    rng = np.random.default_rng(config.seed)
    background = _vessel_background(config.size, rng)
    yy, xx = np.meshgrid(np.arange(config.size), np.arange(config.size), indexing="ij")
    sigma = config.size * BLOB_SIGMA_FRACTION
    images = []
    labels = []
    for stage in range(config.num_stages):
        for _ in range(config.per_stage):
            img = background + config.drift * stage
            for cy, cx in _blob_centers(config.lesion_base * stage, config.size, rng):
                img = img + BLOB_AMPLITUDE * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
            if config.noise_sigma > 0.0:
                img = img + rng.normal(0.0, config.noise_sigma, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(stage)
    return np.array(images), np.array(labels, dtype=np.intp)


def generate(config: SynthConfig, out_dir) -> Path:
    """Write the dataset (PGM images + manifest + config sidecar); returns manifest path."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    images, labels = render_images(config)
    width = len(str(len(images) - 1))
    rows = []
    for n, (img, stage) in enumerate(zip(images, labels)):
        rel = f"images/stage{stage}_{n:0{width}d}.pgm"
        write_pgm(out_dir / rel, img)
        rows.append((rel, int(stage)))
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "stage"])
        writer.writerows(rows)
    sidecar = {"stage_names": list(StageSet.default(config.num_stages).names)}
    sidecar.update(dataclasses.asdict(config))
    with open(out_dir / CONFIG_SIDECAR_NAME, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(manifest_path) -> LabeledDataset:
    """Load a manifest and its images; pixel values normalized to [0,1]."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    stage_names: tuple[str, ...] | None = None
    sidecar = base / CONFIG_SIDECAR_NAME
    if sidecar.is_file():
        with open(sidecar, encoding="utf-8") as f:
            names = json.load(f).get("stage_names")
        if names:
            stage_names = tuple(names)
    images = []
    labels = []
    shape: tuple[int, ...] | None = None
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["path", "stage"]:
            raise DataError(f"{manifest_path}: expected 'path,stage' header")
        for rownum, row in enumerate(reader, start=2):
            if len(row) < 2:
                raise DataError(f"{manifest_path}: row {rownum}: malformed row {row!r}")
            rel, stage_text = row[0], row[1]
            try:
                stage = int(stage_text)
            except ValueError as exc:
                raise DataError(f"{manifest_path}: row {rownum}: bad stage {stage_text!r}") from exc
            if stage < 0 or (stage_names is not None and stage >= len(stage_names)):
                upper = "" if stage_names is None else f", {len(stage_names) - 1}"
                raise DataError(f"{manifest_path}: row {rownum}: stage {stage} outside [0{upper}]")
            path = base / rel
            if not path.is_file():
                raise DataError(f"{manifest_path}: row {rownum}: missing image file {rel}")
            img = read_pgm(path)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(f"{manifest_path}: row {rownum}: image shape {img.shape} != {shape}")
            images.append(img)
            labels.append(stage)
    if not images:
        raise DataError(f"{manifest_path}: empty manifest")
    labels_arr = np.array(labels, dtype=np.intp)
    if stage_names is None:
        stage_names = StageSet.default(max(int(labels_arr.max()) + 1, 2)).names
    return LabeledDataset(np.array(images), labels_arr, stage_names)
