"""Seeded in-memory batch generation: draw, augment, preprocess, never store.

The stream of batches is a pure function of (records, hyperparameters,
seed): one RNG is consumed in a fixed order per sample (index draw, flip
coin, shadow coin, shadow geometry), so equal seeds give identical batch
sequences bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..datalog import Dataset, DriveRecord
from ..image import ImageFrame
from ..perception import PreprocessConfig, preprocess
from .augment import augment_flip, augment_shadow


class EmptyDatasetError(ValueError):
    """No records to sample from."""


@dataclass
class Hyperparams:
    epochs: int = 10
    learning_rate: float = 1e-4
    samples_per_epoch: int = 20_000
    batch_size: int = 64
    train_fraction: float = 0.8
    flip_prob: float = 0.5
    shadow_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.samples_per_epoch <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, samples_per_epoch and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        for name in ("flip_prob", "shadow_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def batches_per_epoch(h: Hyperparams) -> int:
    return math.ceil(h.samples_per_epoch / h.batch_size)


class FrameCache:
    """Lazily decodes and holds a dataset's raw frames in memory."""

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self._cache: dict[str, ImageFrame] = {}

    def get(self, record: DriveRecord) -> ImageFrame:
        frame = self._cache.get(record.frame_path)
        if frame is None:
            frame = self._dataset.frame(record)
            self._cache[record.frame_path] = frame
        return frame


def batch_generator(
    frames: FrameCache,
    records: list[DriveRecord],
    h: Hyperparams,
    seed: int | None = None,
    preprocess_cfg: PreprocessConfig | None = None,
):
    """Endless stream of (tensor batch, label batch) float32 arrays.

    Samples are drawn uniformly with replacement; each epoch spans exactly
    samples_per_epoch samples split into ceil(samples_per_epoch/batch_size)
    batches, the last one short when the division is uneven.
    """
    if not records:
        raise EmptyDatasetError("training set is empty")
    rng = np.random.default_rng(h.seed if seed is None else seed)
    cfg = preprocess_cfg or PreprocessConfig()
    n = len(records)

    def one_sample():
        record = records[int(rng.integers(0, n))]
        frame = frames.get(record)
        steering = record.steering
        if rng.random() < h.flip_prob:
            frame, steering = augment_flip(frame, steering)
        if rng.random() < h.shadow_prob:
            frame = augment_shadow(frame, rng)
        return preprocess(frame, cfg).planes, steering

    while True:
        remaining = h.samples_per_epoch
        while remaining > 0:
            size = min(h.batch_size, remaining)
            remaining -= size
            xs = np.empty((size, 3, cfg.out_height, cfg.out_width), dtype=np.float32)
            ys = np.empty((size,), dtype=np.float32)
            for i in range(size):
                xs[i], ys[i] = one_sample()
            yield xs, ys
