"""Photometric/geometric augmentation on raw RGB frames.

Both operations run before the preprocessing chain: shadows are a lighting
phenomenon and belong in front of the color-space conversion, and flipping
raw frames keeps the preprocessing golden tests augmentation-free.
"""

from __future__ import annotations

import numpy as np

from ..image import ImageFrame, frame_from_array

SHADOW_FACTOR_LO = 0.4
SHADOW_FACTOR_HI = 0.7


def augment_flip(frame: ImageFrame, steering: float):
    """Horizontal mirror with the steering label negated."""
    flipped = frame_from_array(frame.pixels[:, ::-1].copy(), frame.timestamp_ms)
    return flipped, -steering + 0.0  # normalize -0.0 to 0.0


def augment_shadow(frame: ImageFrame, rng: np.random.Generator) -> ImageFrame:
    """Darken one side of a random line from the top edge to the bottom edge.

    The line runs (x_top, 0) -> (x_bot, H); all RGB channels on the chosen
    side are scaled by a factor uniform in [0.4, 0.7]. Labels are unaffected.
    """
    h, w = frame.height, frame.width
    x_top = rng.uniform(0.0, w)
    x_bot = rng.uniform(0.0, w)
    left_side = bool(rng.integers(0, 2))
    factor = rng.uniform(SHADOW_FACTOR_LO, SHADOW_FACTOR_HI)

    rows = (np.arange(h) + 0.5) / h
    boundary = x_top + (x_bot - x_top) * rows  # per-row crossing point
    cols = np.arange(w) + 0.5
    mask = cols[None, :] < boundary[:, None]
    if not left_side:
        mask = ~mask

    out = frame.pixels.astype(np.float64)
    out[mask] *= factor
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return frame_from_array(out, frame.timestamp_ms)
