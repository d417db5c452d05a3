"""Raw camera frames and their PNG on-disk form.

An ImageFrame is always interleaved 8-bit RGB, row-major. The pixel buffer
is held as a (height, width, 3) uint8 array; wire and file formats flatten
it with ``tobytes()``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


class FrameError(ValueError):
    """Pixel buffer does not match the declared geometry."""


@dataclass
class ImageFrame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    timestamp_ms: int = 0

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise FrameError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes, timestamp_ms: int = 0) -> "ImageFrame":
        if len(data) != width * height * 3:
            raise FrameError(
                f"pixel buffer of {len(data)} bytes, expected {width * height * 3}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
        return cls(width, height, arr.copy(), timestamp_ms)

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def copy(self) -> "ImageFrame":
        return ImageFrame(self.width, self.height, self.pixels.copy(), self.timestamp_ms)


def frame_from_array(arr: np.ndarray, timestamp_ms: int = 0) -> ImageFrame:
    """Wrap a (H, W, 3) uint8 array without copying."""
    h, w = arr.shape[:2]
    return ImageFrame(w, h, arr, timestamp_ms)


def save_png(frame: ImageFrame, path) -> None:
    Image.fromarray(frame.pixels, mode="RGB").save(path, format="PNG")


def load_png(path, timestamp_ms: int = 0) -> ImageFrame:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return frame_from_array(arr, timestamp_ms)
