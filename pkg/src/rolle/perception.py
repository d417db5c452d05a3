"""Image preprocessing: raw upside-down RGB capture -> 3@66x200 YUV tensor.

The fixed chain is rotate180 -> crop_road_region -> resize_bilinear(200, 66)
-> rgb_to_yuv -> x/127.5 - 1, split into planes. Every step is a pure
function and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import ImageFrame, frame_from_array

TENSOR_HEIGHT = 66
TENSOR_WIDTH = 200

# Rows removed from the top of the rotated frame. 320x240 capture keeps the
# bottom 106 rows, so 320:106 is close to the 200:66 target aspect and the
# resize stays near-isotropic.
DEFAULT_CROP_TOP_ROWS = 134

# Full-range BT.601 (JPEG convention), RGB row vectors on the right.
_YUV_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YUV_OFFSET = np.array([0.0, 128.0, 128.0])


class InvalidCropError(ValueError):
    """Crop would remove the entire frame."""


@dataclass
class PreprocessConfig:
    crop_top_rows: int = DEFAULT_CROP_TOP_ROWS
    out_width: int = TENSOR_WIDTH
    out_height: int = TENSOR_HEIGHT


@dataclass
class InputTensor:
    """3 planes (Y, U, V), each out_height x out_width, values in [-1, 1]."""

    planes: np.ndarray  # (3, H, W) float32

    def __post_init__(self):
        if self.planes.shape[0] != 3 or self.planes.ndim != 3:
            raise ValueError(f"expected (3, H, W) planes, got {self.planes.shape}")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def rotate180(f: ImageFrame) -> ImageFrame:
    """Map pixel (r, c) to (H-1-r, W-1-c). Involution."""
    return frame_from_array(f.pixels[::-1, ::-1].copy(), f.timestamp_ms)


def crop_road_region(f: ImageFrame, top_rows: int) -> ImageFrame:
    """Drop the first `top_rows` rows (sky/background above the track)."""
    if not 0 <= top_rows < f.height:
        raise InvalidCropError(
            f"top_rows={top_rows} out of range for height {f.height}"
        )
    return frame_from_array(f.pixels[top_rows:].copy(), f.timestamp_ms)


def resize_bilinear(f: ImageFrame, out_w: int = TENSOR_WIDTH, out_h: int = TENSOR_HEIGHT) -> ImageFrame:
    """Bilinear resize with pixel-center alignment and edge clamping.

    Source coordinate for output index d is (d + 0.5) * scale - 0.5; the
    four neighbours are blended and the result rounded half-up to uint8.
    """
    if f.width < 2 or f.height < 2:
        raise ValueError("source must be at least 2x2")
    src = f.pixels.astype(np.float64)

    def axis_coords(out_n: int, src_n: int):
        scale = src_n / out_n
        pos = (np.arange(out_n) + 0.5) * scale - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, src_n - 1)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, f.height)
    x0, x1, fx = axis_coords(out_w, f.width)

    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    out = np.clip(_round_half_up(out), 0, 255).astype(np.uint8)
    return frame_from_array(out, f.timestamp_ms)


def rgb_to_yuv(f: ImageFrame) -> ImageFrame:
    """Full-range BT.601 conversion; channels reinterpreted as (Y, U, V)."""
    rgb = f.pixels.astype(np.float64)
    yuv = rgb @ _YUV_MATRIX.T + _YUV_OFFSET
    yuv = np.clip(_round_half_up(yuv), 0, 255).astype(np.uint8)
    return frame_from_array(yuv, f.timestamp_ms)


def preprocess(raw: ImageFrame, cfg: PreprocessConfig | None = None) -> InputTensor:
    """Run the full chain on a raw (upside-down) capture."""
    cfg = cfg or PreprocessConfig()
    f = rotate180(raw)
    f = crop_road_region(f, cfg.crop_top_rows)
    f = resize_bilinear(f, cfg.out_width, cfg.out_height)
    f = rgb_to_yuv(f)
    planes = f.pixels.astype(np.float32) / 127.5 - 1.0
    planes = np.ascontiguousarray(planes.transpose(2, 0, 1))
    return InputTensor(planes)
