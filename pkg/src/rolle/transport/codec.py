"""Wire encoding for control values: UTF-8 decimal, 4 fraction digits.

Human-readable on purpose so off-the-shelf MQTT tools can watch the control
topics; bandwidth is irrelevant at 20 Hz.
"""

from __future__ import annotations

import math


class PayloadError(ValueError):
    """Payload is not a decodable control value."""


def encode_control(v: float) -> bytes:
    """Clamp to [-1, 1] and format like "-0.5000"."""
    if not math.isfinite(v):
        raise PayloadError(f"non-finite control value {v!r}")
    v = min(max(v, -1.0), 1.0)
    return f"{v:.4f}".encode("utf-8")


def decode_control(payload: bytes) -> float:
    """Parse and clamp; raises PayloadError for anything non-numeric."""
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as e:
        raise PayloadError(f"control payload is not UTF-8: {e}") from None
    try:
        v = float(text)
    except ValueError:
        raise PayloadError(f"control payload is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise PayloadError(f"non-finite control payload {text!r}")
    return min(max(v, -1.0), 1.0)
