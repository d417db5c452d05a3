"""Pub-sub control channel (MQTT 3.1.1 QoS-0 subset) and telemetry stream."""

from .codec import PayloadError, decode_control, encode_control
from .framestream import (
    FrameStreamServer,
    StreamCorruptError,
    TelemetryFrame,
    TruncatedStreamError,
    encode_frame,
    frame_stream_read,
    frame_stream_write,
)
from .mqtt import Broker, Client, ProtocolError, broker_serve

__all__ = [
    "Broker",
    "Client",
    "FrameStreamServer",
    "PayloadError",
    "ProtocolError",
    "StreamCorruptError",
    "TelemetryFrame",
    "TruncatedStreamError",
    "broker_serve",
    "decode_control",
    "encode_control",
    "encode_frame",
    "frame_stream_read",
    "frame_stream_write",
]
