"""Length-prefixed binary telemetry frames for the visualization socket.

Wire format per frame (all integers big-endian):

    u32  payload length = 24 + width*height*3
    u64  timestamp_ms
    f32  steering
    f32  throttle
    u32  width
    u32  height
    raw  width*height*3 RGB8 bytes, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

_HEADER = struct.Struct(">QffII")
HEADER_SIZE = _HEADER.size  # 24


class StreamCorruptError(ValueError):
    """Length prefix disagrees with the frame header."""


class TruncatedStreamError(EOFError):
    """Stream ended in the middle of a frame."""


@dataclass
class TelemetryFrame:
    timestamp_ms: int
    steering: float
    throttle: float
    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if len(self.pixels) != self.width * self.height * 3:
            raise ValueError(
                f"pixel buffer of {len(self.pixels)} bytes does not match "
                f"{self.width}x{self.height}x3"
            )


def encode_frame(f: TelemetryFrame) -> bytes:
    payload_len = HEADER_SIZE + len(f.pixels)
    header = _HEADER.pack(f.timestamp_ms, f.steering, f.throttle, f.width, f.height)
    return struct.pack(">I", payload_len) + header + f.pixels


def frame_stream_write(sink, f: TelemetryFrame) -> None:
    """Write one frame to a binary file-like sink."""
    sink.write(encode_frame(f))


def _read_exact(source, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = source.read(n - len(buf))
        if not chunk:
            raise TruncatedStreamError(
                f"stream ended after {len(buf)} of {n} expected bytes"
            )
        buf.extend(chunk)
    return bytes(buf)


def frame_stream_read(source) -> TelemetryFrame:
    """Read one frame; raises TruncatedStreamError at a clean or dirty EOF."""
    prefix = _read_exact(source, 4)
    (payload_len,) = struct.unpack(">I", prefix)
    if payload_len < HEADER_SIZE:
        raise StreamCorruptError(f"payload length {payload_len} below header size")
    payload = _read_exact(source, payload_len)
    timestamp_ms, steering, throttle, width, height = _HEADER.unpack(
        payload[:HEADER_SIZE]
    )
    if payload_len != HEADER_SIZE + width * height * 3:
        raise StreamCorruptError(
            f"payload length {payload_len} does not match "
            f"{width}x{height} frame"
        )
    return TelemetryFrame(
        timestamp_ms=timestamp_ms,
        steering=steering,
        throttle=throttle,
        width=width,
        height=height,
        pixels=payload[HEADER_SIZE:],
    )


class FrameStreamServer:
    """TCP listener that fans telemetry frames out to connected viewers.

    Viewers are best-effort: a send failure just drops that viewer. The
    driving loop must never depend on anyone watching.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 5005):
        import socket
        import threading

        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(8)
        self._clients: list = []
        self._lock = threading.Lock()
        self._stopping = False
        self._thread = threading.Thread(
            target=self._accept_loop, name="frame-stream-accept", daemon=True
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.getsockname()[1]

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            with self._lock:
                self._clients.append(sock)

    def write(self, data: bytes) -> None:
        """File-like hook so the server can be used as a telemetry sink."""
        with self._lock:
            clients = list(self._clients)
        for sock in clients:
            try:
                sock.sendall(data)
            except OSError:
                with self._lock:
                    if sock in self._clients:
                        self._clients.remove(sock)
                try:
                    sock.close()
                except OSError:
                    pass

    def write_frame(self, f: TelemetryFrame) -> None:
        self.write(encode_frame(f))

    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    def close(self) -> None:
        self._stopping = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
            self._clients.clear()
        for sock in clients:
            try:
                sock.close()
            except OSError:
                pass

