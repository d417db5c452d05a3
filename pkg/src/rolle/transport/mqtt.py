"""MQTT 3.1.1 subset: QoS-0 broker and client over TCP.

Supported packets: CONNECT/CONNACK, PUBLISH (QoS 0 only), SUBSCRIBE/SUBACK,
UNSUBSCRIBE/UNSUBACK, PINGREQ/PINGRESP, DISCONNECT. No retained messages,
no wildcards (subscriptions match topic names exactly), no persistent
sessions, no auth. Standard clients interoperate as long as they stay inside
that subset; anything outside it closes the connection with a protocol error.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

CONNECT = 1
CONNACK = 2
PUBLISH = 3
SUBSCRIBE = 8
SUBACK = 9
UNSUBSCRIBE = 10
UNSUBACK = 11
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

MAX_REMAINING_LENGTH = 268_435_455
MAX_ACCEPTED_LENGTH = 16 * 1024 * 1024  # sanity cap well above any frame we send


class ProtocolError(Exception):
    """Peer violated the MQTT subset; the connection gets closed."""


class NeedMoreData(Exception):
    """Buffer holds only a packet prefix; not an error."""


# ---- packet model ----------------------------------------------------------


@dataclass
class ConnectPacket:
    client_id: str
    clean_session: bool
    keepalive: int


@dataclass
class ConnackPacket:
    session_present: bool
    return_code: int


@dataclass
class PublishPacket:
    topic: str
    payload: bytes
    qos: int = 0
    retain: bool = False


@dataclass
class SubscribePacket:
    packet_id: int
    filters: list = field(default_factory=list)  # [(topic, requested_qos)]


@dataclass
class SubackPacket:
    packet_id: int
    return_codes: list = field(default_factory=list)


@dataclass
class UnsubscribePacket:
    packet_id: int
    filters: list = field(default_factory=list)


@dataclass
class UnsubackPacket:
    packet_id: int


@dataclass
class PingreqPacket:
    pass


@dataclass
class PingrespPacket:
    pass


@dataclass
class DisconnectPacket:
    pass


# ---- decoding --------------------------------------------------------------


def _decode_remaining_length(buf: bytes, pos: int):
    multiplier = 1
    value = 0
    for i in range(4):
        if pos + i >= len(buf):
            raise NeedMoreData()
        byte = buf[pos + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, pos + i + 1
        multiplier *= 128
    raise ProtocolError("remaining length exceeds 4 bytes")


def _take_u16(body: bytes, pos: int):
    if pos + 2 > len(body):
        raise ProtocolError("truncated 16-bit field")
    return struct.unpack_from(">H", body, pos)[0], pos + 2


def _take_string(body: bytes, pos: int):
    n, pos = _take_u16(body, pos)
    if pos + n > len(body):
        raise ProtocolError("truncated string field")
    try:
        s = body[pos : pos + n].decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("string field is not valid UTF-8") from None
    if "\x00" in s:
        raise ProtocolError("string field contains U+0000")
    return s, pos + n


def _parse_connect(flags: int, body: bytes) -> ConnectPacket:
    if flags != 0:
        raise ProtocolError("CONNECT fixed-header flags must be 0")
    name, pos = _take_string(body, 0)
    if name != "MQTT":
        raise ProtocolError(f"unsupported protocol name {name!r}")
    if pos >= len(body):
        raise ProtocolError("truncated CONNECT")
    level = body[pos]
    pos += 1
    if level != 4:
        raise ProtocolError(f"unsupported protocol level {level}")
    if pos >= len(body):
        raise ProtocolError("truncated CONNECT")
    cflags = body[pos]
    pos += 1
    if cflags & 0x01:
        raise ProtocolError("CONNECT reserved flag set")
    keepalive, pos = _take_u16(body, pos)
    client_id, pos = _take_string(body, pos)
    if cflags & 0x04:  # will flag: parse and drop (no will delivery in subset)
        _, pos = _take_string(body, pos)
        wn, pos = _take_u16(body, pos)
        if pos + wn > len(body):
            raise ProtocolError("truncated will message")
        pos += wn
    if cflags & 0x80:
        _, pos = _take_string(body, pos)
    if cflags & 0x40:
        pn, pos = _take_u16(body, pos)
        if pos + pn > len(body):
            raise ProtocolError("truncated password")
        pos += pn
    if pos != len(body):
        raise ProtocolError("trailing bytes after CONNECT payload")
    return ConnectPacket(
        client_id=client_id,
        clean_session=bool(cflags & 0x02),
        keepalive=keepalive,
    )


def _parse_publish(flags: int, body: bytes) -> PublishPacket:
    qos = (flags >> 1) & 0x03
    if qos == 3:
        raise ProtocolError("PUBLISH with invalid QoS 3")
    topic, pos = _take_string(body, 0)
    if not topic:
        raise ProtocolError("PUBLISH with empty topic")
    if "+" in topic or "#" in topic:
        raise ProtocolError("PUBLISH topic contains wildcard characters")
    if qos > 0:
        # Reject before reading the packet id: the subset is QoS 0 only.
        raise ProtocolError(f"QoS {qos} PUBLISH not supported")
    return PublishPacket(
        topic=topic, payload=bytes(body[pos:]), qos=qos, retain=bool(flags & 0x01)
    )


def _parse_subscribe(flags: int, body: bytes) -> SubscribePacket:
    if flags != 0x02:
        raise ProtocolError("SUBSCRIBE fixed-header flags must be 0b0010")
    packet_id, pos = _take_u16(body, 0)
    if packet_id == 0:
        raise ProtocolError("SUBSCRIBE packet id must be nonzero")
    filters = []
    while pos < len(body):
        topic, pos = _take_string(body, pos)
        if pos >= len(body):
            raise ProtocolError("SUBSCRIBE filter missing QoS byte")
        req_qos = body[pos]
        pos += 1
        if req_qos > 2:
            raise ProtocolError(f"SUBSCRIBE requested QoS {req_qos} invalid")
        if not topic:
            raise ProtocolError("SUBSCRIBE with empty topic filter")
        filters.append((topic, req_qos))
    if not filters:
        raise ProtocolError("SUBSCRIBE with no topic filters")
    return SubscribePacket(packet_id=packet_id, filters=filters)


def _parse_unsubscribe(flags: int, body: bytes) -> UnsubscribePacket:
    if flags != 0x02:
        raise ProtocolError("UNSUBSCRIBE fixed-header flags must be 0b0010")
    packet_id, pos = _take_u16(body, 0)
    filters = []
    while pos < len(body):
        topic, pos = _take_string(body, pos)
        filters.append(topic)
    if not filters:
        raise ProtocolError("UNSUBSCRIBE with no topic filters")
    return UnsubscribePacket(packet_id=packet_id, filters=filters)


def _parse_connack(flags: int, body: bytes) -> ConnackPacket:
    if len(body) != 2:
        raise ProtocolError("CONNACK body must be 2 bytes")
    return ConnackPacket(session_present=bool(body[0] & 0x01), return_code=body[1])


def _parse_suback(flags: int, body: bytes) -> SubackPacket:
    packet_id, pos = _take_u16(body, 0)
    return SubackPacket(packet_id=packet_id, return_codes=list(body[pos:]))


def _parse_unsuback(flags: int, body: bytes) -> UnsubackPacket:
    packet_id, _ = _take_u16(body, 0)
    return UnsubackPacket(packet_id=packet_id)


def _parse_empty(kind, flags: int, body: bytes):
    if body:
        raise ProtocolError("unexpected payload on control packet")
    return kind()


_PARSERS = {
    CONNECT: _parse_connect,
    CONNACK: _parse_connack,
    PUBLISH: _parse_publish,
    SUBSCRIBE: _parse_subscribe,
    SUBACK: _parse_suback,
    UNSUBSCRIBE: _parse_unsubscribe,
    UNSUBACK: _parse_unsuback,
    PINGREQ: lambda f, b: _parse_empty(PingreqPacket, f, b),
    PINGRESP: lambda f, b: _parse_empty(PingrespPacket, f, b),
    DISCONNECT: lambda f, b: _parse_empty(DisconnectPacket, f, b),
}


def parse_packet(buf: bytes):
    """Parse one packet from the front of `buf`.

    Returns (packet, bytes_consumed). Raises NeedMoreData for a clean prefix
    and ProtocolError for anything malformed. Never raises anything else,
    whatever the input bytes.
    """
    if len(buf) < 1:
        raise NeedMoreData()
    ptype = buf[0] >> 4
    flags = buf[0] & 0x0F
    if ptype not in _PARSERS:
        raise ProtocolError(f"unknown packet type {ptype}")
    remaining, body_start = _decode_remaining_length(buf, 1)
    if remaining > MAX_ACCEPTED_LENGTH:
        raise ProtocolError(f"packet of {remaining} bytes exceeds accepted size")
    if len(buf) < body_start + remaining:
        raise NeedMoreData()
    body = buf[body_start : body_start + remaining]
    packet = _PARSERS[ptype](flags, body)
    return packet, body_start + remaining


# ---- encoding --------------------------------------------------------------


def _encode_remaining_length(n: int) -> bytes:
    if n > MAX_REMAINING_LENGTH:
        raise ValueError(f"packet too large: {n}")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def _packet(first_byte: int, body: bytes) -> bytes:
    return bytes([first_byte]) + _encode_remaining_length(len(body)) + body


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def encode_connect(client_id: str, keepalive: int = 60) -> bytes:
    body = _string("MQTT") + bytes([4, 0x02]) + struct.pack(">H", keepalive)
    body += _string(client_id)
    return _packet(CONNECT << 4, body)


def encode_connack(return_code: int = 0, session_present: bool = False) -> bytes:
    return _packet(CONNACK << 4, bytes([int(session_present), return_code]))


def encode_publish(topic: str, payload: bytes) -> bytes:
    return _packet(PUBLISH << 4, _string(topic) + payload)


def encode_subscribe(packet_id: int, topics) -> bytes:
    body = struct.pack(">H", packet_id)
    for t in topics:
        body += _string(t) + b"\x00"
    return _packet((SUBSCRIBE << 4) | 0x02, body)


def encode_suback(packet_id: int, return_codes) -> bytes:
    return _packet(SUBACK << 4, struct.pack(">H", packet_id) + bytes(return_codes))


def encode_unsubscribe(packet_id: int, topics) -> bytes:
    body = struct.pack(">H", packet_id)
    for t in topics:
        body += _string(t)
    return _packet((UNSUBSCRIBE << 4) | 0x02, body)


def encode_unsuback(packet_id: int) -> bytes:
    return _packet(UNSUBACK << 4, struct.pack(">H", packet_id))


def encode_pingreq() -> bytes:
    return _packet(PINGREQ << 4, b"")


def encode_pingresp() -> bytes:
    return _packet(PINGRESP << 4, b"")


def encode_disconnect() -> bytes:
    return _packet(DISCONNECT << 4, b"")


# ---- socket plumbing --------------------------------------------------------


class _PacketReader:
    """Accumulates socket bytes and yields whole packets."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = bytearray()

    def read_packet(self):
        """Next packet, or None on orderly EOF between packets."""
        while True:
            try:
                packet, consumed = parse_packet(bytes(self._buf))
            except NeedMoreData:
                pass
            else:
                del self._buf[:consumed]
                return packet
            chunk = self._sock.recv(65536)
            if not chunk:
                if self._buf:
                    raise ProtocolError("connection closed mid-packet")
                return None
            self._buf.extend(chunk)


# ---- broker -----------------------------------------------------------------


class _Session:
    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self.client_id = ""
        self.write_lock = threading.Lock()
        self.subscriptions: set[str] = set()

    def send(self, data: bytes) -> None:
        with self.write_lock:
            self.sock.sendall(data)


class Broker:
    """QoS-0 exact-topic-match broker. One reader thread per session."""

    def __init__(self, host: str = "127.0.0.1", port: int = 1883):
        self._host = host
        self._port = port
        self._server: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._subs: dict[str, list[_Session]] = {}
        self._sessions: set[_Session] = set()
        self._stopping = threading.Event()

    @property
    def port(self) -> int:
        if self._server is None:
            raise RuntimeError("broker not started")
        return self._server.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return (self._host, self.port)

    def start(self) -> "Broker":
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((self._host, self._port))
        server.listen(32)
        self._server = server
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="mqtt-broker-accept", daemon=True
        )
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stopping.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            try:
                s.sock.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)

    def __enter__(self) -> "Broker":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._stopping.is_set():
            try:
                sock, peer = self._server.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _Session(sock, peer)
            with self._lock:
                self._sessions.add(session)
            threading.Thread(
                target=self._session_loop,
                args=(session,),
                name=f"mqtt-session-{peer}",
                daemon=True,
            ).start()

    def _session_loop(self, session: _Session) -> None:
        reader = _PacketReader(session.sock)
        try:
            first = reader.read_packet()
            if first is None:
                return
            if not isinstance(first, ConnectPacket):
                raise ProtocolError("first packet was not CONNECT")
            session.client_id = first.client_id
            session.send(encode_connack(0))
            while True:
                packet = reader.read_packet()
                if packet is None or isinstance(packet, DisconnectPacket):
                    return
                self._handle(session, packet)
        except (ProtocolError, OSError) as e:
            if not self._stopping.is_set():
                log.debug("session %s closed: %s", session.peer, e)
        finally:
            self._drop(session)

    def _handle(self, session: _Session, packet) -> None:
        if isinstance(packet, PublishPacket):
            self._route(packet)
        elif isinstance(packet, SubscribePacket):
            with self._lock:
                for topic, _qos in packet.filters:
                    holders = self._subs.setdefault(topic, [])
                    if session not in holders:
                        holders.append(session)
                    session.subscriptions.add(topic)
            session.send(encode_suback(packet.packet_id, [0] * len(packet.filters)))
        elif isinstance(packet, UnsubscribePacket):
            with self._lock:
                for topic in packet.filters:
                    holders = self._subs.get(topic, [])
                    if session in holders:
                        holders.remove(session)
                    session.subscriptions.discard(topic)
            session.send(encode_unsuback(packet.packet_id))
        elif isinstance(packet, PingreqPacket):
            session.send(encode_pingresp())
        elif isinstance(packet, (ConnectPacket,)):
            raise ProtocolError("duplicate CONNECT")
        else:
            raise ProtocolError(f"unexpected packet {type(packet).__name__}")

    def _route(self, packet: PublishPacket) -> None:
        data = encode_publish(packet.topic, packet.payload)
        with self._lock:
            targets = list(self._subs.get(packet.topic, ()))
        for target in targets:
            try:
                target.send(data)
            except OSError:
                self._drop(target)

    def _drop(self, session: _Session) -> None:
        with self._lock:
            self._sessions.discard(session)
            for topic in session.subscriptions:
                holders = self._subs.get(topic, [])
                if session in holders:
                    holders.remove(session)
        try:
            session.sock.close()
        except OSError:
            pass


def broker_serve(listen_address: tuple[str, int] = ("127.0.0.1", 1883)) -> Broker:
    """Bind and start a broker; returns the running handle."""
    return Broker(*listen_address).start()


# ---- client -----------------------------------------------------------------


class Client:
    """Minimal QoS-0 client. One connection must not be shared by two
    threads without external serialization (matches the broker contract)."""

    def __init__(self, host: str, port: int, client_id: str = "rolle"):
        self._host = host
        self._port = port
        self._client_id = client_id
        self._sock: socket.socket | None = None
        self._reader_thread: threading.Thread | None = None
        self._write_lock = threading.Lock()
        self._suback = queue.Queue()
        self._closed = threading.Event()
        self.messages: queue.Queue = queue.Queue()
        self.on_message = None  # optional callable(topic, payload)

    def connect(self, timeout: float = 5.0) -> "Client":
        sock = socket.create_connection((self._host, self._port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(timeout)
        sock.sendall(encode_connect(self._client_id))
        reader = _PacketReader(sock)
        ack = reader.read_packet()
        if not isinstance(ack, ConnackPacket) or ack.return_code != 0:
            sock.close()
            raise ProtocolError(f"connect refused: {ack!r}")
        sock.settimeout(None)
        self._sock = sock
        self._closed.clear()
        self._reader_thread = threading.Thread(
            target=self._read_loop, args=(reader,), name="mqtt-client-reader", daemon=True
        )
        self._reader_thread.start()
        return self

    def _read_loop(self, reader: _PacketReader) -> None:
        try:
            while True:
                packet = reader.read_packet()
                if packet is None:
                    return
                if isinstance(packet, PublishPacket):
                    if self.on_message is not None:
                        self.on_message(packet.topic, packet.payload)
                    else:
                        self.messages.put((packet.topic, packet.payload))
                elif isinstance(packet, SubackPacket):
                    self._suback.put(packet)
                # PINGRESP / UNSUBACK need no action
        except (ProtocolError, OSError):
            pass
        finally:
            self._closed.set()

    def _send(self, data: bytes) -> None:
        if self._sock is None or self._closed.is_set():
            raise ConnectionError("client is not connected")
        with self._write_lock:
            self._sock.sendall(data)

    def publish(self, topic: str, payload: bytes) -> None:
        self._send(encode_publish(topic, payload))

    def subscribe(self, topic: str, timeout: float = 5.0) -> None:
        self._send(encode_subscribe(1, [topic]))
        try:
            self._suback.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError("no SUBACK received") from None

    def ping(self) -> None:
        self._send(encode_pingreq())

    def disconnect(self) -> None:
        if self._sock is None:
            return
        try:
            self._send(encode_disconnect())
        except (ConnectionError, OSError):
            pass
        self.close()

    def close(self) -> None:
        self._closed.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.disconnect()
