"""Canonical binary encoding of parameter sets and framed round messages.

Parameter set layout (little-endian)::

    entry_count u32
    per entry, names in byte-lexicographic order:
        name_len u16 | name utf-8 | rank u8 | dims u32 * rank | data f32 * prod(dims)

Message body::

    kind u8 | round u32 | sender_len u16 | sender utf-8 | sample_count u64
    | payload_len u64 | payload

Frame::

    "CXVZ" | version u16 | body_len u64 | body | crc32(body) u32
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
import zlib
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import ChannelClosedError, DecodeError, EncodingError, IntegrityError, TransportError
from .params import ParameterSet

MAGIC = b"CXVZ"
VERSION = 1
MAX_BODY = 1 << 31

_HEADER = struct.Struct("<4sHQ")
_CRC = struct.Struct("<I")
_MSG_HEAD = struct.Struct("<BIH")
_MSG_TAIL = struct.Struct("<QQ")


class MessageKind(enum.IntEnum):
    JOIN_REQUEST = 1
    JOIN_ACK = 2
    GLOBAL_PARAMS = 3
    LOCAL_UPDATE = 4
    HEAD_REQUEST = 5
    HEAD_UPLOAD = 6
    SHUTDOWN = 7


EMPTY_PAYLOAD_KINDS = frozenset({MessageKind.JOIN_REQUEST, MessageKind.JOIN_ACK,
                                 MessageKind.HEAD_REQUEST, MessageKind.SHUTDOWN})


# -- parameter sets ----------------------------------------------------------

def encode_params(params) -> bytes:
    items = []
    for name, value in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EncodingError(f"parameter name of {len(raw)} bytes exceeds 65535")
        arr = np.asarray(value)
        if arr.ndim > 0xFF:
            raise EncodingError(f"{name}: rank {arr.ndim} exceeds 255")
        items.append((raw, arr))
    items.sort(key=lambda item: item[0])
    out = [struct.pack("<I", len(items))]
    for raw, arr in items:
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_params(buf: bytes) -> ParameterSet:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DecodeError(f"truncated buffer reading {what}: need {n} bytes, "
                              f"{len(view) - pos} left", offset=pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = {}
    prev = None
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        raw = bytes(take(name_len, "name"))
        if prev is not None and raw <= prev:
            raise DecodeError(f"entry {raw!r} out of lexicographic order", offset=start)
        prev = raw
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8 name: {exc}", offset=start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        if rank == 0 or 0 in dims:
            raise DecodeError(f"{name}: invalid dims {dims}", offset=pos - 4 * rank)
        size = int(np.prod(dims, dtype=np.int64))
        data = take(4 * size, f"data of {name}")
        entries[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise DecodeError(f"{len(view) - pos} bytes past the last entry", offset=pos)
    return ParameterSet(entries)


# -- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class RoundMessage:
    kind: MessageKind
    round_index: int
    sender_id: str
    payload: bytes = b""
    sample_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        if (len(self.payload) == 0) != (self.kind in EMPTY_PAYLOAD_KINDS):
            # An empty parameter set still encodes to 4 bytes, so "empty" is unambiguous.
            raise EncodingError(f"{self.kind.name}: payload must be "
                                f"{'empty' if self.kind in EMPTY_PAYLOAD_KINDS else 'non-empty'}")

    def params(self) -> ParameterSet:
        return decode_params(self.payload)

    def encode(self) -> bytes:
        sender = self.sender_id.encode("utf-8")
        if len(sender) > 0xFFFF:
            raise EncodingError("sender id too long")
        return (_MSG_HEAD.pack(int(self.kind), self.round_index, len(sender)) + sender
                + _MSG_TAIL.pack(self.sample_count, len(self.payload)) + self.payload)

    @classmethod
    def decode(cls, body: bytes) -> "RoundMessage":
        if len(body) < _MSG_HEAD.size:
            raise DecodeError("truncated message header", offset=len(body))
        kind, round_index, sender_len = _MSG_HEAD.unpack_from(body, 0)
        pos = _MSG_HEAD.size
        if kind not in MessageKind._value2member_map_:
            raise DecodeError(f"unknown message kind {kind}", offset=0)
        if len(body) < pos + sender_len + _MSG_TAIL.size:
            raise DecodeError("truncated message", offset=len(body))
        sender = body[pos:pos + sender_len].decode("utf-8")
        pos += sender_len
        sample_count, payload_len = _MSG_TAIL.unpack_from(body, pos)
        pos += _MSG_TAIL.size
        if pos + payload_len != len(body):
            raise DecodeError(f"payload length {payload_len} disagrees with body size", offset=pos - 8)
        try:
            return cls(MessageKind(kind), round_index, sender, bytes(body[pos:]), sample_count)
        except EncodingError as exc:
            raise DecodeError(str(exc), offset=0) from None


def encode_frame(msg: RoundMessage) -> bytes:
    body = msg.encode()
    return _HEADER.pack(MAGIC, VERSION, len(body)) + body + _CRC.pack(zlib.crc32(body))


def parse_header(header: bytes) -> int:
    magic, version, body_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise DecodeError(f"bad frame magic {magic!r}", offset=0)
    if version != VERSION:
        raise DecodeError(f"unsupported frame version {version}", offset=4)
    if body_len > MAX_BODY:
        raise DecodeError(f"frame body length {body_len} exceeds limit", offset=6)
    return body_len


def _check_body(body: bytes, crc_bytes: bytes) -> RoundMessage:
    (crc,) = _CRC.unpack(crc_bytes)
    if zlib.crc32(body) != crc:
        raise IntegrityError("frame checksum mismatch")
    return RoundMessage.decode(body)


def decode_frame(frame: bytes) -> RoundMessage:
    if len(frame) < _HEADER.size + _CRC.size:
        raise DecodeError("truncated frame", offset=len(frame))
    body_len = parse_header(frame[:_HEADER.size])
    end = _HEADER.size + body_len
    if end + _CRC.size != len(frame):
        raise DecodeError(f"frame size {len(frame)} disagrees with body length {body_len}",
                          offset=6)
    return _check_body(frame[_HEADER.size:end], frame[end:])


# -- transports --------------------------------------------------------------

class Channel:
    """One endpoint of a bidirectional frame channel.

    ``trace``, when given, receives every frame this endpoint sends.
    """

    def __init__(self, trace: list | None = None):
        self.trace = trace

    def send(self, msg: RoundMessage) -> None:
        frame = encode_frame(msg)
        if self.trace is not None:
            self.trace.append(frame)
        self.send_frame(frame)

    def recv(self) -> RoundMessage:
        return self.recv_message()

    def send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv_message(self) -> RoundMessage:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackChannel(Channel):
    """In-process endpoint; frames travel as bytes through a pair of deques.

    When the inbox is empty, ``on_empty`` (if set) is invoked once so that a
    peer can be driven synchronously from the same thread.
    """

    def __init__(self, inbox: deque, outbox: deque, state: dict, trace=None):
        super().__init__(trace)
        self.inbox, self.outbox, self._state = inbox, outbox, state
        self.on_empty: Callable[[], None] | None = None

    @classmethod
    def pair(cls, trace: list | None = None) -> tuple["LoopbackChannel", "LoopbackChannel"]:
        a_to_b, b_to_a = deque(), deque()
        state = {"closed": False}
        return cls(b_to_a, a_to_b, state, trace), cls(a_to_b, b_to_a, state, trace)

    def send_frame(self, frame: bytes) -> None:
        if self._state["closed"]:
            raise ChannelClosedError("send on closed channel")
        self.outbox.append(bytes(frame))

    def pending(self) -> bool:
        return bool(self.inbox)

    def recv_message(self) -> RoundMessage:
        if not self.inbox and self.on_empty is not None:
            self.on_empty()
        if not self.inbox:
            raise ChannelClosedError("no frame available: peer closed or idle")
        return decode_frame(self.inbox.popleft())

    def close(self) -> None:
        self._state["closed"] = True


class SocketChannel(Channel):
    """Stream endpoint over a connected socket."""

    def __init__(self, sock: socket.socket, trace=None):
        super().__init__(trace)
        self.sock = sock
        self._send_lock = threading.Lock()

    def send_frame(self, frame: bytes) -> None:
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosedError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except OSError as exc:
                raise ChannelClosedError(f"recv failed: {exc}") from exc
            if not chunk:
                raise ChannelClosedError("connection closed by peer")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_message(self) -> RoundMessage:
        body_len = parse_header(self._read_exact(_HEADER.size))
        body = self._read_exact(body_len)
        return _check_body(body, self._read_exact(_CRC.size))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def socket_pair(trace: list | None = None) -> tuple[SocketChannel, SocketChannel]:
    a, b = socket.socketpair()
    return SocketChannel(a, trace), SocketChannel(b, trace)


__all__ = [
    "MAGIC", "VERSION", "MessageKind", "RoundMessage", "encode_params", "decode_params",
    "encode_frame", "decode_frame", "Channel", "LoopbackChannel", "SocketChannel",
    "socket_pair", "TransportError",
]
