import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmeta.errors import ChannelClosedError, DecodeError, EncodingError, IntegrityError, WireError
from fedmeta.params import ParameterSet
from fedmeta.wire import (MAGIC, LoopbackChannel, MessageKind, RoundMessage, decode_frame,
                          decode_params, encode_frame, encode_params, socket_pair)

names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)
dims = st.lists(st.integers(1, 4), min_size=1, max_size=3)


@st.composite
def parameter_sets(draw):
    keys = draw(st.lists(names, unique=True, max_size=6))
    entries = {}
    for k in keys:
        shape = tuple(draw(dims))
        bits = draw(st.lists(st.integers(0, 2**32 - 1), min_size=int(np.prod(shape)),
                             max_size=int(np.prod(shape))))
        entries[k] = np.array(bits, dtype=np.uint32).view(np.float32).reshape(shape)
    return ParameterSet(entries)


def test_empty_set_is_four_bytes():
    assert encode_params(ParameterSet()) == b"\x00\x00\x00\x00"


def test_single_scalar_layout():
    buf = encode_params(ParameterSet({"b": [1.0]}))
    assert len(buf) == 16
    assert buf == (struct.pack("<I", 1) + struct.pack("<H", 1) + b"b" + b"\x01"
                   + struct.pack("<I", 1) + bytes.fromhex("0000803F"))
    assert buf[-4:] == b"\x00\x00\x80\x3f"


def test_entries_sorted_lexicographically():
    buf = encode_params(ParameterSet({"zeta": [1.0], "alpha": [2.0], "Mid": [3.0]}))
    assert buf.index(b"Mid") < buf.index(b"alpha") < buf.index(b"zeta")


@settings(max_examples=100, deadline=None)
@given(parameter_sets())
def test_round_trip_bitwise(params):
    decoded = decode_params(encode_params(params))
    assert set(decoded) == set(params)
    for k in params:
        assert decoded[k].shape == params[k].shape
        assert decoded[k].tobytes() == params[k].tobytes()


@settings(max_examples=100, deadline=None)
@given(parameter_sets())
def test_canonical_encoding(params):
    buf = encode_params(params)
    assert encode_params(decode_params(buf)) == buf


def test_decode_truncated_reports_offset():
    buf = encode_params(ParameterSet({"w": np.ones((2, 2))}))
    with pytest.raises(DecodeError) as err:
        decode_params(buf[:-3])
    assert err.value.offset == len(buf) - 16


def test_decode_rejects_out_of_order_entries():
    a = encode_params(ParameterSet({"a": [1.0]}))[4:]
    b = encode_params(ParameterSet({"b": [1.0]}))[4:]
    with pytest.raises(DecodeError) as err:
        decode_params(struct.pack("<I", 2) + b + a)
    assert err.value.offset == 4 + len(b)


def test_decode_rejects_trailing_bytes():
    buf = encode_params(ParameterSet({"a": [1.0]}))
    with pytest.raises(DecodeError) as err:
        decode_params(buf + b"\x00")
    assert err.value.offset == len(buf)


def test_decode_length_overrun():
    buf = bytearray(encode_params(ParameterSet({"a": [1.0, 2.0]})))
    buf[8:12] = struct.pack("<I", 1000)  # first dim
    with pytest.raises(DecodeError):
        decode_params(bytes(buf))


def test_overlong_name_rejected():
    with pytest.raises(EncodingError):
        encode_params(ParameterSet({"x" * 70000: [1.0]}))


# -- messages and frames -----------------------------------------------------

def sample_message():
    payload = encode_params(ParameterSet({"conv1.weight": np.arange(6, dtype=np.float32).reshape(2, 3)}))
    return RoundMessage(MessageKind.LOCAL_UPDATE, 7, "node-a", payload, 1234)


def test_frame_layout():
    msg = sample_message()
    frame = encode_frame(msg)
    body = msg.encode()
    assert frame[:4] == MAGIC == b"CXVZ"
    assert struct.unpack("<H", frame[4:6])[0] == 1
    assert struct.unpack("<Q", frame[6:14])[0] == len(body)
    assert frame[14:-4] == body
    assert struct.unpack("<I", frame[-4:])[0] == zlib.crc32(body)
    assert decode_frame(frame) == msg


@pytest.mark.parametrize("kind", list(MessageKind))
def test_payload_presence_rule(kind):
    empty_kinds = {MessageKind.JOIN_REQUEST, MessageKind.JOIN_ACK, MessageKind.HEAD_REQUEST,
                   MessageKind.SHUTDOWN}
    payload = encode_params(ParameterSet({"a": [1.0]}))
    if kind in empty_kinds:
        RoundMessage(kind, 0, "n")
        with pytest.raises(EncodingError):
            RoundMessage(kind, 0, "n", payload)
    else:
        RoundMessage(kind, 0, "n", payload)
        with pytest.raises(EncodingError):
            RoundMessage(kind, 0, "n")


def test_every_single_byte_corruption_is_detected():
    frame = encode_frame(sample_message())
    for pos in range(len(frame)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(frame)
            bad[pos] ^= flip
            with pytest.raises(WireError):
                decode_frame(bytes(bad))
            if 14 <= pos:
                with pytest.raises(IntegrityError):
                    decode_frame(bytes(bad))


def test_unknown_kind_rejected():
    body = bytearray(sample_message().encode())
    body[0] = 9
    frame = MAGIC + struct.pack("<HQ", 1, len(body)) + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(DecodeError):
        decode_frame(frame)


# -- transports --------------------------------------------------------------

def test_loopback_identity_and_order():
    a, b = LoopbackChannel.pair()
    msgs = [sample_message(), RoundMessage(MessageKind.SHUTDOWN, 3, "server")]
    for m in msgs:
        a.send(m)
    assert [b.recv(), b.recv()] == msgs
    with pytest.raises(ChannelClosedError):
        b.recv()


def test_loopback_closed_channel():
    a, b = LoopbackChannel.pair()
    b.close()
    with pytest.raises(ChannelClosedError):
        a.send(sample_message())


def test_trace_records_sent_frames():
    trace = []
    a, b = LoopbackChannel.pair(trace)
    a.send(sample_message())
    b.send(RoundMessage(MessageKind.JOIN_ACK, 0, "server"))
    assert [decode_frame(f).kind for f in trace] == [MessageKind.LOCAL_UPDATE, MessageKind.JOIN_ACK]


def test_stream_identity():
    a, b = socket_pair()
    try:
        msg = sample_message()
        a.send(msg)
        a.send(msg)
        assert b.recv() == msg
        assert b.recv() == msg
    finally:
        a.close()
        b.close()


def test_stream_byte_flip_in_transit_raises_integrity_error():
    a, b = socket_pair()
    try:
        frame = bytearray(encode_frame(sample_message()))
        frame[30] ^= 0x10  # inside the payload
        a.send_frame(bytes(frame))
        with pytest.raises(IntegrityError):
            b.recv()
    finally:
        a.close()
        b.close()


def test_stream_closed_peer():
    a, b = socket_pair()
    a.close()
    with pytest.raises(ChannelClosedError):
        b.recv()
    b.close()
