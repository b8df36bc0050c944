import struct

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from batchsocket import wire
from batchsocket.wire import (
    Ack,
    Announce,
    Bye,
    DecodeError,
    DType,
    EncodeError,
    EpochEnd,
    EpochStart,
    FrameDecoder,
    Heartbeat,
    Join,
    Shutdown,
    Welcome,
    checksum,
    decode_message,
    encode_message,
)


def crc32_reference(data: bytes) -> int:
    """Bitwise CRC-32 (IEEE, reflected) used as an independent oracle."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 * (crc & 1))
    return crc ^ 0xFFFFFFFF


class TestChecksum:
    def test_empty(self):
        assert checksum(b"") == 0x00000000

    def test_standard_check_value(self):
        assert checksum(b"123456789") == 0xCBF43926

    def test_against_independent_implementation(self):
        for data in (b"", b"a", b"hello world", bytes(range(256)), b"\xff" * 1000):
            assert checksum(data) == crc32_reference(data)

    def test_deterministic_and_bit_sensitive(self):
        data = bytes(range(100))
        assert checksum(data) == checksum(data)
        flipped = bytearray(data)
        flipped[42] ^= 0x01
        assert checksum(bytes(flipped)) != checksum(data)


class TestFrozenFrames:
    def test_shutdown_frame(self):
        assert encode_message(Shutdown()) == bytes([0x01, 0x00, 0x00, 0x00, 0x09])

    def test_ack_frame(self):
        frame = encode_message(Ack(consumer_id=7, epoch=0, batch_index=42))
        length, kind = struct.unpack_from("<IB", frame)
        assert length == 21
        assert kind == 4
        body = frame[5:]
        assert body == (
            b"\x07\x00\x00\x00\x00\x00\x00\x00"
            + b"\x00\x00\x00\x00"
            + b"\x2a\x00\x00\x00\x00\x00\x00\x00"
        )

    def test_kind_numbering(self):
        kinds = [
            (Join(1), 1),
            (Welcome(1, 0, 10, 0, 2, 2), 2),
            (Announce(0, 0, "x", 8, DType.I64, (1,), 0), 3),
            (Ack(1, 0, 0), 4),
            (Heartbeat(1, 0), 5),
            (EpochStart(0, 1), 6),
            (EpochEnd(0), 7),
            (Bye(1), 8),
            (Shutdown(), 9),
        ]
        for msg, expected in kinds:
            assert encode_message(msg)[4] == expected


class TestAnnounce:
    def test_imagenet_style_roundtrip(self):
        shape = (512, 3, 224, 224)
        byte_len = 512 * 3 * 224 * 224 * 4
        msg = Announce(3, 17, "tsk-1-3-17", byte_len, DType.F32, shape, 0xDEADBEEF)
        assert decode_message(encode_message(msg)) == msg

    def test_empty_name_rejected(self):
        msg = Announce(0, 0, "", 8, DType.I64, (1,), 0)
        with pytest.raises(EncodeError):
            encode_message(msg)

    def test_oversize_name_rejected(self):
        msg = Announce(0, 0, "x" * 256, 8, DType.I64, (1,), 0)
        with pytest.raises(EncodeError):
            encode_message(msg)

    def test_byte_len_mismatch_rejected(self):
        msg = Announce(0, 0, "x", 9, DType.I64, (1,), 0)
        with pytest.raises(EncodeError):
            encode_message(msg)
        good = encode_message(Announce(0, 0, "x", 8, DType.I64, (1,), 0))
        bad = bytearray(good)
        # byte_len sits right after the 1-byte name
        struct.pack_into("<Q", bad, 5 + 12 + 2 + 1, 9)
        with pytest.raises(DecodeError):
            decode_message(bytes(bad))


class TestDecodeErrors:
    def test_zero_length_body(self):
        with pytest.raises(DecodeError, match="missing kind"):
            decode_message(b"\x00\x00\x00\x00")

    def test_unknown_kind(self):
        with pytest.raises(DecodeError, match="unknown message kind"):
            decode_message(bytes([0x01, 0, 0, 0, 250]))

    def test_unknown_dtype(self):
        good = encode_message(Announce(0, 0, "x", 8, DType.I64, (1,), 0))
        bad = bytearray(good)
        bad[5 + 12 + 2 + 1 + 8] = 99  # dtype byte
        with pytest.raises(DecodeError, match="dtype"):
            decode_message(bytes(bad))

    def test_truncated(self):
        frame = encode_message(Ack(1, 2, 3))
        for cut in (2, 6, len(frame) - 1):
            with pytest.raises(DecodeError):
                decode_message(frame[:cut])

    def test_trailing_garbage_rejected(self):
        frame = bytearray(encode_message(Bye(1)))
        frame += b"\x00"
        struct.pack_into("<I", frame, 0, len(frame) - 4)
        with pytest.raises(DecodeError, match="trailing"):
            decode_message(bytes(frame))

    def test_error_carries_offset(self):
        err = None
        try:
            decode_message(bytes([1, 0, 0, 0, 250]))
        except DecodeError as exc:
            err = exc
        assert err is not None and err.offset == 4 and "250" in err.cause


_lenient = settings(
    max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
_ids = st.integers(min_value=0, max_value=2**64 - 1)
_epochs = st.integers(min_value=0, max_value=2**32 - 1)
_u16 = st.integers(min_value=0, max_value=2**16 - 1)
# 50 chars of <=4-byte UTF-8 keeps every name within the 255-byte limit.
_names = st.text(min_size=1, max_size=50)


@st.composite
def _announces(draw):
    dtype = draw(st.sampled_from(list(DType)))
    shape = tuple(draw(st.lists(st.integers(0, 64), min_size=0, max_size=8)))
    byte_len = dtype.size
    for d in shape:
        byte_len *= d
    return Announce(
        epoch=draw(_epochs),
        batch_index=draw(_ids),
        segment_name=draw(_names),
        byte_len=byte_len,
        dtype=dtype,
        shape=shape,
        checksum=draw(st.integers(0, 2**32 - 1)),
    )


_messages = st.one_of(
    st.builds(Join, consumer_id=_ids, protocol_version=_u16),
    st.builds(
        Welcome,
        consumer_id=_ids,
        epoch=_epochs,
        epoch_len=st.integers(1, 2**64 - 1),
        next_batch_index=_ids,
        buffer_depth=_u16,
        admitted=st.integers(0, 2),
    ),
    _announces(),
    st.builds(Ack, consumer_id=_ids, epoch=_epochs, batch_index=_ids),
    st.builds(Heartbeat, consumer_id=_ids, monotonic_millis=_ids),
    st.builds(EpochStart, epoch=_epochs, epoch_len=st.integers(1, 2**64 - 1)),
    st.builds(EpochEnd, epoch=_epochs),
    st.builds(Bye, consumer_id=_ids),
    st.builds(Shutdown),
)


class TestProperties:
    @given(_messages)
    @_lenient
    def test_roundtrip_identity(self, msg):
        assert decode_message(encode_message(msg)) == msg

    @given(st.lists(_messages, min_size=0, max_size=12), st.data())
    @_lenient
    def test_framing_survives_any_chunking(self, messages, data):
        stream = b"".join(encode_message(m) for m in messages)
        decoder = FrameDecoder()
        out = []
        pos = 0
        while pos < len(stream):
            step = data.draw(st.integers(1, max(1, len(stream) - pos)))
            out.extend(decoder.feed(stream[pos : pos + step]))
            pos += step
        assert out == messages
        assert decoder.pending_bytes == 0

    @given(_messages, _messages)
    @_lenient
    def test_decode_never_reads_past_declared_length(self, first, second):
        # The first frame decodes identically no matter what follows it, and
        # a partial frame never produces a message.
        frame = encode_message(first)
        tail = encode_message(second)
        decoder = FrameDecoder()
        out = decoder.feed(frame + tail[: len(tail) // 2])
        assert out == [first]
        out = decoder.feed(tail[len(tail) // 2 :])
        assert out == [second]
        assert decoder.pending_bytes == 0


def test_dtype_sizes():
    assert [d.size for d in DType] == [1, 4, 8, 4, 8]
    with pytest.raises(ValueError):
        DType(200)
