"""Control-plane message set and binary framing.

Every message travels as one self-delimiting frame::

    u32le body_length | u8 kind | body

where ``body_length`` counts the kind byte plus the body. All integers are
little-endian and fixed width; strings are a u16 length followed by UTF-8
bytes. The layout is normative: producers and consumers written in any
language interoperate as long as they emit these exact bytes.

Functions here are pure and thread-safe.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

PROTOCOL_VERSION = 1

# Frames are tiny (largest valid Announce is well under 1 KiB); anything
# bigger is garbage and rejected before allocation.
MAX_FRAME_BODY = 65536

MAX_SEGMENT_NAME = 255
MAX_NDIM = 8


class EncodeError(ValueError):
    """Message violates a wire invariant and cannot be framed."""


class DecodeError(ValueError):
    """Frame bytes are not a valid message.

    Carries the byte offset at which decoding failed and a cause string.
    """

    def __init__(self, offset: int, cause: str):
        super().__init__(f"decode error at offset {offset}: {cause}")
        self.offset = offset
        self.cause = cause


class DType(IntEnum):
    """Transport-level element types of batch payloads."""

    U8 = 0
    I32 = 1
    I64 = 2
    F32 = 3
    F64 = 4

    @property
    def size(self) -> int:
        return _DTYPE_SIZES[self]

    @property
    def numpy_name(self) -> str:
        return _DTYPE_NUMPY[self]


_DTYPE_SIZES = {DType.U8: 1, DType.I32: 4, DType.I64: 8, DType.F32: 4, DType.F64: 8}
_DTYPE_NUMPY = {
    DType.U8: "uint8",
    DType.I32: "int32",
    DType.I64: "int64",
    DType.F32: "float32",
    DType.F64: "float64",
}


@dataclass(frozen=True)
class Join:
    consumer_id: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Welcome:
    consumer_id: int
    epoch: int
    epoch_len: int
    next_batch_index: int
    buffer_depth: int
    admitted: int  # 0=wait-for-next-epoch, 1=rubberband-admitted, 2=immediate


@dataclass(frozen=True)
class Announce:
    epoch: int
    batch_index: int
    segment_name: str
    byte_len: int
    dtype: DType
    shape: tuple[int, ...]
    checksum: int


@dataclass(frozen=True)
class Ack:
    consumer_id: int
    epoch: int
    batch_index: int


@dataclass(frozen=True)
class Heartbeat:
    consumer_id: int
    monotonic_millis: int


@dataclass(frozen=True)
class EpochStart:
    epoch: int
    epoch_len: int


@dataclass(frozen=True)
class EpochEnd:
    epoch: int


@dataclass(frozen=True)
class Bye:
    consumer_id: int


@dataclass(frozen=True)
class Shutdown:
    pass


ControlMessage = Union[
    Join, Welcome, Announce, Ack, Heartbeat, EpochStart, EpochEnd, Bye, Shutdown
]

KIND_OF = {
    Join: 1,
    Welcome: 2,
    Announce: 3,
    Ack: 4,
    Heartbeat: 5,
    EpochStart: 6,
    EpochEnd: 7,
    Bye: 8,
    Shutdown: 9,
}

ADMIT_WAIT = 0
ADMIT_RUBBERBAND = 1
ADMIT_IMMEDIATE = 2

_LEN = struct.Struct("<I")
_JOIN = struct.Struct("<QH")
_WELCOME = struct.Struct("<QIQQHB")
_ACK = struct.Struct("<QIQ")
_HEARTBEAT = struct.Struct("<QQ")
_EPOCH_START = struct.Struct("<IQ")
_EPOCH_END = struct.Struct("<I")
_BYE = struct.Struct("<Q")
_ANNOUNCE_HEAD = struct.Struct("<IQ")  # epoch, batch_index
_ANNOUNCE_TAIL = struct.Struct("<QBB")  # byte_len, dtype, ndim


def checksum(payload: bytes | bytearray | memoryview) -> int:
    """CRC-32 (IEEE polynomial) of the payload, as an unsigned 32-bit value."""
    return zlib.crc32(payload) & 0xFFFFFFFF


def _shape_bytes(shape: tuple[int, ...], dtype: DType) -> int:
    n = 1
    for dim in shape:
        n *= dim
    return n * dtype.size


def _check_announce(msg: Announce) -> str | None:
    name = msg.segment_name.encode("utf-8")
    if not name:
        return "empty segment_name"
    if len(name) > MAX_SEGMENT_NAME:
        return f"segment_name is {len(name)} bytes (max {MAX_SEGMENT_NAME})"
    if len(msg.shape) > MAX_NDIM:
        return f"ndim {len(msg.shape)} exceeds {MAX_NDIM}"
    try:
        dtype = DType(msg.dtype)
    except ValueError:
        return f"unknown dtype code {msg.dtype}"
    if _shape_bytes(msg.shape, dtype) != msg.byte_len:
        return "shape/dtype product does not match byte_len"
    return None


def encode_message(msg: ControlMessage) -> bytes:
    """Frame a control message as bytes ready for the socket."""
    kind = KIND_OF.get(type(msg))
    if kind is None:
        raise EncodeError(f"not a control message: {type(msg).__name__}")

    if isinstance(msg, Join):
        body = _JOIN.pack(msg.consumer_id, msg.protocol_version)
    elif isinstance(msg, Welcome):
        body = _WELCOME.pack(
            msg.consumer_id,
            msg.epoch,
            msg.epoch_len,
            msg.next_batch_index,
            msg.buffer_depth,
            msg.admitted,
        )
    elif isinstance(msg, Announce):
        problem = _check_announce(msg)
        if problem is not None:
            raise EncodeError(problem)
        name = msg.segment_name.encode("utf-8")
        body = b"".join(
            (
                _ANNOUNCE_HEAD.pack(msg.epoch, msg.batch_index),
                struct.pack("<H", len(name)),
                name,
                _ANNOUNCE_TAIL.pack(msg.byte_len, msg.dtype, len(msg.shape)),
                struct.pack(f"<{len(msg.shape)}Q", *msg.shape) if msg.shape else b"",
                struct.pack("<I", msg.checksum),
            )
        )
    elif isinstance(msg, Ack):
        body = _ACK.pack(msg.consumer_id, msg.epoch, msg.batch_index)
    elif isinstance(msg, Heartbeat):
        body = _HEARTBEAT.pack(msg.consumer_id, msg.monotonic_millis)
    elif isinstance(msg, EpochStart):
        if msg.epoch_len <= 0:
            raise EncodeError("epoch_len must be > 0")
        body = _EPOCH_START.pack(msg.epoch, msg.epoch_len)
    elif isinstance(msg, EpochEnd):
        body = _EPOCH_END.pack(msg.epoch)
    elif isinstance(msg, Bye):
        body = _BYE.pack(msg.consumer_id)
    else:  # Shutdown
        body = b""

    return _LEN.pack(1 + len(body)) + bytes([kind]) + body


def _unpack(fmt: struct.Struct, frame: bytes, offset: int, what: str):
    if offset + fmt.size > len(frame):
        raise DecodeError(offset, f"truncated {what}")
    return fmt.unpack_from(frame, offset)


def decode_message(frame: bytes) -> ControlMessage:
    """Decode one complete frame (length prefix included). Inverse of encode."""
    if len(frame) < 4:
        raise DecodeError(0, "truncated length prefix")
    (length,) = _LEN.unpack_from(frame, 0)
    if length == 0:
        raise DecodeError(4, "missing kind byte (zero-length body)")
    if length > MAX_FRAME_BODY:
        raise DecodeError(0, f"declared length {length} exceeds {MAX_FRAME_BODY}")
    if len(frame) != 4 + length:
        raise DecodeError(4, f"frame is {len(frame)} bytes, declared {4 + length}")
    kind = frame[4]
    body_end = 4 + length

    if kind == KIND_OF[Join]:
        cid, ver = _unpack(_JOIN, frame, 5, "Join")
        msg: ControlMessage = Join(cid, ver)
        expected = 5 + _JOIN.size
    elif kind == KIND_OF[Welcome]:
        cid, epoch, epoch_len, nbi, depth, admitted = _unpack(_WELCOME, frame, 5, "Welcome")
        if epoch_len == 0:
            raise DecodeError(13, "epoch_len must be > 0")
        if admitted > 2:
            raise DecodeError(5 + _WELCOME.size - 1, f"unknown admitted code {admitted}")
        msg = Welcome(cid, epoch, epoch_len, nbi, depth, admitted)
        expected = 5 + _WELCOME.size
    elif kind == KIND_OF[Announce]:
        epoch, batch_index = _unpack(_ANNOUNCE_HEAD, frame, 5, "Announce")
        off = 5 + _ANNOUNCE_HEAD.size
        (name_len,) = _unpack(struct.Struct("<H"), frame, off, "segment_name length")
        off += 2
        if name_len > MAX_SEGMENT_NAME:
            raise DecodeError(off - 2, f"segment_name is {name_len} bytes (max {MAX_SEGMENT_NAME})")
        if off + name_len > len(frame):
            raise DecodeError(off, "truncated segment_name")
        try:
            name = frame[off : off + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(off, f"segment_name is not UTF-8: {exc}") from None
        off += name_len
        byte_len, dtype_code, ndim = _unpack(_ANNOUNCE_TAIL, frame, off, "Announce tail")
        off += _ANNOUNCE_TAIL.size
        if ndim > MAX_NDIM:
            raise DecodeError(off - 1, f"ndim {ndim} exceeds {MAX_NDIM}")
        shape = _unpack(struct.Struct(f"<{ndim}Q"), frame, off, "shape") if ndim else ()
        off += 8 * ndim
        (crc,) = _unpack(struct.Struct("<I"), frame, off, "checksum")
        try:
            dtype = DType(dtype_code)
        except ValueError:
            raise DecodeError(off - 8 * ndim - 2, f"unknown dtype code {dtype_code}") from None
        msg = Announce(epoch, batch_index, name, byte_len, dtype, tuple(shape), crc)
        problem = _check_announce(msg)
        if problem is not None:
            raise DecodeError(5, problem)
        expected = off + 4
    elif kind == KIND_OF[Ack]:
        cid, epoch, batch_index = _unpack(_ACK, frame, 5, "Ack")
        msg = Ack(cid, epoch, batch_index)
        expected = 5 + _ACK.size
    elif kind == KIND_OF[Heartbeat]:
        cid, ms = _unpack(_HEARTBEAT, frame, 5, "Heartbeat")
        msg = Heartbeat(cid, ms)
        expected = 5 + _HEARTBEAT.size
    elif kind == KIND_OF[EpochStart]:
        epoch, epoch_len = _unpack(_EPOCH_START, frame, 5, "EpochStart")
        if epoch_len == 0:
            raise DecodeError(9, "epoch_len must be > 0")
        msg = EpochStart(epoch, epoch_len)
        expected = 5 + _EPOCH_START.size
    elif kind == KIND_OF[EpochEnd]:
        (epoch,) = _unpack(_EPOCH_END, frame, 5, "EpochEnd")
        msg = EpochEnd(epoch)
        expected = 5 + _EPOCH_END.size
    elif kind == KIND_OF[Bye]:
        (cid,) = _unpack(_BYE, frame, 5, "Bye")
        msg = Bye(cid)
        expected = 5 + _BYE.size
    elif kind == KIND_OF[Shutdown]:
        msg = Shutdown()
        expected = 5
    else:
        raise DecodeError(4, f"unknown message kind {kind}")

    if expected != body_end:
        raise DecodeError(expected, f"{length - (expected - 4)} trailing bytes in body")
    return msg


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, get complete messages out.

    The framing self-delimits, so the resulting message sequence does not
    depend on how the byte stream was chunked.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf.extend(data)
        out: list[ControlMessage] = []
        while True:
            if len(self._buf) < 4:
                return out
            (length,) = _LEN.unpack_from(self._buf, 0)
            if length > MAX_FRAME_BODY:
                raise DecodeError(0, f"declared length {length} exceeds {MAX_FRAME_BODY}")
            if len(self._buf) < 4 + length:
                return out
            frame = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            out.append(decode_message(frame))

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
