"""Standalone codec for the batchsocket wire format and segment layout.

This package deliberately reimplements the ABI instead of importing the
native library: the byte formats are the contract, and this module is the
single place they are spelled out on the facade side.

Wire frame: ``u32le body_length | u8 kind | body``, integers little-endian,
strings u16-length-prefixed UTF-8. Message kinds 1..9: Join, Welcome,
Announce, Ack, Heartbeat, EpochStart, EpochEnd, Bye, Shutdown.

Segment: 80-byte header then payload. Header fields: magic "TSKB", version
u16, dtype u8, ndim u8, epoch u32, checksum u32 (CRC-32 of payload),
batch_index u64, byte_len u64, shape u32[8], reserved u8[16].

Pair encoding (this facade's convention, layered on the ABI): the payload is
announced as a flat u8 blob (ndim=1); the header's reserved region carries
``"PR01" | input_dtype u8 | input_ndim u8 | target_dtype u8 | target_ndim u8
| input_byte_len u64`` and the unused shape slots hold the input dims
followed by the target dims.
"""

from __future__ import annotations

import struct
import sys
import threading
import zlib
from dataclasses import dataclass
from multiprocessing import resource_tracker, shared_memory

PROTOCOL_VERSION = 1
HEADER_SIZE = 80
MAGIC = b"TSKB"
SEGMENT_VERSION = 1
PAIR_MAGIC = b"PR01"

JOIN, WELCOME, ANNOUNCE, ACK, HEARTBEAT, EPOCH_START, EPOCH_END, BYE, SHUTDOWN = range(1, 10)

ADMIT_WAIT, ADMIT_RUBBERBAND, ADMIT_IMMEDIATE = 0, 1, 2

# dtype codes shared with the wire: u8, i32, i64, f32, f64
DTYPE_TO_NUMPY = {0: "uint8", 1: "int32", 2: "int64", 3: "float32", 4: "float64"}
NUMPY_TO_DTYPE = {v: k for k, v in DTYPE_TO_NUMPY.items()}
DTYPE_SIZE = {0: 1, 1: 4, 2: 8, 3: 4, 4: 8}

_HEADER = struct.Struct("<4sHBBIIQQ8I16s")
assert _HEADER.size == HEADER_SIZE


class AbiError(ValueError):
    pass


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Join_:
    consumer_id: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Welcome_:
    consumer_id: int
    epoch: int
    epoch_len: int
    next_batch_index: int
    buffer_depth: int
    admitted: int


@dataclass(frozen=True)
class Announce_:
    epoch: int
    batch_index: int
    segment_name: str
    byte_len: int
    dtype: int
    shape: tuple
    checksum: int


@dataclass(frozen=True)
class Ack_:
    consumer_id: int
    epoch: int
    batch_index: int


@dataclass(frozen=True)
class Heartbeat_:
    consumer_id: int
    monotonic_millis: int


@dataclass(frozen=True)
class EpochStart_:
    epoch: int
    epoch_len: int


@dataclass(frozen=True)
class EpochEnd_:
    epoch: int


@dataclass(frozen=True)
class Bye_:
    consumer_id: int


@dataclass(frozen=True)
class Shutdown_:
    pass


def _frame(kind: int, body: bytes) -> bytes:
    return struct.pack("<IB", 1 + len(body), kind) + body


def encode(msg) -> bytes:
    if isinstance(msg, Join_):
        return _frame(JOIN, struct.pack("<QH", msg.consumer_id, msg.protocol_version))
    if isinstance(msg, Welcome_):
        return _frame(
            WELCOME,
            struct.pack(
                "<QIQQHB",
                msg.consumer_id,
                msg.epoch,
                msg.epoch_len,
                msg.next_batch_index,
                msg.buffer_depth,
                msg.admitted,
            ),
        )
    if isinstance(msg, Announce_):
        name = msg.segment_name.encode()
        return _frame(
            ANNOUNCE,
            struct.pack("<IQ", msg.epoch, msg.batch_index)
            + struct.pack("<H", len(name))
            + name
            + struct.pack("<QBB", msg.byte_len, msg.dtype, len(msg.shape))
            + struct.pack(f"<{len(msg.shape)}Q", *msg.shape)
            + struct.pack("<I", msg.checksum),
        )
    if isinstance(msg, Ack_):
        return _frame(ACK, struct.pack("<QIQ", msg.consumer_id, msg.epoch, msg.batch_index))
    if isinstance(msg, Heartbeat_):
        return _frame(HEARTBEAT, struct.pack("<QQ", msg.consumer_id, msg.monotonic_millis))
    if isinstance(msg, EpochStart_):
        return _frame(EPOCH_START, struct.pack("<IQ", msg.epoch, msg.epoch_len))
    if isinstance(msg, EpochEnd_):
        return _frame(EPOCH_END, struct.pack("<I", msg.epoch))
    if isinstance(msg, Bye_):
        return _frame(BYE, struct.pack("<Q", msg.consumer_id))
    if isinstance(msg, Shutdown_):
        return _frame(SHUTDOWN, b"")
    raise AbiError(f"not a message: {msg!r}")


def decode(frame: bytes):
    if len(frame) < 5:
        raise AbiError("truncated frame")
    kind = frame[4]
    body = frame[5:]
    if kind == JOIN:
        return Join_(*struct.unpack("<QH", body))
    if kind == WELCOME:
        return Welcome_(*struct.unpack("<QIQQHB", body))
    if kind == ANNOUNCE:
        epoch, batch_index = struct.unpack_from("<IQ", body, 0)
        (nlen,) = struct.unpack_from("<H", body, 12)
        name = body[14 : 14 + nlen].decode()
        off = 14 + nlen
        byte_len, dtype, ndim = struct.unpack_from("<QBB", body, off)
        off += 10
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        (crc,) = struct.unpack_from("<I", body, off)
        return Announce_(epoch, batch_index, name, byte_len, dtype, tuple(shape), crc)
    if kind == ACK:
        return Ack_(*struct.unpack("<QIQ", body))
    if kind == HEARTBEAT:
        return Heartbeat_(*struct.unpack("<QQ", body))
    if kind == EPOCH_START:
        return EpochStart_(*struct.unpack("<IQ", body))
    if kind == EPOCH_END:
        return EpochEnd_(*struct.unpack("<I", body))
    if kind == BYE:
        return Bye_(*struct.unpack("<Q", body))
    if kind == SHUTDOWN:
        return Shutdown_()
    raise AbiError(f"unknown kind {kind}")


class StreamDecoder:
    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 4:
            (length,) = struct.unpack_from("<I", self._buf, 0)
            if len(self._buf) < 4 + length:
                break
            frame = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            out.append(decode(frame))
        return out


# -- segments -------------------------------------------------------------------

_owned: set[str] = set()
_tracker_lock = threading.Lock()


def create_segment(name: str, epoch: int, batch_index: int, dtype: int,
                   shape: tuple, payload, reserved: bytes = b"",
                   extra_slots: tuple = ()) -> shared_memory.SharedMemory:
    """Write one sealed segment. ``extra_slots`` fills the shape slots beyond
    ``ndim`` (the pair encoding stores input/target dims there)."""
    mv = memoryview(payload).cast("B")
    shm = shared_memory.SharedMemory(name=name, create=True, size=HEADER_SIZE + len(mv))
    with _tracker_lock:
        _owned.add(name)
    slots = list(shape) + list(extra_slots)
    if len(slots) > 8:
        raise AbiError("shape and extra slots exceed the 8 header slots")
    slots += [0] * (8 - len(slots))
    _HEADER.pack_into(
        shm.buf, 0, MAGIC, SEGMENT_VERSION, dtype, len(shape), epoch,
        crc32(mv), batch_index, len(mv), *slots, reserved.ljust(16, b"\x00"),
    )
    if len(mv):
        shm.buf[HEADER_SIZE : HEADER_SIZE + len(mv)] = mv
    return shm


def release_segment(shm: shared_memory.SharedMemory, name: str) -> None:
    with _tracker_lock:
        _owned.discard(name)
        try:
            shm.close()
            shm.unlink()
        except FileNotFoundError:
            pass


def attach_segment(name: str) -> shared_memory.SharedMemory:
    if sys.version_info >= (3, 13):
        return shared_memory.SharedMemory(name=name, track=False)
    with _tracker_lock:
        shm = shared_memory.SharedMemory(name=name)
        owned = name in _owned
    if not owned:
        try:
            resource_tracker.unregister(shm._name, "shared_memory")
        except Exception:
            pass
    return shm


@dataclass(frozen=True)
class SegmentHeader:
    epoch: int
    batch_index: int
    dtype: int
    shape: tuple
    byte_len: int
    checksum: int
    raw_slots: tuple  # all 8 shape slots, including unused ones
    reserved: bytes


def read_header(buf) -> SegmentHeader:
    magic, version, dtype, ndim, epoch, crc, batch_index, byte_len, *rest = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC or version != SEGMENT_VERSION:
        raise AbiError(f"bad segment header: magic={magic!r} version={version}")
    slots = tuple(int(d) for d in rest[:8])
    return SegmentHeader(
        epoch, batch_index, dtype, slots[:ndim], byte_len, crc, slots, rest[8]
    )


def pack_pair_reserved(in_dtype: int, in_ndim: int, tg_dtype: int, tg_ndim: int,
                       input_byte_len: int) -> bytes:
    return PAIR_MAGIC + struct.pack("<BBBBQ", in_dtype, in_ndim, tg_dtype, tg_ndim,
                                    input_byte_len)


def unpack_pair(header: SegmentHeader):
    """((in_dtype, in_shape), (tg_dtype, tg_shape), input_byte_len), or None
    when the segment does not carry the pair encoding."""
    if header.reserved[:4] != PAIR_MAGIC:
        return None
    in_dtype, in_ndim, tg_dtype, tg_ndim, in_bytes = struct.unpack_from(
        "<BBBBQ", header.reserved, 4
    )
    slots = header.raw_slots
    in_shape = tuple(slots[1 : 1 + in_ndim])
    tg_shape = tuple(slots[1 + in_ndim : 1 + in_ndim + tg_ndim])
    return (in_dtype, in_shape), (tg_dtype, tg_shape), in_bytes
