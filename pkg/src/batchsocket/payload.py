"""Zero-copy data plane: one named shared-memory segment per prepared batch.

A segment is ``80-byte header || payload``. The header layout is part of the
cross-process ABI and must not change shape::

    offset  field
    0       magic "TSKB"
    4       version u16
    6       dtype u8
    7       ndim u8
    8       epoch u32
    12      checksum u32 (CRC-32 of payload)
    16      batch_index u64
    24      byte_len u64
    32      shape u32[8] (unused entries zero)
    64      reserved u8[16] (zero unless a higher-level encoding claims it)

The producer writes each payload exactly once; any number of consumer
processes map the segment read-only. Unlinking (release) removes the name but
mappings taken earlier stay readable, so a consumer holding a view can always
finish reading it.
"""

from __future__ import annotations

import errno
import os
import struct
import sys
import threading
from dataclasses import dataclass
from enum import Enum
from multiprocessing import resource_tracker, shared_memory

from .wire import Announce, DType, checksum as crc32

HEADER_SIZE = 80
MAGIC = b"TSKB"
SEGMENT_VERSION = 1
MAX_NDIM = 8

_HEADER = struct.Struct("<4sHBBIIQQ8I16s")
assert _HEADER.size == HEADER_SIZE

_CREATE_ATTEMPTS = 3


class PayloadError(Exception):
    pass


class StaleHandleError(PayloadError):
    """The named segment no longer exists (released before this map)."""


class CorruptSegmentError(PayloadError):
    """Mapped segment failed magic/version/size/checksum validation."""


class ResourceError(PayloadError):
    """Shared memory could not be allocated."""


class SegmentState(Enum):
    WRITABLE = "writable"
    SEALED = "sealed"
    RELEASED = "released"


@dataclass(frozen=True)
class BatchDescriptor:
    """Identity and metadata of one prepared batch."""

    epoch: int
    batch_index: int
    dtype: DType
    shape: tuple[int, ...]
    byte_len: int
    checksum: int
    segment_name: str

    def announce(self) -> Announce:
        return Announce(
            epoch=self.epoch,
            batch_index=self.batch_index,
            segment_name=self.segment_name,
            byte_len=self.byte_len,
            dtype=self.dtype,
            shape=self.shape,
            checksum=self.checksum,
        )

    @classmethod
    def from_announce(cls, msg: Announce) -> "BatchDescriptor":
        return cls(
            epoch=msg.epoch,
            batch_index=msg.batch_index,
            dtype=msg.dtype,
            shape=msg.shape,
            byte_len=msg.byte_len,
            checksum=msg.checksum,
            segment_name=msg.segment_name,
        )


# Names created (and therefore tracker-registered) by this process. Attaching
# to one of our own must not unregister it, or the tracker count goes wrong.
# The lock makes attach-vs-release ordering atomic for same-process use.
_owned_names: set[str] = set()
_tracker_lock = threading.Lock()


def _attach(name: str) -> shared_memory.SharedMemory:
    """Attach to an existing segment without adopting ownership.

    Before 3.13 the resource tracker registers every attach and would unlink
    live segments when this process exits, so the registration is undone.
    """
    if sys.version_info >= (3, 13):
        return shared_memory.SharedMemory(name=name, track=False)
    with _tracker_lock:
        shm = shared_memory.SharedMemory(name=name)
        owned = name in _owned_names
    if not owned:
        try:
            resource_tracker.unregister(shm._name, "shared_memory")
        except Exception:
            pass
    return shm


class SharedPayload:
    """Producer-side handle of one batch segment."""

    def __init__(self, shm: shared_memory.SharedMemory, segment_name: str, byte_len: int):
        self._shm = shm
        self.segment_name = segment_name
        self.byte_len = byte_len
        self.total_bytes = HEADER_SIZE + byte_len
        self.state = SegmentState.WRITABLE

    def seal(self) -> None:
        if self.state is SegmentState.WRITABLE:
            self.state = SegmentState.SEALED

    def release(self) -> None:
        """Unlink the name and drop the producer mapping. Idempotent."""
        if self.state is SegmentState.RELEASED:
            return
        self.state = SegmentState.RELEASED
        with _tracker_lock:
            _owned_names.discard(self.segment_name)
            try:
                self._shm.close()
                self._shm.unlink()
            except FileNotFoundError:
                pass


def default_name(epoch: int, batch_index: int, pid: int | None = None) -> str:
    pid = os.getpid() if pid is None else pid
    return f"tsk-{pid}-{epoch}-{batch_index}"


def create_segment(
    epoch: int,
    batch_index: int,
    dtype: DType,
    shape: tuple[int, ...],
    data,
    *,
    reserved: bytes = b"",
    name: str | None = None,
) -> tuple[SharedPayload, BatchDescriptor]:
    """Write one batch into a fresh segment, seal it, and describe it.

    ``data`` is any contiguous byte buffer whose length matches
    ``prod(shape) * dtype.size``. The payload bytes are written exactly once
    (a single copy from ``data`` into the mapping).
    """
    if len(shape) > MAX_NDIM:
        raise ValueError(f"ndim {len(shape)} exceeds {MAX_NDIM}")
    if any(dim < 0 or dim > 0xFFFFFFFF for dim in shape):
        raise ValueError(f"shape {shape} has a dimension outside u32 range")
    if len(reserved) > 16:
        raise ValueError("reserved region is 16 bytes")
    mv = memoryview(data).cast("B")
    byte_len = len(mv)
    expected = dtype.size
    for dim in shape:
        expected *= dim
    if expected != byte_len:
        raise ValueError(f"shape/dtype imply {expected} bytes, got {byte_len}")

    base = default_name(epoch, batch_index) if name is None else name
    shm = None
    last_exc: Exception | None = None
    for attempt in range(_CREATE_ATTEMPTS):
        candidate = base if attempt == 0 else f"{base}-{attempt + 1}"
        try:
            shm = shared_memory.SharedMemory(
                name=candidate, create=True, size=HEADER_SIZE + byte_len
            )
            base = candidate
            break
        except FileExistsError as exc:
            last_exc = exc
        except OSError as exc:
            if exc.errno in (errno.ENOSPC, errno.ENOMEM, errno.EMFILE, errno.ENFILE):
                raise ResourceError(f"shared memory exhausted: {exc}") from exc
            raise
    if shm is None:
        raise ResourceError(
            f"segment name collision persisted for {_CREATE_ATTEMPTS} attempts: {last_exc}"
        )
    _owned_names.add(base)

    crc = crc32(mv)
    shape_padded = list(shape) + [0] * (MAX_NDIM - len(shape))
    _HEADER.pack_into(
        shm.buf,
        0,
        MAGIC,
        SEGMENT_VERSION,
        int(dtype),
        len(shape),
        epoch,
        crc,
        batch_index,
        byte_len,
        *shape_padded,
        reserved.ljust(16, b"\x00"),
    )
    if byte_len:
        shm.buf[HEADER_SIZE : HEADER_SIZE + byte_len] = mv

    payload = SharedPayload(shm, base, byte_len)
    payload.seal()
    descriptor = BatchDescriptor(
        epoch=epoch,
        batch_index=batch_index,
        dtype=dtype,
        shape=tuple(shape),
        byte_len=byte_len,
        checksum=crc,
        segment_name=base,
    )
    return payload, descriptor


class BatchView:
    """Read-only consumer view of one mapped batch."""

    def __init__(self, shm: shared_memory.SharedMemory, descriptor: BatchDescriptor, reserved: bytes):
        self._shm = shm
        self.descriptor = descriptor
        self.reserved = reserved
        self._mv = memoryview(shm.buf)[
            HEADER_SIZE : HEADER_SIZE + descriptor.byte_len
        ].toreadonly()
        self._closed = False

    @property
    def data(self) -> memoryview:
        if self._closed:
            raise PayloadError("view is closed")
        return self._mv

    def as_array(self):
        """Zero-copy numpy view. Drop it before closing the view."""
        import numpy as np

        return np.frombuffer(self.data, dtype=self.descriptor.dtype.numpy_name).reshape(
            self.descriptor.shape
        )

    def close(self) -> None:
        """Unmap. Idempotent; reading afterwards is a contract violation."""
        if self._closed:
            return
        self._closed = True
        self._mv.release()
        self._shm.close()

    def __enter__(self) -> "BatchView":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return self.descriptor.byte_len


def map_segment(segment_name: str, *, verify_checksum: bool = False) -> BatchView:
    """Map a sealed segment read-only and parse its header.

    Raises ``StaleHandleError`` when the name is gone (the segment was
    released), ``CorruptSegmentError`` on any header or checksum mismatch.
    """
    try:
        shm = _attach(segment_name)
    except FileNotFoundError:
        raise StaleHandleError(f"segment {segment_name!r} does not exist") from None

    try:
        if shm.size < HEADER_SIZE:
            raise CorruptSegmentError(
                f"segment {segment_name!r} is {shm.size} bytes, below header size"
            )
        (
            magic,
            version,
            dtype_code,
            ndim,
            epoch,
            crc,
            batch_index,
            byte_len,
            *rest,
        ) = _HEADER.unpack_from(shm.buf, 0)
        shape_padded, reserved = rest[:MAX_NDIM], rest[MAX_NDIM]
        if magic != MAGIC:
            raise CorruptSegmentError(f"bad magic {magic!r} in {segment_name!r}")
        if version != SEGMENT_VERSION:
            raise CorruptSegmentError(
                f"segment version {version} != {SEGMENT_VERSION} in {segment_name!r}"
            )
        if ndim > MAX_NDIM:
            raise CorruptSegmentError(f"ndim {ndim} exceeds {MAX_NDIM}")
        try:
            dtype = DType(dtype_code)
        except ValueError:
            raise CorruptSegmentError(f"unknown dtype code {dtype_code}") from None
        shape = tuple(int(d) for d in shape_padded[:ndim])
        expected = dtype.size
        for dim in shape:
            expected *= dim
        if expected != byte_len:
            raise CorruptSegmentError(
                f"header shape {shape} x {dtype.name} implies {expected} bytes, "
                f"header says {byte_len}"
            )
        if shm.size < HEADER_SIZE + byte_len:
            raise CorruptSegmentError(
                f"segment holds {shm.size} bytes, header claims {HEADER_SIZE + byte_len}"
            )
        descriptor = BatchDescriptor(
            epoch=epoch,
            batch_index=batch_index,
            dtype=dtype,
            shape=shape,
            byte_len=byte_len,
            checksum=crc,
            segment_name=segment_name,
        )
        view = BatchView(shm, descriptor, reserved)
    except Exception:
        shm.close()
        raise

    if verify_checksum and crc32(view.data) != crc:
        view.close()
        raise CorruptSegmentError(f"payload checksum mismatch in {segment_name!r}")
    return view


def release_segment(payload: SharedPayload) -> None:
    """Unlink and forget a sealed segment. Double release is a no-op."""
    payload.release()
