"""SharedLoader: the consumer-side drop-in iterator.

One ``for`` pass yields ``(input, target)`` numpy array pairs for exactly one
epoch, then stops; wrap it in your own epoch loop as you would a conventional
loader. Arrays are zero-copy views into the shared segment backing the batch;
they stay valid until the next iteration step. After the producer shuts down,
``finished`` is True and further iteration yields nothing.
"""

from __future__ import annotations

import os
import socket
import threading
import time

import numpy as np

from . import abi
from .config import endpoints_from_env, parse_endpoint


class StreamError(RuntimeError):
    """Connection to the producer was lost mid-stream."""


class _MappedBatch:
    def __init__(self, shm, header):
        self.shm = shm
        self.header = header
        self.view = memoryview(shm.buf)[
            abi.HEADER_SIZE : abi.HEADER_SIZE + header.byte_len
        ].toreadonly()

    def arrays(self):
        pair = abi.unpack_pair(self.header)
        if pair is None:
            arr = np.frombuffer(self.view, dtype=abi.DTYPE_TO_NUMPY[self.header.dtype])
            return arr.reshape(self.header.shape), None
        (in_dtype, in_shape), (tg_dtype, tg_shape), in_bytes = pair
        inp = np.frombuffer(self.view[:in_bytes], dtype=abi.DTYPE_TO_NUMPY[in_dtype])
        tgt = np.frombuffer(self.view[in_bytes:], dtype=abi.DTYPE_TO_NUMPY[tg_dtype])
        return inp.reshape(in_shape), tgt.reshape(tg_shape)

    def close(self) -> bool:
        """True when the mapping was dropped; False while arrays still pin it."""
        try:
            self.view.release()
        except BufferError:
            return False  # caller still holds an array view into the segment
        try:
            self.shm.close()
        except BufferError:
            return False
        return True


class SharedLoader:
    """Blocking batch iterator over the shared stream."""

    def __init__(
        self,
        broadcast: str | None = None,
        aggregate: str | None = None,
        consumer_id: int | None = None,
        heartbeat_interval_s: float = 1.0,
        connect_timeout_s: float = 20.0,
    ):
        self._broadcast_ep, self._aggregate_ep = endpoints_from_env(broadcast, aggregate)
        self.consumer_id = consumer_id if consumer_id is not None else os.getpid()
        self._hb_interval = heartbeat_interval_s
        self._connect_timeout = connect_timeout_s
        self._lock = threading.Condition()
        self._queue: list = []  # Announce_ / "epoch-end" / "shutdown"
        self._welcome = None
        self._prewelcome: list = []
        self._connected = False
        self._waiting = False
        self._next_index = 0
        self._replay_frontier = 0
        self._current_epoch = 0
        self._lost = False
        self.finished = False
        self._mapped: _MappedBatch | None = None
        self._retired: list = []
        self._send_lock = threading.Lock()
        self._bcast = None
        self._agg = None

    # -- connection --------------------------------------------------------

    def _connect(self) -> None:
        if self._connected:
            return
        self._bcast = _dial(self._broadcast_ep, self._connect_timeout)
        self._bcast.sendall(
            abi.encode(abi.Heartbeat_(self.consumer_id, _mono_ms()))
        )
        self._agg = _dial(self._aggregate_ep, self._connect_timeout)
        self._agg.sendall(abi.encode(abi.Join_(self.consumer_id)))

        threading.Thread(target=self._read_loop, args=(self._bcast, "bcast"), daemon=True).start()
        threading.Thread(target=self._read_loop, args=(self._agg, "priv"), daemon=True).start()
        with self._lock:
            ok = self._lock.wait_for(
                lambda: self._welcome is not None or self._lost,
                timeout=self._connect_timeout,
            )
            if not ok or self._welcome is None:
                raise StreamError("no Welcome from producer")
        threading.Thread(target=self._heartbeat_loop, daemon=True).start()
        self._connected = True

    def _read_loop(self, sock, source: str) -> None:
        decoder = abi.StreamDecoder()
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                for msg in decoder.feed(data):
                    self._dispatch(source, msg)
        except OSError:
            pass
        with self._lock:
            if source == "bcast" and not self.finished:
                self._lost = True
            self._lock.notify_all()

    def _dispatch(self, source: str, msg) -> None:
        with self._lock:
            if self._welcome is None:
                # Broadcast traffic can outrun the Welcome on the private
                # socket; buffer it until admission parameters are known.
                if isinstance(msg, abi.Welcome_) and source == "priv":
                    self._welcome = msg
                    self._current_epoch = msg.epoch
                    self._next_index = 0
                    self._replay_frontier = (
                        msg.next_batch_index
                        if msg.admitted == abi.ADMIT_RUBBERBAND
                        else 0
                    )
                    self._waiting = msg.admitted == abi.ADMIT_WAIT
                    buffered, self._prewelcome = self._prewelcome, []
                    for src, m in buffered:
                        self._dispatch_locked(src, m)
                    self._lock.notify_all()
                elif len(self._prewelcome) < 256:
                    self._prewelcome.append((source, msg))
                return
            self._dispatch_locked(source, msg)

    def _dispatch_locked(self, source: str, msg) -> None:
        if isinstance(msg, abi.Announce_):
            if self._waiting:
                return
            if msg.epoch != self._current_epoch:
                return
            in_replay = self._next_index < self._replay_frontier
            if in_replay and source != "priv":
                return
            if msg.batch_index != self._next_index:
                return  # duplicate of a replayed batch
            self._queue.append(msg)
            self._next_index += 1
            self._lock.notify_all()
        elif isinstance(msg, abi.EpochStart_):
            if self._waiting and msg.epoch == self._current_epoch:
                self._waiting = False
                self._next_index = 0
            elif not self._waiting and msg.epoch > self._current_epoch:
                self._current_epoch = msg.epoch
                self._next_index = 0
                self._replay_frontier = 0  # replay applies to the join epoch only
        elif isinstance(msg, abi.EpochEnd_):
            if not self._waiting and msg.epoch == self._current_epoch:
                self._queue.append("epoch-end")
                self._lock.notify_all()
        elif isinstance(msg, abi.Shutdown_):
            self._queue.append("shutdown")
            self._lock.notify_all()

    def _heartbeat_loop(self) -> None:
        while not self.finished and not self._lost:
            try:
                with self._send_lock:
                    self._agg.sendall(
                        abi.encode(abi.Heartbeat_(self.consumer_id, _mono_ms()))
                    )
            except OSError:
                return
            time.sleep(self._hb_interval)

    # -- iteration -----------------------------------------------------------

    def __iter__(self):
        self._connect()
        while True:
            with self._lock:
                self._lock.wait_for(lambda: self._queue or self._lost)
                if self._lost and not self._queue:
                    self.finished = True
                    raise StreamError("broadcast connection lost")
                item = self._queue.pop(0)
            if item == "epoch-end":
                self._release_current()
                return
            if item == "shutdown":
                self._release_current()
                self.finished = True
                self._close()
                return
            yield self._fetch(item)

    def _fetch(self, announce):
        self._retire_mappings()
        shm = abi.attach_segment(announce.segment_name)
        header = abi.read_header(shm.buf)
        batch = _MappedBatch(shm, header)
        with self._send_lock:
            self._agg.sendall(
                abi.encode(
                    abi.Ack_(self.consumer_id, announce.epoch, announce.batch_index)
                )
            )
        self._mapped = batch
        return batch.arrays()

    def _retire_mappings(self) -> None:
        # The caller's loop variables still reference the previous arrays
        # when the next batch is fetched; mappings unmap as soon as those
        # references are gone.
        if self._mapped is not None:
            self._retired.append(self._mapped)
            self._mapped = None
        self._retired = [m for m in self._retired if not m.close()]

    def _release_current(self) -> None:
        self._retire_mappings()

    def close(self) -> None:
        self.finished = True
        self._release_current()
        if self._agg is not None:
            try:
                with self._send_lock:
                    self._agg.sendall(abi.encode(abi.Bye_(self.consumer_id)))
            except OSError:
                pass
        self._close()

    def _close(self) -> None:
        for sock in (self._bcast, self._agg):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass


def _dial(endpoint: str, timeout: float):
    family, addr = parse_endpoint(endpoint)
    deadline = time.monotonic() + timeout
    while True:
        sock = socket.socket(
            socket.AF_UNIX if family == "unix" else socket.AF_INET, socket.SOCK_STREAM
        )
        try:
            sock.settimeout(2.0)
            sock.connect(addr)
            sock.settimeout(None)
            if family == "tcp":
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            sock.close()
            if time.monotonic() > deadline:
                raise StreamError(f"cannot reach producer at {endpoint}: {exc}") from exc
            time.sleep(0.05)


def _mono_ms() -> int:
    return int(time.monotonic() * 1000)
