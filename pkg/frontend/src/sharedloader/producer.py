"""TensorProducer: serve any iterable of (input, target) array pairs.

Usage mirrors a conventional training script with the loader split out::

    producer = TensorProducer(data_loader)
    for _ in range(epochs):
        for _ in producer:   # one pass over the wrapped iterable
            pass
    producer.join()

Each pair is serialized once into a shared-memory segment and announced to
every connected consumer; a batch is released only when all of them have
fetched it. Consumers joining mid-epoch are welcomed for the next epoch.
"""

from __future__ import annotations

import os
import socket
import threading
import time

import numpy as np

from . import abi
from .config import endpoints_from_env


class ProducerClosed(RuntimeError):
    pass


class _Consumer:
    def __init__(self, cid, conn):
        self.cid = cid
        self.conn = conn
        self.bcast = None
        self.admitted = False
        self.waiting_for = None
        self.last_heartbeat = time.monotonic()


class TensorProducer:
    """Wraps a loader-like iterable; iterating it runs one shared epoch."""

    def __init__(
        self,
        data_loader,
        broadcast: str | None = None,
        aggregate: str | None = None,
        buffer_depth: int = 2,
        heartbeat_timeout_s: float = 5.0,
        pause_poll_s: float = 0.05,
    ):
        if not hasattr(data_loader, "__len__"):
            raise TypeError("data_loader must have a length (batches per epoch)")
        self._loader = data_loader
        self._broadcast_ep, self._aggregate_ep = endpoints_from_env(broadcast, aggregate)
        self._depth = buffer_depth
        self._hb_timeout = heartbeat_timeout_s
        self._poll = pause_poll_s
        self._epoch = 0
        self._announced_in_epoch = 0
        self._seq = 0
        self._lock = threading.Condition()
        self._consumers: dict[int, _Consumer] = {}
        self._monitors: list = []
        self._pending: dict[int, dict] = {}  # seq -> {shm, name, acks}
        self._closed = False
        self._started = False
        self._threads: list[threading.Thread] = []
        self._listeners: list = []

    # -- server plumbing ---------------------------------------------------

    def _start(self) -> None:
        if self._started:
            return
        self._started = True
        for endpoint, handler in (
            (self._broadcast_ep, self._accept_broadcast),
            (self._aggregate_ep, self._accept_aggregate),
        ):
            listener = _listen(endpoint)
            self._listeners.append(listener)
            t = threading.Thread(target=handler, args=(listener,), daemon=True)
            t.start()
            self._threads.append(t)
        sweeper = threading.Thread(target=self._sweep_loop, daemon=True)
        sweeper.start()
        self._threads.append(sweeper)

    def _accept_broadcast(self, listener) -> None:
        while True:
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._broadcast_reader, args=(sock,), daemon=True
            ).start()

    def _broadcast_reader(self, sock) -> None:
        decoder = abi.StreamDecoder()
        cid = None
        try:
            while True:
                data = sock.recv(4096)
                if not data:
                    break
                for msg in decoder.feed(data):
                    if cid is None and isinstance(msg, abi.Heartbeat_):
                        cid = msg.consumer_id
                        with self._lock:
                            if cid == 0:
                                self._monitors.append(sock)
                            elif cid in self._consumers:
                                self._consumers[cid].bcast = sock
                            else:
                                self._consumers[cid] = rec = _Consumer(cid, None)
                                rec.bcast = sock
                            self._lock.notify_all()
        except OSError:
            pass
        finally:
            with self._lock:
                if cid is not None and cid in self._consumers:
                    self._drop(cid)

    def _accept_aggregate(self, listener) -> None:
        while True:
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._aggregate_reader, args=(sock,), daemon=True
            ).start()

    def _aggregate_reader(self, sock) -> None:
        decoder = abi.StreamDecoder()
        cid = None
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                for msg in decoder.feed(data):
                    cid = self._handle(sock, msg, cid)
        except OSError:
            pass
        finally:
            with self._lock:
                if cid is not None and cid in self._consumers:
                    self._drop(cid)

    def _handle(self, sock, msg, cid):
        with self._lock:
            if isinstance(msg, abi.Join_):
                if msg.protocol_version != abi.PROTOCOL_VERSION:
                    sock.close()
                    return cid
                cid = msg.consumer_id
                rec = self._consumers.get(cid)
                if rec is None:
                    rec = self._consumers[cid] = _Consumer(cid, sock)
                else:
                    rec.conn = sock
                rec.last_heartbeat = time.monotonic()
                epoch_len = max(1, len(self._loader))
                if self._announced_in_epoch == 0:
                    rec.admitted = True
                    welcome = abi.Welcome_(cid, self._epoch, epoch_len, 0, self._depth, abi.ADMIT_IMMEDIATE)
                else:
                    rec.waiting_for = self._epoch + 1
                    welcome = abi.Welcome_(cid, self._epoch + 1, epoch_len, 0, self._depth, abi.ADMIT_WAIT)
                try:
                    sock.sendall(abi.encode(welcome))
                except OSError:
                    self._drop(cid)
                self._lock.notify_all()
            elif isinstance(msg, abi.Ack_):
                rec = self._consumers.get(msg.consumer_id)
                if rec is not None:
                    rec.last_heartbeat = time.monotonic()
                seq = msg.epoch * max(1, len(self._loader)) + msg.batch_index
                entry = self._pending.get(seq)
                if entry is not None:
                    entry["acks"].discard(msg.consumer_id)
                    if not entry["acks"]:
                        abi.release_segment(entry["shm"], entry["name"])
                        del self._pending[seq]
                        self._lock.notify_all()
            elif isinstance(msg, abi.Heartbeat_):
                rec = self._consumers.get(msg.consumer_id)
                if rec is not None:
                    rec.last_heartbeat = time.monotonic()
            elif isinstance(msg, abi.Bye_):
                if msg.consumer_id in self._consumers:
                    self._drop(msg.consumer_id)
        return cid

    def _drop(self, cid) -> None:
        # caller holds the lock
        rec = self._consumers.pop(cid, None)
        if rec is None:
            return
        for seq, entry in list(self._pending.items()):
            entry["acks"].discard(cid)
            if not entry["acks"]:
                abi.release_segment(entry["shm"], entry["name"])
                del self._pending[seq]
        for sock in (rec.conn, rec.bcast):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        self._lock.notify_all()

    def _sweep_loop(self) -> None:
        while not self._closed:
            time.sleep(self._poll)
            now = time.monotonic()
            with self._lock:
                stale = [
                    cid
                    for cid, rec in self._consumers.items()
                    if now - rec.last_heartbeat > self._hb_timeout
                ]
                for cid in stale:
                    self._drop(cid)

    def _send_all(self, payload: bytes) -> None:
        # caller holds the lock
        for rec in list(self._consumers.values()):
            if rec.bcast is None:
                continue
            try:
                rec.bcast.sendall(payload)
            except OSError:
                self._drop(rec.cid)
        for sock in list(self._monitors):
            try:
                sock.sendall(payload)
            except OSError:
                self._monitors.remove(sock)

    # -- the epoch iterator --------------------------------------------------

    def __len__(self) -> int:
        return len(self._loader)

    def __iter__(self):
        if self._closed:
            raise ProducerClosed("join() was already called")
        self._start()
        epoch_len = len(self._loader)
        with self._lock:
            self._lock.wait_for(lambda: any(r.admitted for r in self._consumers.values()))
            self._announced_in_epoch = 0
            self._send_all(abi.encode(abi.EpochStart_(self._epoch, epoch_len)))
            for rec in self._consumers.values():
                if rec.waiting_for == self._epoch:
                    rec.waiting_for = None
                    rec.admitted = True

        for index, batch in enumerate(self._loader):
            if index >= epoch_len:
                break
            self._publish(index, batch)
            yield None

        with self._lock:
            self._send_all(abi.encode(abi.EpochEnd_(self._epoch)))
            self._epoch += 1
            self._announced_in_epoch = 0

    def _publish(self, index: int, batch) -> None:
        inp, target = batch
        inp = np.ascontiguousarray(inp)
        target = np.ascontiguousarray(target)
        try:
            in_dtype = abi.NUMPY_TO_DTYPE[inp.dtype.name]
            tg_dtype = abi.NUMPY_TO_DTYPE[target.dtype.name]
        except KeyError as exc:
            raise TypeError(f"unsupported array dtype: {exc}") from None
        payload = inp.tobytes() + target.tobytes()
        name = f"tsk-{os.getpid()}-{self._epoch}-{index}"
        reserved = abi.pack_pair_reserved(
            in_dtype, inp.ndim, tg_dtype, target.ndim, inp.nbytes
        )
        with self._lock:
            self._lock.wait_for(
                lambda: len(self._pending) < self._depth
                and any(r.admitted for r in self._consumers.values())
            )
            shm = abi.create_segment(
                name,
                self._epoch,
                index,
                0,  # announced as a flat byte blob
                (len(payload),),
                payload,
                reserved=reserved,
                extra_slots=(*inp.shape, *target.shape),
            )
            seq = self._epoch * len(self._loader) + index
            acks = {cid for cid, r in self._consumers.items() if r.admitted}
            self._pending[seq] = {"shm": shm, "name": name, "acks": acks}
            announce = abi.Announce_(
                self._epoch, index, name, len(payload), 0, (len(payload),),
                abi.crc32(payload),
            )
            self._send_all(abi.encode(announce))
            self._announced_in_epoch = index + 1

    def join(self, drain_timeout_s: float = 10.0) -> None:
        """Wait for outstanding acks, broadcast shutdown, and close."""
        if self._closed:
            return
        deadline = time.monotonic() + drain_timeout_s
        with self._lock:
            self._lock.wait_for(lambda: not self._pending, timeout=drain_timeout_s)
            self._send_all(abi.encode(abi.Shutdown_()))
            for seq, entry in list(self._pending.items()):
                abi.release_segment(entry["shm"], entry["name"])
                del self._pending[seq]
            self._closed = True
        for listener in self._listeners:
            try:
                listener.close()
            except OSError:
                pass
        with self._lock:
            for cid in list(self._consumers):
                self._drop(cid)


def _listen(endpoint: str):
    from .config import parse_endpoint

    family, addr = parse_endpoint(endpoint)
    if family == "unix":
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            os.unlink(addr)
        except FileNotFoundError:
            pass
    else:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(addr)
    sock.listen(32)
    return sock
