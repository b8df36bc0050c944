"""Consumer client: a blocking iterator over the shared batch stream.

``next_batch`` yields mapped views in announce order, acking each batch at
fetch time (the producer releases a segment once every admitted consumer has
fetched it). Heartbeats run on a background thread for as long as the session
lives, including while waiting for the next epoch to start.

Protocol frames are dispatched by the socket reader threads into a bounded
descriptor queue; ``next_batch`` is meant to be called from a single caller
thread (the training loop).
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from .payload import BatchDescriptor, BatchView, StaleHandleError, map_segment
from .transport import FramedConnection, ReaderThread, TransportError, connect_endpoint
from .wire import (
    ADMIT_RUBBERBAND,
    ADMIT_WAIT,
    Ack,
    Announce,
    Bye,
    ControlMessage,
    EpochEnd,
    EpochStart,
    Heartbeat,
    Join,
    PROTOCOL_VERSION,
    Shutdown,
    Welcome,
)

log = logging.getLogger(__name__)


class ConnectError(Exception):
    pass


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class EpochBoundary:
    epoch: int


@dataclass(frozen=True)
class EndOfStream:
    reason: str = "shutdown"


@dataclass
class ConsumerConfig:
    consumer_id: int
    broadcast_endpoint: str
    aggregate_endpoint: str
    queue_capacity: Optional[int] = None  # None: use the producer's buffer depth
    heartbeat_interval_ms: int = 1000
    verify_checksums: bool = False
    connect_timeout_ms: int = 10000

    def __post_init__(self):
        if self.consumer_id < 1:
            raise ValueError("consumer_id must be >= 1 (0 is reserved for observers)")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")


class SessionState(Enum):
    JOINING = "joining"
    WAITING_FOR_EPOCH = "waiting-for-epoch"
    STREAMING = "streaming"
    ENDED = "ended"


class ConsumerSession:
    """Use :func:`connect` to obtain one. Not safe for concurrent callers."""

    def __init__(self, config: ConsumerConfig):
        self.config = config
        self.state = SessionState.JOINING
        self.welcome: Optional[Welcome] = None
        self.current_epoch = 0
        self.epoch_len = 0
        self._next_index = 0
        self._replay_frontier = 0  # broadcast announces resume at this index
        self._queue: list = []  # descriptors and markers, in stream order
        self._queued_descriptors = 0
        self._lock = threading.Condition()
        self._prewelcome: list[tuple[str, ControlMessage]] = []
        self._welcomed = threading.Event()
        self._ended = threading.Event()
        self._end_reason = "shutdown"
        self._shutdown_seen = False
        self._error: Optional[Exception] = None
        self._heartbeats_on = True
        self._bcast: Optional[FramedConnection] = None
        self._priv: Optional[FramedConnection] = None
        self._threads: list[threading.Thread] = []

    # -- wiring ---------------------------------------------------------------

    def _start(self) -> None:
        cfg = self.config
        retry = cfg.connect_timeout_ms / 1000
        try:
            self._bcast = FramedConnection(
                connect_endpoint(cfg.broadcast_endpoint, retry_for=retry)
            )
            self._bcast.send(Heartbeat(cfg.consumer_id, _mono_ms()))
            self._priv = FramedConnection(
                connect_endpoint(cfg.aggregate_endpoint, retry_for=retry)
            )
            self._priv.send(Join(cfg.consumer_id, PROTOCOL_VERSION))
        except (TransportError, OSError) as exc:
            self._close_conns()
            raise ConnectError(f"cannot reach producer: {exc}") from exc

        for conn, source in ((self._bcast, "bcast"), (self._priv, "priv")):
            reader = ReaderThread(
                conn,
                on_message=lambda msg, s=source: self._dispatch(s, msg),
                on_close=lambda s=source: self._on_close(s),
                name=f"consumer-{source}",
            )
            reader.start()
            self._threads.append(reader)

        if not self._welcomed.wait(cfg.connect_timeout_ms / 1000):
            self.close(send_bye=False)
            raise ConnectError("timed out waiting for Welcome")
        if self.state is SessionState.ENDED:
            self.close(send_bye=False)
            if self._error is not None:
                raise self._error
            raise ConnectError(
                f"connection closed before Welcome ({self._end_reason}); "
                "protocol version rejected?"
            )

        hb = threading.Thread(target=self._heartbeat_loop, name="consumer-hb", daemon=True)
        hb.start()
        self._threads.append(hb)

    def _heartbeat_loop(self) -> None:
        interval = self.config.heartbeat_interval_ms / 1000
        while not self._ended.is_set():
            if self._heartbeats_on:
                try:
                    self._priv.send(Heartbeat(self.config.consumer_id, _mono_ms()))
                except OSError:
                    return
            self._ended.wait(interval)

    # -- dispatcher (reader threads) -------------------------------------------

    def _dispatch(self, source: str, msg: ControlMessage) -> None:
        with self._lock:
            if self.state is SessionState.ENDED:
                return
            if self.welcome is None:
                if isinstance(msg, Welcome) and source == "priv":
                    self._apply_welcome(msg)
                    for src, buffered in self._prewelcome:
                        self._dispatch_locked(src, buffered)
                    self._prewelcome.clear()
                    self._welcomed.set()
                else:
                    self._prewelcome.append((source, msg))
                return
            self._dispatch_locked(source, msg)

    def _apply_welcome(self, msg: Welcome) -> None:
        self.welcome = msg
        self.epoch_len = msg.epoch_len
        self.current_epoch = msg.epoch
        if msg.admitted == ADMIT_WAIT:
            self.state = SessionState.WAITING_FOR_EPOCH
        else:
            self.state = SessionState.STREAMING
        self._next_index = 0
        self._replay_frontier = (
            msg.next_batch_index if msg.admitted == ADMIT_RUBBERBAND else 0
        )

    def _dispatch_locked(self, source: str, msg: ControlMessage) -> None:
        if log.isEnabledFor(logging.DEBUG):
            log.debug(
                "dispatch %s %r state=%s epoch=%d next=%d frontier=%d",
                source, msg, self.state.value, self.current_epoch,
                self._next_index, self._replay_frontier,
            )
        if isinstance(msg, Announce):
            self._on_announce(source, msg)
        elif isinstance(msg, EpochStart):
            if self.state is SessionState.WAITING_FOR_EPOCH and msg.epoch == self.current_epoch:
                self.state = SessionState.STREAMING
                self._next_index = 0
            elif self.state is SessionState.STREAMING and msg.epoch > self.current_epoch:
                self.current_epoch = msg.epoch
                self._next_index = 0
                # replay is a join-epoch phase only; a stale frontier would
                # make this epoch's broadcasts look like replay duplicates
                self._replay_frontier = 0
        elif isinstance(msg, EpochEnd):
            if self.state is SessionState.STREAMING and msg.epoch == self.current_epoch:
                self._queue.append(EpochBoundary(msg.epoch))
                self._lock.notify_all()
        elif isinstance(msg, Shutdown):
            self._shutdown_seen = True
            self._queue.append(EndOfStream("shutdown"))
            self._lock.notify_all()
        elif isinstance(msg, Welcome):
            log.debug("duplicate Welcome ignored")
        else:
            log.debug("unexpected %s on %s channel", type(msg).__name__, source)

    def _on_announce(self, source: str, msg: Announce) -> None:
        in_replay = self._next_index < self._replay_frontier
        if self.state is SessionState.WAITING_FOR_EPOCH:
            return  # pre-admission traffic for an epoch this session skips
        if self.state is not SessionState.STREAMING:
            return
        if msg.epoch != self.current_epoch:
            return  # stale traffic from before this session's first epoch
        if in_replay and source != "priv":
            return  # broadcast duplicates of the replayed prefix
        if msg.batch_index < self._next_index:
            log.debug("duplicate announce %d/%d dropped", msg.epoch, msg.batch_index)
            return
        if msg.batch_index > self._next_index:
            self._fail(ProtocolError(
                f"announce gap: expected batch {self._next_index}, got {msg.batch_index}"
            ))
            return
        if self._queued_descriptors >= self._capacity():
            self._fail(ProtocolError(
                f"descriptor queue overflow (capacity {self._capacity()}); "
                "producer is not honoring the buffer depth"
            ))
            return
        self._queue.append(BatchDescriptor.from_announce(msg))
        self._queued_descriptors += 1
        self._next_index += 1
        self._lock.notify_all()

    def _capacity(self) -> int:
        if self.config.queue_capacity is not None:
            return self.config.queue_capacity
        return max(1, self.welcome.buffer_depth)

    def _fail(self, exc: Exception) -> None:
        self._error = exc
        self.state = SessionState.ENDED
        self._end_reason = "protocol-error"
        self._ended.set()
        self._lock.notify_all()
        self._close_conns()

    def _on_close(self, source: str) -> None:
        with self._lock:
            if self.state is SessionState.ENDED or self._shutdown_seen:
                return
            if source == "bcast" or self.welcome is None:
                # Producer dropped us (eviction) or died: pending batches may
                # already be released, so do not try to consume them.
                self._queue.clear()
                self._queued_descriptors = 0
                self.state = SessionState.ENDED
                self._end_reason = "connection-lost"
                self._ended.set()
                self._lock.notify_all()
            self._welcomed.set()  # unblock a connect() still waiting

    # -- caller API -------------------------------------------------------------

    def next_batch(self) -> Union[BatchView, EpochBoundary, EndOfStream]:
        """Block until the next batch (or marker) is available.

        Sends the Ack for a batch before returning its view. Returns
        ``EpochBoundary`` at each epoch end and ``EndOfStream`` after producer
        shutdown (queued batches are yielded first) or eviction.
        """
        while True:
            with self._lock:
                if self._error is not None:
                    raise self._error
                if self.state is SessionState.ENDED:
                    return EndOfStream(self._end_reason)
                if not self._queue:
                    self._lock.wait(0.1)
                    continue
                item = self._queue.pop(0)
                if isinstance(item, BatchDescriptor):
                    self._queued_descriptors -= 1
                elif isinstance(item, EndOfStream):
                    self.state = SessionState.ENDED
                    self._end_reason = item.reason
                    self._ended.set()

            if isinstance(item, EpochBoundary):
                return item
            if isinstance(item, EndOfStream):
                self._close_conns()
                return item

            # Map before acking: the ack lets the producer release (unlink)
            # the segment, and an existing mapping is what keeps it readable.
            try:
                view = map_segment(
                    item.segment_name, verify_checksum=self.config.verify_checksums
                )
            except StaleHandleError:
                if self._shutdown_seen:
                    return EndOfStream("stale-after-shutdown")
                raise ProtocolError(
                    f"segment {item.segment_name} released before fetch "
                    "(drift bound violated)"
                ) from None
            try:
                self._priv.send(Ack(self.config.consumer_id, item.epoch, item.batch_index))
            except OSError:
                view.close()
                with self._lock:
                    self.state = SessionState.ENDED
                    self._end_reason = "connection-lost"
                    self._ended.set()
                return EndOfStream("connection-lost")
            return view

    def stop_heartbeats(self) -> None:
        """Go silent (fault injection: the producer should evict us)."""
        self._heartbeats_on = False

    def wait_ended(self, timeout: Optional[float] = None) -> bool:
        return self._ended.wait(timeout)

    def close(self, send_bye: bool = True) -> None:
        """Leave the stream. Idempotent."""
        with self._lock:
            already = self.state is SessionState.ENDED
            self.state = SessionState.ENDED
            self._ended.set()
            self._lock.notify_all()
        if not already and send_bye and self._priv is not None:
            try:
                self._priv.send(Bye(self.config.consumer_id))
            except OSError:
                pass
        self._close_conns()

    def _close_conns(self) -> None:
        for conn in (self._bcast, self._priv):
            if conn is not None:
                conn.close()

    def __enter__(self) -> "ConsumerSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(config: ConsumerConfig) -> ConsumerSession:
    """Join the stream: returns a session already welcomed by the producer."""
    session = ConsumerSession(config)
    session._start()
    return session


def release_view(view: BatchView) -> None:
    """Unmap a view returned by ``next_batch``. Idempotent."""
    view.close()


def _mono_ms() -> int:
    return int(time.monotonic() * 1000)
