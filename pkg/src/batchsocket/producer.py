"""The serving side: prepares each batch once, announces it to every live
consumer, and releases it only when all of them acked (or timed out).

One coordinator thread owns all registry/ledger state. Listener and reader
threads never touch that state; they deliver into the coordinator's single
event queue. Prep workers feed prepared batches through the same queue, in
batch order.

Flow control: a batch may be announced only while fewer than ``buffer_depth``
announced batches are still awaiting acks. Combined with the consumers'
bounded queues this caps how far any two consumers can drift apart.

Late joiners: a Join at epoch progress 0 streams immediately; strictly inside
the rubberband window it is admitted by replaying the retained epoch prefix
on its private connection while new announcements halt; anything later waits
for the next epoch.
"""

from __future__ import annotations

import logging
import math
import queue
import resource
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import pipeline as pl
from .payload import BatchDescriptor, SharedPayload, create_segment
from .transport import FramedConnection, ReaderThread, create_listener
from .wire import (
    ADMIT_IMMEDIATE,
    ADMIT_RUBBERBAND,
    ADMIT_WAIT,
    Ack,
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

# Consumer id 0 is reserved for passive observers on the broadcast channel
# (they are never registered and never acked).
MONITOR_ID = 0


class ProducerError(Exception):
    pass


@dataclass
class ProducerConfig:
    broadcast_endpoint: str
    aggregate_endpoint: str
    epoch_count: int = 1
    buffer_depth: int = 2
    rubberband_fraction: float = 0.02
    heartbeat_interval_ms: int = 1000
    heartbeat_timeout_ms: int = 5000
    pause_poll_interval_ms: int = 100
    verify_checksums: bool = False
    drain_timeout_ms: int = 15000
    # Experiment-start barrier: hold the very first announcement until this
    # many consumers registered. Once serving has begun the usual >=1 rule
    # applies again (evictions must not stall the stream).
    min_consumers: int = 1

    def __post_init__(self):
        if self.buffer_depth < 1:
            raise ValueError("buffer_depth must be >= 1")
        if not (0 <= self.rubberband_fraction < 1):
            raise ValueError("rubberband_fraction must be in [0, 1)")
        if self.heartbeat_timeout_ms <= self.heartbeat_interval_ms:
            raise ValueError("heartbeat_timeout must exceed heartbeat_interval")
        if self.epoch_count < 1:
            raise ValueError("epoch_count must be >= 1")
        if self.min_consumers < 1:
            raise ValueError("min_consumers must be >= 1")


@dataclass
class ConsumerRecord:
    consumer_id: int
    conn: FramedConnection
    last_heartbeat: float
    join_epoch: int
    admitted: bool = False
    waiting_for_epoch: Optional[int] = None
    ack_cursor: int = -1  # global batch sequence (epoch * epoch_len + index)
    replay: deque = field(default_factory=deque)
    replay_until: Optional[int] = None
    replay_outstanding: int = 0


@dataclass
class LedgerEntry:
    seq: int
    descriptor: BatchDescriptor
    payload: SharedPayload
    pending_acks: set
    retained_for_rubberband: bool = False


# Guards against float dust in fraction * epoch_len (0.02 * 1000 is not 20.0
# in binary); never large enough to move a genuine boundary.
_FRACTION_EPS = 1e-9


def admission_code(progress_batches: int, epoch_len: int, fraction: float) -> int:
    """Admission decision for a join at the given announce progress.

    Progress 0 (epoch boundary, or nothing announced yet) admits immediately.
    Strictly inside the rubberband window admits with replay. The boundary is
    strict: joining exactly at the cutoff waits for the next epoch.
    """
    if progress_batches == 0:
        return ADMIT_IMMEDIATE
    if progress_batches + _FRACTION_EPS < fraction * epoch_len:
        return ADMIT_RUBBERBAND
    return ADMIT_WAIT


def retention_window(fraction: float, epoch_len: int) -> int:
    """Number of leading batches retained for rubberband admission."""
    return math.ceil(fraction * epoch_len - _FRACTION_EPS)


class SegmentAccounting:
    """Counts live segments and payload write volume over a run."""

    def __init__(self, clock):
        self._clock = clock
        self.live = 0
        self.peak = 0
        self.peak_in_window = 0
        self.peak_out_window = 0
        self.bytes_written = 0
        self.in_window = False
        self.series: list[tuple[float, int, bool]] = []

    def _sample(self):
        self.series.append((self._clock(), self.live, self.in_window))
        self.peak = max(self.peak, self.live)
        if self.in_window:
            self.peak_in_window = max(self.peak_in_window, self.live)
        else:
            self.peak_out_window = max(self.peak_out_window, self.live)

    def on_create(self, payload_bytes: int):
        self.live += 1
        self.bytes_written += payload_bytes
        self._sample()

    def on_release(self):
        self.live -= 1
        self._sample()


class BatchLedger:
    """Announced-but-unreleased batches, keyed by global sequence."""

    def __init__(self, accounting: SegmentAccounting):
        self.entries: dict[int, LedgerEntry] = {}
        self._accounting = accounting

    def add(self, entry: LedgerEntry) -> None:
        self.entries[entry.seq] = entry

    def get(self, seq: int) -> Optional[LedgerEntry]:
        return self.entries.get(seq)

    def pending_count(self) -> int:
        """Entries still blocked on acks (retention alone does not count)."""
        return sum(1 for e in self.entries.values() if e.pending_acks)

    def try_release(self, entry: LedgerEntry) -> bool:
        if entry.pending_acks or entry.retained_for_rubberband:
            return False
        entry.payload.release()
        self._accounting.on_release()
        del self.entries[entry.seq]
        return True

    def ack(self, consumer_id: int, seq: int) -> tuple[bool, list[int]]:
        entry = self.entries.get(seq)
        if entry is None or consumer_id not in entry.pending_acks:
            return False, []
        entry.pending_acks.discard(consumer_id)
        released = [seq] if self.try_release(entry) else []
        return True, released

    def remove_consumer(self, consumer_id: int) -> list[int]:
        released = []
        for entry in list(self.entries.values()):
            if consumer_id in entry.pending_acks:
                entry.pending_acks.discard(consumer_id)
                if self.try_release(entry):
                    released.append(entry.seq)
        return released

    def drop_retention(self, max_seq_exclusive: int) -> list[int]:
        released = []
        for entry in list(self.entries.values()):
            if entry.retained_for_rubberband and entry.seq < max_seq_exclusive:
                entry.retained_for_rubberband = False
                if self.try_release(entry):
                    released.append(entry.seq)
        return released

    def force_release_all(self) -> int:
        n = 0
        for entry in list(self.entries.values()):
            entry.pending_acks.clear()
            entry.retained_for_rubberband = False
            if self.try_release(entry):
                n += 1
        return n


def flow_control_gate(ledger: BatchLedger, config: ProducerConfig) -> bool:
    """Permit preparing/announcing the next batch?

    True while announced batches still awaiting acks number fewer than the
    buffer depth. Fully-acked batches retained only for rubberband replay do
    not block the gate (otherwise a window wider than the buffer would
    deadlock the epoch start).
    """
    return ledger.pending_count() < config.buffer_depth


def on_ack(msg: Ack, ledger: BatchLedger, registry: dict, epoch_len: int) -> list[int]:
    """Apply one ack; returns the sequence numbers it released."""
    record = registry.get(msg.consumer_id)
    if record is None or not record.admitted:
        log.debug("ignoring ack from unknown consumer %d", msg.consumer_id)
        return []
    seq = msg.epoch * epoch_len + msg.batch_index
    known, released = ledger.ack(msg.consumer_id, seq)
    if not known:
        log.debug("ignoring ack for unknown batch seq %d", seq)
    record.ack_cursor = max(record.ack_cursor, seq)
    return released


def evict_stale(
    now: float, registry: dict, ledger: BatchLedger, timeout_s: float
) -> list[int]:
    """Remove consumers whose heartbeats went silent past the timeout.

    Drops them from the registry and from every pending-ack set; releases
    cascade. Returns the evicted ids (the caller still owns their sockets).
    """
    evicted = [
        cid for cid, rec in registry.items() if now - rec.last_heartbeat > timeout_s
    ]
    for cid in evicted:
        registry.pop(cid, None)
        ledger.remove_consumer(cid)
    return evicted


@dataclass
class RunReport:
    announced: int = 0
    acks_received: int = 0
    consumers_served: int = 0
    evictions: int = 0
    epochs_completed: int = 0
    epoch_len: int = 0
    batch_size: int = 0
    batch_nbytes: int = 0
    pipeline_calls: int = 0
    prep_cpu_seconds: float = 0.0  # work-based: burn iterations / calibrated rate
    bytes_written: int = 0
    peak_live_segments: int = 0
    peak_live_in_window: int = 0
    peak_live_out_window: int = 0
    end_live_segments: int = 0
    drift_max: int = 0
    wall_seconds: float = 0.0
    cpu_seconds: float = 0.0
    live_series: list = field(default_factory=list)
    drift_series: list = field(default_factory=list)
    events: list = field(default_factory=list)
    batches: list = field(default_factory=list)  # (epoch, index, checksum)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


class Producer:
    """Runs the full serve loop. Construct, then call :meth:`run` once."""

    def __init__(self, config: ProducerConfig, dataset: pl.DatasetSpec, prep: pl.PrepSpec):
        self.config = config
        self.dataset = dataset
        self.prep = prep
        self._t0 = time.monotonic()
        self._events: queue.Queue = queue.Queue()
        self._registry: dict[int, ConsumerRecord] = {}
        self._bcast: dict[int, FramedConnection] = {}
        self._monitors: list[FramedConnection] = []
        self._accounting = SegmentAccounting(self._now)
        self._ledger = BatchLedger(self._accounting)
        self._ready: deque[pl.PreparedBatch] = deque()
        self._halt: set[int] = set()
        self._pending_joins: list[tuple[float, FramedConnection, Join]] = []
        self._conn_to_cid: dict[FramedConnection, int] = {}
        self._served: set[int] = set()
        self._pool = pl.PrepPool(
            dataset, prep, config.buffer_depth, sink=lambda pb: self._events.put(("batch", pb))
        )
        self._report = RunReport(
            epoch_len=dataset.epoch_len,
            batch_size=dataset.batch_size,
            batch_nbytes=dataset.batch_nbytes,
        )
        self._epoch = 0
        self._epoch_started = False
        self._announced_in_epoch = 0
        self._task_cursor = 0
        self._submitted = 0
        self._recycled = 0
        self._last_sweep = 0.0
        self._last_drift = -1
        self._barrier_met = False
        self._stop = False
        self._listeners: list = []
        self._threads: list[threading.Thread] = []

    # -- time & logging helpers ------------------------------------------

    def _now(self) -> float:
        return time.monotonic() - self._t0

    def _event(self, kind: str, detail: str) -> None:
        self._report.events.append((self._now(), kind, detail))

    # -- wiring ------------------------------------------------------------

    def _start_listeners(self) -> None:
        try:
            bcast_listener = create_listener(self.config.broadcast_endpoint)
            agg_listener = create_listener(self.config.aggregate_endpoint)
        except OSError as exc:
            raise ProducerError(f"cannot bind endpoints: {exc}") from exc
        self._listeners = [bcast_listener, agg_listener]

        def accept_broadcast():
            while True:
                try:
                    sock, _ = bcast_listener.accept()
                except OSError:
                    return
                conn = FramedConnection(sock)
                threading.Thread(
                    target=self._broadcast_ident, args=(conn,), daemon=True
                ).start()

        def accept_aggregate():
            while True:
                try:
                    sock, _ = agg_listener.accept()
                except OSError:
                    return
                conn = FramedConnection(sock)
                reader = ReaderThread(
                    conn,
                    on_message=lambda msg, c=conn: self._events.put(("msg", c, msg)),
                    on_close=lambda c=conn: self._events.put(("agg_closed", c)),
                    name="agg-reader",
                )
                reader.start()

        for target, name in (
            (accept_broadcast, "bcast-accept"),
            (accept_aggregate, "agg-accept"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def _broadcast_ident(self, conn: FramedConnection) -> None:
        """First frame on a broadcast connection identifies the peer."""
        from .wire import FrameDecoder

        decoder = FrameDecoder()
        sock = conn.sock
        ident: Optional[int] = None
        try:
            while ident is None:
                data = sock.recv(4096)
                if not data:
                    conn.close()
                    return
                for msg in decoder.feed(data):
                    if isinstance(msg, Heartbeat):
                        ident = msg.consumer_id
                        break
                    conn.close()
                    return
            self._events.put(("bcast_ident", ident, conn))
            while True:  # drain anything else; EOF means the peer is gone
                data = sock.recv(4096)
                if not data:
                    break
        except (OSError, ValueError):
            pass
        finally:
            if ident is not None:
                self._events.put(("bcast_closed", ident, conn))

    def _broadcast(self, msg: ControlMessage) -> None:
        dead = []
        for cid, conn in self._bcast.items():
            try:
                conn.send(msg)
            except OSError:
                dead.append(cid)
        for cid in dead:
            self._bcast.pop(cid, None)
        for conn in list(self._monitors):
            try:
                conn.send(msg)
            except OSError:
                self._monitors.remove(conn)

    # -- epoch machinery -----------------------------------------------------

    @property
    def _epoch_len(self) -> int:
        return self.dataset.epoch_len

    def _seq(self, epoch: int, index: int) -> int:
        return epoch * self._epoch_len + index

    def _consumers_present(self) -> bool:
        if not self._registry:
            return False
        if not self._barrier_met and len(self._registry) < self.config.min_consumers:
            return False
        self._barrier_met = True
        return True

    def _admitted_ids(self) -> list[int]:
        return [cid for cid, r in self._registry.items() if r.admitted]

    def _start_epoch(self) -> None:
        L = self._epoch_len
        self._broadcast(EpochStart(self._epoch, L))
        self._epoch_started = True
        self._accounting.in_window = retention_window(
            self.config.rubberband_fraction, L
        ) > 0
        baseline = self._seq(self._epoch, 0) - 1
        for rec in self._registry.values():
            if rec.waiting_for_epoch == self._epoch:
                rec.waiting_for_epoch = None
                rec.admitted = True
                rec.ack_cursor = max(rec.ack_cursor, baseline)
                self._event("admitted-at-epoch", f"consumer={rec.consumer_id} epoch={self._epoch}")
        self._event("epoch-start", f"epoch={self._epoch}")

    def _end_epoch(self) -> None:
        self._broadcast(EpochEnd(self._epoch))
        self._ledger.drop_retention(self._seq(self._epoch + 1, 0))
        self._accounting.in_window = False
        self._event("epoch-end", f"epoch={self._epoch}")
        self._epoch_started = False
        self._report.epochs_completed += 1

    def _issue_tasks(self) -> None:
        if not self._consumers_present():
            return
        depth = self.config.buffer_depth
        while (
            self._task_cursor < self._epoch_len
            and self._submitted - self._recycled < self.prep.workers + depth
        ):
            index = self._task_cursor
            self._pool.submit(self._seq(self._epoch, index), self._epoch, index)
            self._task_cursor += 1
            self._submitted += 1

    def _can_announce(self) -> bool:
        return (
            bool(self._ready)
            and self._announced_in_epoch < self._epoch_len
            and not self._halt
            and self._consumers_present()
            and flow_control_gate(self._ledger, self.config)
        )

    def _try_announce(self) -> None:
        window = retention_window(self.config.rubberband_fraction, self._epoch_len)
        while self._can_announce():
            if not self._epoch_started:
                self._start_epoch()
            pb = self._ready.popleft()
            payload, descriptor = create_segment(
                pb.epoch, pb.batch_index, pb.dtype, pb.shape, pb.buffer
            )
            self._pool.recycle(pb.buffer)
            self._recycled += 1
            self._accounting.on_create(descriptor.byte_len)
            entry = LedgerEntry(
                seq=pb.seq,
                descriptor=descriptor,
                payload=payload,
                pending_acks=set(self._admitted_ids()),
                retained_for_rubberband=pb.batch_index < window,
            )
            self._ledger.add(entry)
            self._broadcast(descriptor.announce())
            self._announced_in_epoch += 1
            self._report.announced += 1
            self._report.batches.append((pb.epoch, pb.batch_index, descriptor.checksum))
            if not entry.pending_acks:
                self._ledger.try_release(entry)
            if self._announced_in_epoch >= window and self._accounting.in_window:
                self._ledger.drop_retention(self._seq(self._epoch + 1, 0))
                self._accounting.in_window = False

    # -- event handling ------------------------------------------------------

    def _pump(self, timeout: float) -> None:
        try:
            ev = self._events.get(timeout=timeout)
        except queue.Empty:
            return
        self._dispatch(ev)
        while True:
            try:
                ev = self._events.get_nowait()
            except queue.Empty:
                return
            self._dispatch(ev)

    def _dispatch(self, ev: tuple) -> None:
        kind = ev[0]
        if kind == "batch":
            pb = ev[1]
            if pb is None:
                raise ProducerError(f"pipeline failed: {self._pool.error}")
            self._ready.append(pb)
        elif kind == "msg":
            _, conn, msg = ev
            self._handle_message(conn, msg)
        elif kind == "bcast_ident":
            _, cid, conn = ev
            if cid == MONITOR_ID:
                self._monitors.append(conn)
            else:
                self._bcast[cid] = conn
                self._retry_pending_joins()
        elif kind == "bcast_closed":
            _, cid, conn = ev
            if cid == MONITOR_ID:
                if conn in self._monitors:
                    self._monitors.remove(conn)
            elif self._bcast.get(cid) is conn:
                self._bcast.pop(cid, None)
                if cid in self._registry:
                    self._remove_consumer(cid, "disconnect")
        elif kind == "agg_closed":
            conn = ev[1]
            self._pending_joins = [p for p in self._pending_joins if p[1] is not conn]
            cid = self._conn_to_cid.pop(conn, None)
            if cid is not None and cid in self._registry:
                self._remove_consumer(cid, "disconnect")

    def _handle_message(self, conn: FramedConnection, msg: ControlMessage) -> None:
        if isinstance(msg, Join):
            self._handle_join(conn, msg)
        elif isinstance(msg, Ack):
            self._handle_ack(msg)
        elif isinstance(msg, Heartbeat):
            rec = self._registry.get(msg.consumer_id)
            if rec is not None:
                rec.last_heartbeat = self._now()
        elif isinstance(msg, Bye):
            if msg.consumer_id in self._registry:
                self._remove_consumer(msg.consumer_id, "bye")
        else:
            log.warning("unexpected message on aggregation channel: %r", msg)

    def _handle_join(self, conn: FramedConnection, msg: Join) -> None:
        if msg.protocol_version != PROTOCOL_VERSION:
            self._event("join-rejected", f"consumer={msg.consumer_id} version={msg.protocol_version}")
            conn.close()
            return
        if msg.consumer_id == MONITOR_ID:
            self._event("join-rejected", f"consumer id {MONITOR_ID} is reserved")
            conn.close()
            return
        if msg.consumer_id not in self._bcast:
            # Broadcast identification is in flight; retry shortly.
            deadline = self._now() + self.config.heartbeat_timeout_ms / 1000
            self._pending_joins.append((deadline, conn, msg))
            return
        if msg.consumer_id in self._registry:
            self._remove_consumer(msg.consumer_id, "rejoined")

        cid = msg.consumer_id
        L = self._epoch_len
        progress = self._announced_in_epoch if self._epoch_started else 0
        code = admission_code(progress, L, self.config.rubberband_fraction)
        rec = ConsumerRecord(
            consumer_id=cid,
            conn=conn,
            last_heartbeat=self._now(),
            join_epoch=self._epoch,
        )
        self._registry[cid] = rec
        self._conn_to_cid[conn] = cid
        self._served.add(cid)

        if code == ADMIT_IMMEDIATE:
            rec.admitted = True
            rec.ack_cursor = self._seq(self._epoch, 0) - 1
            welcome = Welcome(cid, self._epoch, L, 0, self.config.buffer_depth, code)
        elif code == ADMIT_RUBBERBAND:
            rec.admitted = True
            rec.ack_cursor = self._seq(self._epoch, 0) - 1
            first = self._seq(self._epoch, 0)
            frontier = self._seq(self._epoch, progress)
            for seq in range(first, frontier):
                entry = self._ledger.get(seq)
                if entry is None:  # retained entries must still be alive
                    raise ProducerError(f"rubberband prefix seq {seq} missing from ledger")
                entry.pending_acks.add(cid)
                rec.replay.append(seq)
            rec.replay_until = frontier - 1
            self._halt.add(cid)
            welcome = Welcome(cid, self._epoch, L, progress, self.config.buffer_depth, code)
        else:
            rec.waiting_for_epoch = self._epoch + 1
            welcome = Welcome(cid, self._epoch + 1, L, 0, self.config.buffer_depth, code)

        try:
            conn.send(welcome)
        except OSError:
            self._remove_consumer(cid, "disconnect")
            return
        log.debug("join consumer=%d code=%d progress=%d welcome=%r", cid, code, progress, welcome)
        self._event("join", f"consumer={cid} admitted={code} progress={progress}")
        if code == ADMIT_RUBBERBAND:
            self._send_replays(rec)

    def _retry_pending_joins(self) -> None:
        pending, self._pending_joins = self._pending_joins, []
        now = self._now()
        for deadline, conn, msg in pending:
            if conn.closed:
                continue
            if now > deadline:
                conn.close()
                continue
            self._handle_join(conn, msg)

    def _send_replays(self, rec: ConsumerRecord) -> None:
        while rec.replay and rec.replay_outstanding < self.config.buffer_depth:
            seq = rec.replay.popleft()
            entry = self._ledger.get(seq)
            if entry is None:
                continue
            log.debug("replay seq=%d to consumer=%d", seq, rec.consumer_id)
            try:
                rec.conn.send(entry.descriptor.announce())
            except OSError:
                self._remove_consumer(rec.consumer_id, "disconnect")
                return
            rec.replay_outstanding += 1

    def _handle_ack(self, msg: Ack) -> None:
        rec = self._registry.get(msg.consumer_id)
        if rec is None:
            return
        rec.last_heartbeat = self._now()
        seq = self._seq(msg.epoch, msg.batch_index)
        on_ack(msg, self._ledger, self._registry, self._epoch_len)
        self._report.acks_received += 1
        if msg.consumer_id in self._halt and rec.replay_until is not None:
            if seq <= rec.replay_until:
                rec.replay_outstanding -= 1
                self._send_replays(rec)
            if rec.ack_cursor >= rec.replay_until:
                self._halt.discard(msg.consumer_id)
                rec.replay_until = None
                self._event("caught-up", f"consumer={msg.consumer_id}")
        self._sample_drift()

    def _sample_drift(self) -> None:
        cursors = [r.ack_cursor for r in self._registry.values() if r.admitted]
        if not cursors:
            return
        gap = max(cursors) - min(cursors)
        self._report.drift_max = max(self._report.drift_max, gap)
        if gap != self._last_drift:
            self._report.drift_series.append((self._now(), gap))
            self._last_drift = gap

    def _remove_consumer(self, cid: int, reason: str) -> None:
        rec = self._registry.pop(cid, None)
        if rec is None:
            return
        self._ledger.remove_consumer(cid)
        self._cleanup_consumer_io(rec, reason)

    def _cleanup_consumer_io(self, rec: ConsumerRecord, reason: str) -> None:
        cid = rec.consumer_id
        if reason == "timeout":
            self._report.evictions += 1
        self._event(
            "consumer-gone",
            f"consumer={cid} reason={reason} last_heartbeat={rec.last_heartbeat:.3f}",
        )
        self._halt.discard(cid)
        self._conn_to_cid.pop(rec.conn, None)
        rec.conn.close()
        bconn = self._bcast.pop(cid, None)
        if bconn is not None:
            bconn.close()
        self._sample_drift()

    def _sweep(self, now: float) -> None:
        self._last_sweep = now
        timeout_s = self.config.heartbeat_timeout_ms / 1000
        records = dict(self._registry)
        for cid in evict_stale(now, self._registry, self._ledger, timeout_s):
            self._cleanup_consumer_io(records[cid], "timeout")

    # -- main loop ------------------------------------------------------------

    def run(self) -> RunReport:
        """Serve ``epoch_count`` epochs, then shut down. Returns the report."""
        poll = self.config.pause_poll_interval_ms / 1000
        self._start_listeners()
        self._pool.start()
        started = time.monotonic()
        from . import kernels

        burn_base = kernels.burned_iterations()
        try:
            for epoch in range(self.config.epoch_count):
                self._epoch = epoch
                self._epoch_started = False
                self._announced_in_epoch = 0
                self._task_cursor = 0
                while self._announced_in_epoch < self._epoch_len:
                    self._issue_tasks()
                    self._try_announce()
                    now = self._now()
                    if now - self._last_sweep >= poll:
                        self._sweep(now)
                    self._pump(0.0 if self._can_announce() else poll)
                self._end_epoch()
            self._drain()
            self._broadcast(Shutdown())
        except ProducerError:
            self._broadcast(Shutdown())
            raise
        finally:
            leftovers = self._ledger.force_release_all()
            if leftovers:
                self._event("force-released", f"segments={leftovers}")
            self._report.end_live_segments = self._accounting.live
            self._shutdown_io()
            self._finalize(started)
            burned = kernels.burned_iterations() - burn_base
            if burned:
                self._report.prep_cpu_seconds = burned / kernels.burn_rate()
        return self._report

    def _drain(self) -> None:
        poll = self.config.pause_poll_interval_ms / 1000
        deadline = self._now() + self.config.drain_timeout_ms / 1000
        while self._ledger.entries and self._now() < deadline:
            now = self._now()
            if now - self._last_sweep >= poll:
                self._sweep(now)
            self._pump(poll)
        if self._ledger.entries:
            self._event("drain-timeout", f"unreleased={len(self._ledger.entries)}")

    def _shutdown_io(self) -> None:
        for listener in self._listeners:
            try:
                listener.close()
            except OSError:
                pass
        for rec in list(self._registry.values()):
            rec.conn.close()
        for conn in list(self._bcast.values()):
            conn.close()
        for conn in self._monitors:
            conn.close()
        self._pool.close()

    def _finalize(self, started: float) -> None:
        self._report.consumers_served = len(self._served)
        self._report.pipeline_calls = self._pool.calls
        self._report.bytes_written = self._accounting.bytes_written
        self._report.peak_live_segments = self._accounting.peak
        self._report.peak_live_in_window = self._accounting.peak_in_window
        self._report.peak_live_out_window = self._accounting.peak_out_window
        self._report.live_series = self._accounting.series
        self._report.wall_seconds = time.monotonic() - started
        ru = resource.getrusage(resource.RUSAGE_SELF)
        self._report.cpu_seconds = ru.ru_utime + ru.ru_stime


def run(config: ProducerConfig, dataset: pl.DatasetSpec, prep: pl.PrepSpec) -> RunReport:
    """Convenience wrapper: build a producer and serve to completion."""
    return Producer(config, dataset, prep).run()
