"""Experiment orchestration: spawn producer + consumer processes, collect
their reports, and check them against the analytic throughput oracle.

Two modes:

* ``shared``: one producer serves every consumer (one prep pipeline total).
* ``nonshared``: each consumer gets a private producer with ``W/K`` of the
  prep workers, mirroring per-process loaders splitting the same CPU budget.

Consumer load is modeled as ``compute_us`` of real CPU burn plus ``pace_us``
of idle wall time per batch (an accelerator-bound training step occupies the
GPU, not the CPU). The analytic consumer rate is ``1e6 / (compute + pace)``
batches/s; the oracle for a consumer's throughput is the ``min`` of that and
the prep capacity feeding it.

Scenario files are declarative TOML mirroring :class:`ScenarioSpec`; builtin
scenarios cover the canned experiments (``bench --list-builtin``).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import re
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

from .producer import MONITOR_ID, retention_window
from .transport import FramedConnection, connect_endpoint
from .wire import Announce, FrameDecoder, Heartbeat, Shutdown


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class ConsumerLoad:
    compute_us: int = 0
    pace_us: int = 0
    epochs: int | None = None  # None: scenario epoch count; 0: run to shutdown

    @property
    def rate_batches_s(self) -> float:
        total = self.compute_us + self.pace_us
        return math.inf if total == 0 else 1e6 / total


@dataclass(frozen=True)
class Fault:
    kind: str  # "join-at-progress" | "stall-at-batch"
    consumer: int  # index into ScenarioSpec.consumers
    at: int  # announce progress (join) or fetched-batch count (stall)


@dataclass
class ScenarioSpec:
    name: str
    consumers: list[ConsumerLoad]
    mode: str = "shared"  # "shared" | "nonshared"
    workers: int = 1
    epochs: int = 1
    epoch_len: int = 100
    batch_size: int = 16
    sample_bytes: int = 256
    prep_cost_us_per_sample: int = 0
    aux_cost_us_per_batch: int = 0
    buffer_depth: int = 2
    rubberband_fraction: float = 0.02
    heartbeat_interval_ms: int = 500
    heartbeat_timeout_ms: int = 3000
    pause_poll_interval_ms: int = 50
    verify_checksums: bool = False
    seed: int = 0
    faults: list[Fault] = field(default_factory=list)
    oracle_check: bool = True  # False when the scenario saturates the host on purpose
    timeout_s: float | None = None

    def __post_init__(self):
        if self.mode not in ("shared", "nonshared"):
            raise ValueError(f"mode must be shared|nonshared, got {self.mode!r}")
        if not self.consumers:
            raise ValueError("at least one consumer")
        if self.mode == "nonshared" and self.workers % len(self.consumers):
            raise ValueError(
                f"nonshared mode splits workers evenly: {self.workers} workers "
                f"across {len(self.consumers)} loaders"
            )

    @property
    def clean(self) -> bool:
        return not self.faults

    @property
    def batch_nbytes(self) -> int:
        return self.batch_size * self.sample_bytes

    def with_mode(self, mode: str) -> "ScenarioSpec":
        return dataclasses.replace(self, mode=mode, name=f"{self.name}-{mode}")


@dataclass(frozen=True)
class Tolerances:
    """Pinned acceptance tolerances (relative unless noted)."""

    oracle_rel: float = 0.15
    parity_rel: float = 0.10
    speedup_target: float = 2.0
    speedup_rel: float = 0.15
    cpu_share_max: float = 0.35  # shared prep CPU vs nonshared, K=4 (ideal 0.25)
    pacing_rel: float = 0.10
    flat_rel: float = 0.10


@dataclass
class Check:
    criterion: str
    passed: bool
    detail: str


@dataclass
class MetricsReport:
    spec: ScenarioSpec
    consumers: list[dict]
    producers: list[dict]
    per_consumer_samples_s: list[float]
    aggregate_samples_s: float
    producer_cpu_seconds: float  # host process accounting (can be noisy on VMs)
    producer_prep_cpu_seconds: float  # work-based: burn iterations / rate
    consumer_cpu_seconds: float
    oracle: dict
    wall_seconds: float
    workdir: str

    def consumer_rate(self, index: int) -> float:
        return self.per_consumer_samples_s[index]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


def oracle_throughput(spec: ScenarioSpec) -> dict:
    """Analytic per-consumer and aggregate samples/s for both modes.

    Shared: every consumer sees min(prep capacity of all W workers, the
    slowest consumer's own rate). Nonshared: consumer i sees min(prep
    capacity of W/K workers, its own rate).
    """
    batch_cost = (
        spec.prep_cost_us_per_sample * spec.batch_size + spec.aux_cost_us_per_batch
    )

    def prep_rate(workers: int) -> float:
        return math.inf if batch_cost == 0 else workers * 1e6 / batch_cost

    k = len(spec.consumers)
    rates = [c.rate_batches_s for c in spec.consumers]
    slowest = min(rates)
    shared_each = min(prep_rate(spec.workers), slowest)
    shared = [shared_each] * k
    nonshared = [min(prep_rate(spec.workers // k), r) for r in rates]
    to_samples = lambda bps: bps * spec.batch_size  # noqa: E731
    return {
        "shared": {
            "per_consumer_samples_s": [to_samples(r) for r in shared],
            "aggregate_samples_s": to_samples(sum(shared)),
        },
        "nonshared": {
            "per_consumer_samples_s": [to_samples(r) for r in nonshared],
            "aggregate_samples_s": to_samples(sum(nonshared)),
        },
    }


# -- builtin scenarios (sized for a small 2-core host) ------------------------


def _prep_bound_4way() -> ScenarioSpec:
    # Deliberately saturates the machine in both modes: with every stage
    # being real CPU burn, the shared/nonshared throughput ratio equals the
    # CPU-work ratio (2.0 with prep sized at twice one consumer's demand).
    return ScenarioSpec(
        name="prep-bound-4way",
        consumers=[ConsumerLoad(compute_us=20000)] * 4,  # 50 b/s demand each
        workers=4,
        epochs=1,
        epoch_len=100,
        batch_size=64,
        sample_bytes=256,
        prep_cost_us_per_sample=625,  # 40 ms/batch: prep(4) = 100 b/s = 2x demand
        heartbeat_timeout_ms=5000,
        oracle_check=False,
        timeout_s=240.0,
    )


def _consumer_bound_4way() -> ScenarioSpec:
    # Paced consumers (CPU mostly idle) and abundant prep capacity: both
    # modes must match the consumer-rate oracle.
    return ScenarioSpec(
        name="consumer-bound-4way",
        consumers=[ConsumerLoad(compute_us=500, pace_us=30000)] * 4,  # ~32.8 b/s
        workers=4,
        epochs=1,
        epoch_len=240,
        batch_size=64,
        sample_bytes=256,
        prep_cost_us_per_sample=15,  # ~1 ms/batch: prep(1) ~ 1042 b/s >> demand
    )


def _mixed_speeds() -> ScenarioSpec:
    # One consumer twice the per-batch cost of the other; the drift bound
    # paces both to the slow one.
    return ScenarioSpec(
        name="mixed-speeds",
        consumers=[
            ConsumerLoad(compute_us=500, pace_us=15000),  # ~64.5 b/s alone
            ConsumerLoad(compute_us=1000, pace_us=30000),  # ~32.3 b/s alone
        ],
        workers=2,
        epochs=1,
        epoch_len=200,
        batch_size=64,
        sample_bytes=256,
        prep_cost_us_per_sample=62,
    )


def _late_joiner() -> ScenarioSpec:
    # Consumer 1 joins inside the 2% rubberband window (announce 15 of 1000)
    # and must still see the whole epoch; consumer 2 joins past it (25) and
    # waits for the next epoch.
    load = ConsumerLoad(compute_us=1000, pace_us=24000, epochs=0)  # 40 b/s
    return ScenarioSpec(
        name="late-joiner",
        consumers=[dataclasses.replace(load, epochs=2), load, load],
        workers=1,
        epochs=2,
        epoch_len=1000,
        batch_size=16,
        sample_bytes=256,
        prep_cost_us_per_sample=60,  # ~1 ms/batch, never the bottleneck
        rubberband_fraction=0.02,
        faults=[Fault("join-at-progress", 1, 15), Fault("join-at-progress", 2, 25)],
        timeout_s=420.0,
    )


def _kill_consumer() -> ScenarioSpec:
    # Consumer 2 goes silent mid-epoch (no acks, no heartbeats, sockets
    # open); the producer must evict it by heartbeat timeout and the
    # survivors must finish the epoch.
    load = ConsumerLoad(compute_us=500, pace_us=9500)  # 100 b/s
    return ScenarioSpec(
        name="kill-consumer",
        consumers=[load, load, dataclasses.replace(load, epochs=0)],
        workers=1,
        epochs=1,
        epoch_len=300,
        batch_size=16,
        sample_bytes=256,
        prep_cost_us_per_sample=60,
        heartbeat_interval_ms=250,
        heartbeat_timeout_ms=1200,
        pause_poll_interval_ms=100,
        faults=[Fault("stall-at-batch", 2, 50)],
        oracle_check=False,
    )


def _scaling(k: int) -> ScenarioSpec:
    # Fixed prep capacity (1 worker, 25 b/s), consumers well above it: the
    # per-consumer rate should stay flat as collocation grows.
    return ScenarioSpec(
        name=f"scaling-1to8-k{k}",
        consumers=[ConsumerLoad(compute_us=500, pace_us=9500)] * k,
        workers=1,
        epochs=1,
        epoch_len=120,
        batch_size=64,
        sample_bytes=256,
        prep_cost_us_per_sample=625,  # 40 ms/batch: prep(1) = 25 b/s
    )


_BUILTIN = {
    "prep-bound-4way": lambda: [_prep_bound_4way()],
    "consumer-bound-4way": lambda: [_consumer_bound_4way()],
    "mixed-speeds": lambda: [_mixed_speeds()],
    "late-joiner": lambda: [_late_joiner()],
    "kill-consumer": lambda: [_kill_consumer()],
    "scaling-1to8": lambda: [_scaling(k) for k in (1, 2, 4, 8)],
}


def builtin_names() -> list[str]:
    return sorted(_BUILTIN)


def builtin_scenario(name: str) -> list[ScenarioSpec]:
    try:
        return _BUILTIN[name]()
    except KeyError:
        raise ScenarioError(
            f"unknown builtin scenario {name!r} (see bench --list-builtin)"
        ) from None


def load_scenario(name_or_path: str) -> list[ScenarioSpec]:
    """Builtin scenario name, or a TOML file mirroring ScenarioSpec."""
    if name_or_path in _BUILTIN:
        return builtin_scenario(name_or_path)
    if not os.path.exists(name_or_path):
        raise ScenarioError(f"{name_or_path!r} is neither builtin nor a file")
    try:
        import tomllib as toml  # 3.11+
    except ImportError:
        import tomli as toml
    with open(name_or_path, "rb") as fh:
        data = toml.load(fh)
    consumers = [ConsumerLoad(**c) for c in data.pop("consumers", [])]
    faults = [Fault(**f) for f in data.pop("faults", [])]
    data.setdefault("name", os.path.splitext(os.path.basename(name_or_path))[0])
    return [ScenarioSpec(consumers=consumers, faults=faults, **data)]


# -- orchestration -------------------------------------------------------------


class BroadcastMonitor(threading.Thread):
    """Passive broadcast observer: tracks announce progress per epoch."""

    def __init__(self, endpoint: str, connect_timeout: float = 30.0):
        super().__init__(name="bcast-monitor", daemon=True)
        self.endpoint = endpoint
        self._connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._progress: dict[int, int] = {}
        self._triggers: list[tuple[int, int, object]] = []
        self._conn: FramedConnection | None = None
        self.shutdown_seen = threading.Event()

    def on_progress(self, epoch: int, count: int, action) -> None:
        with self._lock:
            self._triggers.append((epoch, count, action))

    def run(self) -> None:
        try:
            sock = connect_endpoint(self.endpoint, retry_for=self._connect_timeout)
        except OSError:
            return
        self._conn = FramedConnection(sock)
        try:
            self._conn.send(Heartbeat(MONITOR_ID, 0))
        except OSError:
            return
        decoder = FrameDecoder()
        while True:
            try:
                data = sock.recv(65536)
            except OSError:
                return
            if not data:
                return
            for msg in decoder.feed(data):
                if isinstance(msg, Announce):
                    with self._lock:
                        count = self._progress.get(msg.epoch, 0) + 1
                        self._progress[msg.epoch] = count
                        due = [t for t in self._triggers if t[0] == msg.epoch and t[1] <= count]
                        self._triggers = [t for t in self._triggers if t not in due]
                    for _, _, action in due:
                        action()
                elif isinstance(msg, Shutdown):
                    self.shutdown_seen.set()

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()


def _spawn(cmd: list[str], log_path: str) -> subprocess.Popen:
    logfh = open(log_path, "w")
    # faulthandler makes hung children diagnosable post-mortem (SIGABRT dumps)
    env = dict(os.environ, PYTHONUNBUFFERED="1", PYTHONFAULTHANDLER="1")
    return subprocess.Popen(cmd, stdout=logfh, stderr=subprocess.STDOUT, env=env)


def _estimated_timeout(spec: ScenarioSpec) -> float:
    rates = [c.rate_batches_s for c in spec.consumers]
    batch_cost = spec.prep_cost_us_per_sample * spec.batch_size + spec.aux_cost_us_per_batch
    prep = math.inf if batch_cost == 0 else 1e6 / batch_cost  # one worker, worst split
    slowest = min(min(rates), prep)
    if not math.isfinite(slowest) or slowest <= 0:
        slowest = 50.0
    expected = spec.epochs * spec.epoch_len / slowest
    return expected * 8 + 90


def run_scenario(spec: ScenarioSpec, workdir: str | None = None) -> MetricsReport:
    """Spawn the scenario's processes, wait, and aggregate their reports."""
    keep_workdir = workdir is not None
    workdir = workdir or tempfile.mkdtemp(prefix=f"bs-{spec.name}-")
    os.makedirs(workdir, exist_ok=True)
    k = len(spec.consumers)
    groups = 1 if spec.mode == "shared" else k
    workers_per_group = spec.workers if spec.mode == "shared" else spec.workers // k

    def endpoint(group: int, channel: str) -> str:
        return f"unix:{workdir}/{channel}{group}.sock"

    join_faults = {f.consumer: f.at for f in spec.faults if f.kind == "join-at-progress"}
    stall_faults = {f.consumer: f.at for f in spec.faults if f.kind == "stall-at-batch"}
    if spec.faults and spec.mode != "shared":
        raise ScenarioError("fault injection is defined for shared mode only")

    from . import kernels

    # One calibration on the (quiet) orchestrator; every child gets the same
    # pinned rate so simulated costs are identical across modes and processes.
    burn_rate = kernels.burn_rate()

    procs: list[tuple[str, subprocess.Popen]] = []
    monitor: BroadcastMonitor | None = None
    t0 = time.monotonic()
    try:
        for g in range(groups):
            initial = sum(
                1
                for i in range(k)
                if (g == 0 if spec.mode == "shared" else i == g) and i not in join_faults
            )
            cmd = [
                sys.executable,
                "-m",
                "batchsocket",
                *(["-v"] if os.environ.get("BATCHSOCKET_TRACE") else []),
                "produce",
                "--epochs", str(spec.epochs),
                "--epoch-len", str(spec.epoch_len),
                "--batch-size", str(spec.batch_size),
                "--sample-bytes", str(spec.sample_bytes),
                "--buffer-depth", str(spec.buffer_depth),
                "--rubberband", str(spec.rubberband_fraction),
                "--heartbeat-ms", str(spec.heartbeat_interval_ms),
                "--timeout-ms", str(spec.heartbeat_timeout_ms),
                "--poll-ms", str(spec.pause_poll_interval_ms),
                "--workers", str(workers_per_group),
                "--prep-cost-us", str(spec.prep_cost_us_per_sample),
                "--aux-cost-us", str(spec.aux_cost_us_per_batch),
                "--burn-rate", str(burn_rate),
                "--seed", str(spec.seed),
                "--min-consumers", str(max(1, initial)),
                "--broadcast", endpoint(g, "b"),
                "--aggregate", endpoint(g, "a"),
                "--report", f"{workdir}/producer{g}.json",
            ]
            if spec.verify_checksums:
                cmd.append("--verify-checksums")
            procs.append((f"producer{g}", _spawn(cmd, f"{workdir}/producer{g}.log")))
            time.sleep(0.1)

        for i, load in enumerate(spec.consumers):
            g = 0 if spec.mode == "shared" else i
            signal = f"{workdir}/join-{i}.signal"
            epochs = spec.epochs if load.epochs is None else load.epochs
            cmd = [
                sys.executable,
                "-m",
                "batchsocket",
                *(["-v"] if os.environ.get("BATCHSOCKET_TRACE") else []),
                "consume",
                "--id", str(i + 1),
                "--compute-us", str(load.compute_us),
                "--pace-us", str(load.pace_us),
                "--burn-rate", str(burn_rate),
                "--epochs", str(epochs),
                "--heartbeat-ms", str(spec.heartbeat_interval_ms),
                "--connect-timeout-ms", "30000",
                "--ready-file", f"{workdir}/ready-{i}",
                "--wait-signal", signal,
                "--broadcast", endpoint(g, "b"),
                "--aggregate", endpoint(g, "a"),
                "--report", f"{workdir}/consumer{i}.json",
            ]
            if spec.verify_checksums:
                cmd.append("--verify-checksums")
            if i in stall_faults:
                cmd += ["--stall-at-batch", str(stall_faults[i])]
            procs.append((f"consumer{i}", _spawn(cmd, f"{workdir}/consumer{i}.log")))
            time.sleep(0.2)  # stagger process startup (kernel calibration)

        if join_faults:
            monitor = BroadcastMonitor(endpoint(0, "b"))
            for i, at in join_faults.items():
                signal = f"{workdir}/join-{i}.signal"
                monitor.on_progress(0, at, lambda s=signal: open(s, "w").close())
            monitor.start()

        # Line up a simultaneous start: wait for every consumer to finish
        # imports and calibration, then release the immediate starters
        # together (measurements should not include the startup storm).
        ready_deadline = time.monotonic() + 90
        while any(
            not os.path.exists(f"{workdir}/ready-{i}") for i in range(k)
        ):
            if time.monotonic() > ready_deadline:
                raise ScenarioError(f"consumers not ready after 90s in {spec.name}")
            if any(p.poll() not in (None, 0) for _, p in procs):
                break  # a child already failed; fall through to the wait loop
            time.sleep(0.02)
        for i in range(k):
            if i not in join_faults:
                open(f"{workdir}/join-{i}.signal", "w").close()

        deadline = t0 + (spec.timeout_s or _estimated_timeout(spec))
        pending = dict(procs)
        while pending:
            if time.monotonic() > deadline:
                for name, p in pending.items():
                    p.kill()
                tails = _log_tails(workdir, pending)
                raise ScenarioError(
                    f"scenario {spec.name} timed out after "
                    f"{time.monotonic() - t0:.0f}s; still running: "
                    f"{sorted(pending)}\n{tails}"
                )
            for name in list(pending):
                rc = pending[name].poll()
                if rc is None:
                    continue
                if rc != 0:
                    for other in pending.values():
                        other.kill()
                    raise ScenarioError(
                        f"{name} exited with {rc} in scenario {spec.name}\n"
                        + _log_tails(workdir, {name: pending[name]})
                    )
                del pending[name]
            time.sleep(0.05)
    finally:
        if monitor is not None:
            monitor.close()
        for _, p in procs:
            if p.poll() is None:
                p.kill()

    wall = time.monotonic() - t0
    producers = [
        _read_json(f"{workdir}/producer{g}.json", "producer", spec.name)
        for g in range(groups)
    ]
    consumers = [
        _read_json(f"{workdir}/consumer{i}.json", "consumer", spec.name)
        for i in range(k)
    ]
    per_rates = [_mean_rate(c) for c in consumers]
    report = MetricsReport(
        spec=spec,
        consumers=consumers,
        producers=producers,
        per_consumer_samples_s=per_rates,
        aggregate_samples_s=sum(r for r in per_rates if r),
        producer_cpu_seconds=sum(p.get("cpu_seconds", 0.0) for p in producers),
        producer_prep_cpu_seconds=sum(p.get("prep_cpu_seconds", 0.0) for p in producers),
        consumer_cpu_seconds=sum(c.get("cpu_seconds", 0.0) for c in consumers),
        oracle=oracle_throughput(spec),
        wall_seconds=wall,
        workdir=workdir if keep_workdir else "",
    )
    if not keep_workdir:
        shutil.rmtree(workdir, ignore_errors=True)
    return report


def _read_json(path: str, kind: str, scenario: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"missing {kind} report {path} in scenario {scenario}") from None
    if "fatal" in data:
        raise ScenarioError(f"{kind} failed in scenario {scenario}: {data['fatal']}")
    return data


def _log_tails(workdir: str, procs: dict) -> str:
    chunks = []
    for name in procs:
        path = f"{workdir}/{name}.log"
        try:
            with open(path, "r", errors="replace") as fh:
                tail = fh.read()[-2000:]
            chunks.append(f"--- {name} ---\n{tail}")
        except OSError:
            pass
    return "\n".join(chunks)


def _mean_rate(consumer_report: dict) -> float:
    rates = [
        e["samples_per_s"]
        for e in consumer_report.get("epochs", [])
        if e.get("samples_per_s")
    ]
    return sum(rates) / len(rates) if rates else 0.0


def run_pair(spec: ScenarioSpec, workdir: str | None = None) -> tuple[MetricsReport, MetricsReport]:
    """Run the scenario in shared mode and again in nonshared mode."""
    shared = run_scenario(spec.with_mode("shared") if spec.mode != "shared" else spec, workdir)
    nonshared = run_scenario(spec.with_mode("nonshared"), workdir)
    return shared, nonshared


# -- acceptance checks ---------------------------------------------------------


def check_acceptance(report: MetricsReport, tol: Tolerances | None = None) -> list[Check]:
    """Evaluate every per-scenario criterion that applies to this report."""
    tol = tol or Tolerances()
    spec = report.spec
    checks: list[Check] = []

    # Exactly-once, in-order, checksum-faithful delivery per participated epoch.
    produced = {}
    for p_idx, producer in enumerate(report.producers):
        for epoch, index, crc in producer.get("batches", []):
            produced[(p_idx, epoch, index)] = crc
    stall_victims = {f.consumer for f in spec.faults if f.kind == "stall-at-batch"}
    problems = []
    for i, consumer in enumerate(report.consumers):
        p_idx = 0 if spec.mode == "shared" else i
        by_epoch: dict[int, list[tuple[int, int]]] = {}
        for epoch, index, crc in consumer.get("sequence", []):
            by_epoch.setdefault(epoch, []).append((index, crc))
        for epoch, items in by_epoch.items():
            indices = [x[0] for x in items]
            # A deliberately stalled consumer ends mid-epoch; it still must
            # have consumed an exact in-order prefix.
            expected = (
                list(range(len(indices))) if i in stall_victims
                else list(range(spec.epoch_len))
            )
            if indices != expected:
                problems.append(
                    f"consumer {i} epoch {epoch}: got {len(indices)} batches, "
                    f"in-order-complete={indices == sorted(set(indices))}"
                )
                continue
            for index, crc in items:
                want = produced.get((p_idx, epoch, index))
                if want != crc:
                    problems.append(
                        f"consumer {i} epoch {epoch} batch {index}: checksum "
                        f"{crc:#x} != produced {want!r}"
                    )
                    break
    checks.append(
        Check("exactly-once-in-order", not problems, "; ".join(problems) or "all sequences exact")
    )

    # No segment leaks at end of run.
    leaks = [p.get("end_live_segments", -1) for p in report.producers]
    checks.append(
        Check("zero-live-segments-at-end", all(v == 0 for v in leaks), f"end_live={leaks}")
    )

    # Memory bound: N+1 outside the rubberband window, window+N+1 inside.
    n = spec.buffer_depth
    win = retention_window(spec.rubberband_fraction, spec.epoch_len)
    bad = []
    for g, p in enumerate(report.producers):
        if p.get("peak_live_out_window", 0) > n + 1:
            bad.append(f"producer{g} out-of-window peak {p['peak_live_out_window']} > {n + 1}")
        if p.get("peak_live_in_window", 0) > win + n + 1:
            bad.append(f"producer{g} in-window peak {p['peak_live_in_window']} > {win + n + 1}")
    checks.append(Check("live-segment-bound", not bad, "; ".join(bad) or
                        f"peaks within N+1={n + 1} / win+N+1={win + n + 1}"))

    # Zero-copy write volume: payload written exactly once per batch.
    expected = spec.epochs * spec.epoch_len * spec.batch_nbytes
    vols = [p.get("bytes_written", -1) for p in report.producers]
    checks.append(
        Check(
            "write-volume-exactly-once",
            all(v == expected for v in vols),
            f"bytes_written={vols} expected={expected}",
        )
    )

    # Drift bound (clean runs only; replay intentionally exceeds it).
    if spec.clean:
        drifts = [p.get("drift_max", -1) for p in report.producers]
        checks.append(
            Check(
                "drift-bound",
                all(d <= spec.buffer_depth for d in drifts),
                f"max ack-cursor gap {drifts} <= N={spec.buffer_depth}",
            )
        )

    # Eviction liveness when a consumer goes silent.
    stall_faults = [f for f in spec.faults if f.kind == "stall-at-batch"]
    if stall_faults:
        producer = report.producers[0]
        evictions = producer.get("evictions", 0)
        ok = evictions == len(stall_faults)
        detail = f"evictions={evictions} expected={len(stall_faults)}"
        latency_bound = (
            spec.heartbeat_timeout_ms + 2 * spec.pause_poll_interval_ms
        ) / 1000
        for t, kind, info in producer.get("events", []):
            if kind == "consumer-gone" and "reason=timeout" in info:
                m = re.search(r"last_heartbeat=([0-9.]+)", info)
                if m:
                    latency = t - float(m.group(1))
                    detail += f" latency={latency:.3f}s bound={latency_bound:.3f}s"
                    ok = ok and latency <= latency_bound + 0.15  # scheduler slack
        survivors = [
            i for i, _ in enumerate(spec.consumers)
            if i not in {f.consumer for f in stall_faults}
        ]
        for i in survivors:
            epochs = report.consumers[i].get("epochs", [])
            done = sum(1 for e in epochs if e.get("batches") == spec.epoch_len)
            if done < spec.epochs:
                ok = False
                detail += f"; survivor {i} completed {done}/{spec.epochs} epochs"
        checks.append(Check("eviction-liveness", ok, detail))

    # Oracle conformance (skipped for scenarios that saturate the host).
    if spec.oracle_check:
        oracle = report.oracle[spec.mode]["per_consumer_samples_s"]
        bad = []
        for i, (measured, expected) in enumerate(
            zip(report.per_consumer_samples_s, oracle)
        ):
            if not _participated_fully(report.consumers[i], spec):
                continue
            if not math.isfinite(expected) or expected <= 0:
                continue
            err = abs(measured - expected) / expected
            if err > tol.oracle_rel:
                bad.append(f"consumer {i}: {measured:.1f} vs oracle {expected:.1f} ({err:.1%})")
        checks.append(
            Check("oracle-conformance", not bad, "; ".join(bad) or
                  f"all within {tol.oracle_rel:.0%} of oracle")
        )

    return checks


def _participated_fully(consumer_report: dict, spec: ScenarioSpec) -> bool:
    epochs = consumer_report.get("epochs", [])
    return any(e.get("batches") == spec.epoch_len for e in epochs)


def write_csv(path: str, results: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "scenario", "mode", "consumer", "compute_us", "pace_us",
                "samples_per_s", "oracle_samples_per_s", "producer_cpu_s",
            ]
        )
        for r in results:
            oracle = r.oracle[r.spec.mode]["per_consumer_samples_s"]
            for i, load in enumerate(r.spec.consumers):
                writer.writerow(
                    [
                        r.spec.name, r.spec.mode, i + 1, load.compute_us, load.pace_us,
                        f"{r.per_consumer_samples_s[i]:.2f}",
                        f"{oracle[i]:.2f}" if math.isfinite(oracle[i]) else "inf",
                        f"{r.producer_cpu_seconds:.2f}",
                    ]
                )
