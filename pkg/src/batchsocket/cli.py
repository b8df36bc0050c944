"""Command-line entry points: ``produce``, ``consume``, and ``bench``.

``produce`` runs the shared loader server, ``consume`` simulates one training
process against it, and ``bench`` orchestrates whole experiment scenarios.
Endpoints default from ``BATCHSOCKET_BROADCAST`` / ``BATCHSOCKET_AGGREGATE``
when the flags are omitted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import resource
import sys
import time

from . import kernels
from .consumer import (
    ConsumerConfig,
    EndOfStream,
    EpochBoundary,
    connect,
)
from .pipeline import DatasetSpec, DirectorySource, PrepSpec, SyntheticSource
from .producer import Producer, ProducerConfig

log = logging.getLogger(__name__)

ENV_BROADCAST = "BATCHSOCKET_BROADCAST"
ENV_AGGREGATE = "BATCHSOCKET_AGGREGATE"


def _endpoint_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--broadcast",
        default=os.environ.get(ENV_BROADCAST),
        help=f"broadcast endpoint (default: ${ENV_BROADCAST})",
    )
    parser.add_argument(
        "--aggregate",
        default=os.environ.get(ENV_AGGREGATE),
        help=f"aggregation endpoint (default: ${ENV_AGGREGATE})",
    )


def _require_endpoints(args) -> None:
    if not args.broadcast or not args.aggregate:
        raise SystemExit(
            "endpoints required: pass --broadcast/--aggregate or set "
            f"{ENV_BROADCAST}/{ENV_AGGREGATE}"
        )


def _write_report(path: str | None, payload: dict) -> None:
    if not path:
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def _add_produce_parser(sub) -> None:
    p = sub.add_parser("produce", help="run the shared data-loading producer")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--epoch-len", type=int, default=100, help="batches per epoch")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--buffer-depth", type=int, default=2)
    p.add_argument("--rubberband", type=float, default=0.02)
    p.add_argument("--heartbeat-ms", type=int, default=1000)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--poll-ms", type=int, default=100)
    p.add_argument(
        "--source",
        default="synthetic",
        help="'synthetic' or 'dir:PATH' (flat directory with manifest.txt)",
    )
    p.add_argument("--sample-bytes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--prep-cost-us", type=int, default=0, help="CPU burn per sample")
    p.add_argument("--aux-cost-us", type=int, default=0, help="CPU burn per batch")
    p.add_argument("--burn-rate", type=float, default=None,
                   help="pin burn calibration (iterations/s) instead of measuring")
    p.add_argument("--no-reshuffle", action="store_true")
    p.add_argument("--verify-checksums", action="store_true")
    p.add_argument("--min-consumers", type=int, default=1,
                   help="hold the first announcement until this many consumers joined")
    p.add_argument("--drain-timeout-ms", type=int, default=15000)
    _endpoint_args(p)
    p.add_argument("--report", help="write the run report JSON here")


def _cmd_produce(args) -> int:
    _require_endpoints(args)
    if args.source == "synthetic":
        source = SyntheticSource(seed=args.seed, sample_shape=(args.sample_bytes,))
    elif args.source.startswith("dir:"):
        path = args.source[4:]
        manifest = os.path.join(path, "manifest.txt")
        with open(manifest, "r", encoding="utf-8") as fh:
            first = fh.readline().strip()
        sample_bytes = os.path.getsize(os.path.join(path, first))
        source = DirectorySource(path=path, sample_bytes=sample_bytes)
    else:
        raise SystemExit(f"unknown source {args.source!r}")

    dataset = DatasetSpec(
        source=source,
        samples_per_epoch=args.epoch_len * args.batch_size,
        batch_size=args.batch_size,
        shuffle_seed=args.seed,
        reshuffle_each_epoch=not args.no_reshuffle,
    )
    prep = PrepSpec(
        workers=args.workers,
        prep_cost_us_per_sample=args.prep_cost_us,
        aux_cost_us_per_batch=args.aux_cost_us,
    )
    config = ProducerConfig(
        broadcast_endpoint=args.broadcast,
        aggregate_endpoint=args.aggregate,
        epoch_count=args.epochs,
        buffer_depth=args.buffer_depth,
        rubberband_fraction=args.rubberband,
        heartbeat_interval_ms=args.heartbeat_ms,
        heartbeat_timeout_ms=args.timeout_ms,
        pause_poll_interval_ms=args.poll_ms,
        verify_checksums=args.verify_checksums,
        min_consumers=args.min_consumers,
        drain_timeout_ms=args.drain_timeout_ms,
    )
    if args.burn_rate:
        kernels.set_burn_rate(args.burn_rate)
    elif args.prep_cost_us or args.aux_cost_us:
        kernels.burn_rate()  # calibrate before serving, not during the first batch

    producer = Producer(config, dataset, prep)
    try:
        report = producer.run()
    except Exception as exc:
        log.error("producer failed: %s", exc)
        _write_report(args.report, {"kind": "producer", "fatal": str(exc)})
        return 1
    _write_report(args.report, {"kind": "producer", "kernels": kernels.BACKEND, **report.to_dict()})
    return 0


def _add_consume_parser(sub) -> None:
    p = sub.add_parser("consume", help="run one simulated training consumer")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--compute-us", type=int, default=0, help="CPU burn per batch")
    p.add_argument(
        "--pace-us",
        type=int,
        default=0,
        help="additional wall-clock per batch with the CPU idle "
        "(emulates accelerator-side step time)",
    )
    p.add_argument("--epochs", type=int, default=0, help="leave after N epochs (0: run to shutdown)")
    p.add_argument("--burn-rate", type=float, default=None,
                   help="pin burn calibration (iterations/s) instead of measuring")
    p.add_argument("--queue-capacity", type=int, default=None)
    p.add_argument("--heartbeat-ms", type=int, default=1000)
    p.add_argument("--verify-checksums", action="store_true")
    p.add_argument("--connect-timeout-ms", type=int, default=20000)
    p.add_argument(
        "--ready-file",
        help="touch this file once imports and calibration are done "
        "(lets an orchestrator line up simultaneous starts)",
    )
    p.add_argument("--wait-signal", help="poll for this file before connecting")
    p.add_argument(
        "--stall-at-batch",
        type=int,
        default=None,
        help="after fetching N batches go silent (no acks, no heartbeats) "
        "and wait to be evicted",
    )
    _endpoint_args(p)
    p.add_argument("--report", help="write the consumer report JSON here")


def _cmd_consume(args) -> int:
    _require_endpoints(args)
    if args.burn_rate:
        kernels.set_burn_rate(args.burn_rate)
    elif args.compute_us:
        kernels.burn_rate()
    if args.ready_file:
        with open(args.ready_file, "w"):
            pass
    if args.wait_signal:
        while not os.path.exists(args.wait_signal):
            time.sleep(0.002)

    config = ConsumerConfig(
        consumer_id=args.id,
        broadcast_endpoint=args.broadcast,
        aggregate_endpoint=args.aggregate,
        queue_capacity=args.queue_capacity,
        heartbeat_interval_ms=args.heartbeat_ms,
        verify_checksums=args.verify_checksums,
        connect_timeout_ms=args.connect_timeout_ms,
    )
    t_connect = time.monotonic()
    session = connect(config)

    sequence: list[tuple[int, int, int]] = []
    epoch_stats: list[dict] = []
    fetch_times: list[float] = []
    batch_samples = 0
    fetched_total = 0
    epochs_done = 0
    current_epoch = 0
    end_reason = "epochs-complete"
    stalled_at: float | None = None
    pace_s = args.pace_us / 1e6

    def finish_epoch(epoch: int) -> None:
        nonlocal fetch_times
        n = len(fetch_times)
        rate = None
        if n >= 2:
            span = fetch_times[-1] - fetch_times[0]
            if span > 0:
                rate = (n - 1) / span
        epoch_stats.append(
            {
                "epoch": epoch,
                "batches": n,
                "batches_per_s": rate,
                "samples_per_s": rate * batch_samples if rate else None,
                "wall_s": fetch_times[-1] - fetch_times[0] if n >= 2 else 0.0,
            }
        )
        fetch_times = []

    try:
        while True:
            item = session.next_batch()
            if isinstance(item, EndOfStream):
                end_reason = item.reason
                break
            if isinstance(item, EpochBoundary):
                finish_epoch(item.epoch)
                epochs_done += 1
                if args.epochs and epochs_done >= args.epochs:
                    session.close()
                    break
                continue
            d = item.descriptor
            batch_samples = d.shape[0] if d.shape else 1
            current_epoch = d.epoch
            sequence.append((d.epoch, d.batch_index, d.checksum))
            fetch_times.append(time.monotonic())
            item.close()
            fetched_total += 1
            if args.stall_at_batch is not None and fetched_total >= args.stall_at_batch:
                stalled_at = time.monotonic()
                session.stop_heartbeats()
                end_reason = "stalled"
                # Hold the connections open in silence; the producer must
                # evict us by heartbeat timeout, which closes our broadcast
                # channel.
                session.wait_ended(timeout=60.0)
                break
            if args.compute_us:
                kernels.burn_us(args.compute_us)
            if pace_s:
                time.sleep(pace_s)
        if fetch_times:
            finish_epoch(current_epoch)  # partial epoch (stall or shutdown)
    finally:
        session.close()

    ru = resource.getrusage(resource.RUSAGE_SELF)
    report = {
        "kind": "consumer",
        "consumer_id": args.id,
        "kernels": kernels.BACKEND,
        "epochs": epoch_stats,
        "sequence": sequence,
        "fetched": fetched_total,
        "end_reason": end_reason,
        "stalled_at": stalled_at,
        "wall_seconds": time.monotonic() - t_connect,
        "cpu_seconds": ru.ru_utime + ru.ru_stime,
        "compute_us": args.compute_us,
        "pace_us": args.pace_us,
    }
    _write_report(args.report, report)
    return 0


def _add_bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="run an experiment scenario")
    p.add_argument("--scenario", help="builtin scenario name or a TOML file path")
    p.add_argument("--out", help="write the scenario report JSON here (CSV alongside)")
    p.add_argument("--list-builtin", action="store_true")
    p.add_argument("--workdir", help="keep scratch files here instead of a temp dir")


def _cmd_bench(args) -> int:
    from . import harness

    if args.list_builtin:
        for name in harness.builtin_names():
            print(name)
        return 0
    if not args.scenario:
        raise SystemExit("--scenario NAME|file.toml required (or --list-builtin)")
    specs = harness.load_scenario(args.scenario)
    results = [harness.run_scenario(spec, workdir=args.workdir) for spec in specs]
    payload = {"kind": "bench", "results": [r.to_dict() for r in results]}
    if args.out:
        _write_report(args.out, payload)
        csv_path = os.path.splitext(args.out)[0] + ".csv"
        harness.write_csv(csv_path, results)
        print(f"wrote {args.out} and {csv_path}")
    else:
        json.dump(payload, sys.stdout, indent=1)
        print()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="batchsocket",
        description="shared data loading over local sockets and shared memory",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_produce_parser(sub)
    _add_consume_parser(sub)
    _add_bench_parser(sub)
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command == "produce":
        return _cmd_produce(args)
    if args.command == "consume":
        return _cmd_consume(args)
    return _cmd_bench(args)


if __name__ == "__main__":
    sys.exit(main())
