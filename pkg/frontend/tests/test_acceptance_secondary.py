"""Secondary acceptance: facade fidelity and throughput against the native
tooling, talking to it only through the CLI, wire format, and segment ABI."""

import json
import os
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from sharedloader import SharedLoader, TensorProducer


def _spawn(cmd, log_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    return subprocess.Popen(
        cmd, stdout=open(log_path, "w"), stderr=subprocess.STDOUT, env=env
    )


def _native(*args):
    return [sys.executable, "-m", "batchsocket", *args]


def test_criterion_11a_facade_roundtrip_fidelity(tmp_path):
    """10-batch, 2-consumer run: element-wise equality through the facade."""
    rng = np.random.default_rng(7)
    batches = [
        (
            rng.standard_normal((8, 3, 4)).astype(np.float32),
            rng.integers(0, 10, size=8).astype(np.int64),
        )
        for _ in range(10)
    ]
    b, a = f"unix:{tmp_path}/rb.sock", f"unix:{tmp_path}/ra.sock"
    producer = TensorProducer(batches, broadcast=b, aggregate=a)

    def run():
        for _ in range(1):
            for _ in producer:
                pass
        producer.join()

    pt = threading.Thread(target=run, daemon=True)
    pt.start()

    results = {}

    def consume(cid):
        loader = SharedLoader(b, a, consumer_id=cid)
        got = []
        for inp, tgt in loader:
            got.append((np.array(inp), np.array(tgt)))
        results[cid] = got
        loader.close()

    threads = [threading.Thread(target=consume, args=(cid,)) for cid in (61, 62)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    pt.join(60)

    passed = True
    for cid in (61, 62):
        got = results.get(cid, [])
        if len(got) != 10:
            passed = False
            break
        for (inp, tgt), (want_inp, want_tgt) in zip(got, batches):
            if not (np.array_equal(inp, want_inp) and np.array_equal(tgt, want_tgt)):
                passed = False
    print(f"[{'PASS' if passed else 'FAIL'}] 11a facade-roundtrip-fidelity: "
          f"10 batches x 2 consumers element-wise equal")
    assert passed


def test_criterion_11b_facade_throughput(tmp_path):
    """Facade loader sustains >= 75% of the native consumer's throughput.

    One native producer in the consumer-bound 4-way shape: three native CLI
    consumers and this facade loader, all paced identically; rates compared
    within the same run.
    """
    b, a = f"unix:{tmp_path}/tb.sock", f"unix:{tmp_path}/ta.sock"
    epoch_len, batch_size, pace_us = 150, 64, 20000
    procs = [
        (
            "producer",
            _spawn(
                _native(
                    "produce",
                    "--epochs", "1",
                    "--epoch-len", str(epoch_len),
                    "--batch-size", str(batch_size),
                    "--sample-bytes", "256",
                    "--prep-cost-us", "15",
                    "--min-consumers", "4",
                    "--broadcast", b,
                    "--aggregate", a,
                    "--report", f"{tmp_path}/p.json",
                ),
                f"{tmp_path}/p.log",
            ),
        )
    ]
    for i in (1, 2, 3):
        procs.append(
            (
                f"native{i}",
                _spawn(
                    _native(
                        "consume",
                        "--id", str(i),
                        "--pace-us", str(pace_us),
                        "--epochs", "1",
                        "--broadcast", b,
                        "--aggregate", a,
                        "--report", f"{tmp_path}/c{i}.json",
                    ),
                    f"{tmp_path}/c{i}.log",
                ),
            )
        )

    loader = SharedLoader(b, a, consumer_id=4, connect_timeout_s=40.0)
    stamps = []
    for inp, tgt in loader:
        stamps.append(time.monotonic())
        assert tgt is None and inp.shape == (batch_size, 256)
        time.sleep(pace_us / 1e6)
    loader.close()

    deadline = time.monotonic() + 60
    for name, p in procs:
        remaining = max(1.0, deadline - time.monotonic())
        assert p.wait(timeout=remaining) == 0, f"{name} failed"

    assert len(stamps) == epoch_len
    facade_rate = (len(stamps) - 1) / (stamps[-1] - stamps[0])
    native_rates = []
    for i in (1, 2, 3):
        with open(f"{tmp_path}/c{i}.json") as fh:
            report = json.load(fh)
        native_rates.append(report["epochs"][0]["batches_per_s"])
    native_mean = sum(native_rates) / len(native_rates)
    ratio = facade_rate / native_mean
    passed = ratio >= 0.75
    print(
        f"[{'PASS' if passed else 'FAIL'}] 11b facade-throughput: facade "
        f"{facade_rate:.1f} b/s vs native mean {native_mean:.1f} b/s "
        f"(ratio {ratio:.2f} >= 0.75)"
    )
    assert passed
