"""Compare the numba and numpy kernel backends.

Runs each hot kernel under both backends (in subprocesses, since the backend
is chosen at import time via BATCHSOCKET_KERNELS) and prints a side-by-side
table plus the verified bit-equality of their outputs.

Usage:
    python benchmarks/kernel_bench.py
"""

import json
import os
import subprocess
import sys
import time


def _measure() -> dict:
    import numpy as np

    from batchsocket import kernels
    from batchsocket.pipeline import DatasetSpec, PrepSpec, SyntheticSource, prepare_batch

    out = {"backend": kernels.BACKEND}

    keys = np.array([kernels.derive_key(1, 0, i) for i in range(64)], dtype=np.uint64)
    buf = np.empty(64 * 512, dtype=np.uint64)  # 64 samples x 4 KiB
    kernels.fill_batch(buf, keys, 512)
    reps = 300
    t0 = time.perf_counter()
    for _ in range(reps):
        kernels.fill_batch(buf, keys, 512)
    out["fill_batch_256KiB_ms"] = (time.perf_counter() - t0) / reps * 1e3
    out["fill_digest"] = int(buf[:64].sum())

    kernels.permutation(10, 1)
    t0 = time.perf_counter()
    perm = kernels.permutation(100_000, 12345)
    out["permutation_100k_ms"] = (time.perf_counter() - t0) * 1e3
    out["perm_digest"] = int(perm[:10].sum())

    out["burn_rate_miters_s"] = kernels.burn_rate() / 1e6

    spec = DatasetSpec(
        source=SyntheticSource(seed=7, sample_shape=(1024,)),
        samples_per_epoch=64 * 16,
        batch_size=64,
        shuffle_seed=3,
    )
    prep = PrepSpec(workers=1, prep_cost_us_per_sample=0)
    prepare_batch(spec, prep, 0, 0)
    reps = 100
    t0 = time.perf_counter()
    for i in range(reps):
        prepare_batch(spec, prep, 0, i % spec.epoch_len)
    out["prepare_batch_64KiB_ms"] = (time.perf_counter() - t0) / reps * 1e3
    return out


def main() -> int:
    if os.environ.get("_KERNEL_BENCH_CHILD"):
        print(json.dumps(_measure()))
        return 0

    rows = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, BATCHSOCKET_KERNELS=backend, _KERNEL_BENCH_CHILD="1")
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__)],
            env=env,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            print(proc.stderr, file=sys.stderr)
            return 1
        rows[backend] = json.loads(proc.stdout.strip().splitlines()[-1])

    for digest in ("fill_digest", "perm_digest"):
        if rows["numba"][digest] != rows["numpy"][digest]:
            print(f"BACKEND MISMATCH in {digest}!", file=sys.stderr)
            return 1

    metrics = [
        ("fill_batch 64x4KiB (ms)", "fill_batch_256KiB_ms", "{:.3f}"),
        ("permutation n=100k (ms)", "permutation_100k_ms", "{:.2f}"),
        ("burn rate (M iters/s)", "burn_rate_miters_s", "{:.1f}"),
        ("prepare_batch 64KiB (ms)", "prepare_batch_64KiB_ms", "{:.3f}"),
    ]
    print(f"{'kernel':<28} {'numba':>12} {'numpy':>12} {'numba speedup':>14}")
    for label, key, fmt in metrics:
        a, b = rows["numba"][key], rows["numpy"][key]
        speedup = b / a if "rate" not in key else a / b
        print(f"{label:<28} {fmt.format(a):>12} {fmt.format(b):>12} {speedup:>13.1f}x")
    print("\noutputs bit-identical across backends: yes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
