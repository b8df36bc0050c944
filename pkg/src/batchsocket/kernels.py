"""Hot numeric kernels: synthetic batch generation, seeded shuffling, CPU burn.

Two interchangeable backends produce bit-identical data:

* ``numba`` (default): ``@njit(nogil=True)`` loops. Releasing the GIL is what
  lets prep worker threads actually run in parallel.
* ``numpy``: vectorized fallback, selected with ``BATCHSOCKET_KERNELS=numpy``
  or used automatically when numba is unavailable.

All randomness derives from SplitMix64: word ``i`` of a stream keyed by ``k``
is ``mix64(k + (i+1)*GAMMA)``, so any party can regenerate any sample from
``(seed, epoch, sample_index)`` alone. The burn loop iterates the same mixer
to consume real CPU (never wall-clock sleep); ``burn_rate()`` calibrates
iterations/second once per process so callers can ask for microseconds.

``benchmarks/kernel_bench.py`` compares the two backends.
"""

from __future__ import annotations

import os
import threading
import time

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_M64 = (1 << 64) - 1

_U_GAMMA = np.uint64(_GAMMA)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int, reduced mod 2**64."""
    z = x & _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def derive_key(seed: int, epoch: int, index: int) -> int:
    """Stream key for (seed, epoch, index); each argument folded via mix64."""
    h = mix64((seed + _GAMMA) & _M64)
    h = mix64((h ^ epoch) + _GAMMA)
    h = mix64((h ^ index) + _GAMMA)
    return h


# -- numpy backend -----------------------------------------------------------

def _mix64_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U30)) * _U_MIX1
    z = (z ^ (z >> _U27)) * _U_MIX2
    return z ^ (z >> _U31)


def _fill_batch_np(out: np.ndarray, keys: np.ndarray, words_per_sample: int) -> None:
    steps = (np.arange(1, words_per_sample + 1, dtype=np.uint64)) * _U_GAMMA
    words = _mix64_arr(keys[:, None] + steps[None, :])
    out[: words.size] = words.reshape(-1)


def _permutation_np(n: int, key: int) -> np.ndarray:
    # Plain-Python Fisher-Yates; bit-identical to the jitted loop.
    perm = list(range(n))
    t = 0
    for i in range(n - 1, 0, -1):
        r = mix64((key + (t + 1) * _GAMMA) & _M64)
        t += 1
        j = r % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


_BURN_CHUNK = 8192


def _burn_np(iters: int) -> int:
    state = np.arange(1, _BURN_CHUNK + 1, dtype=np.uint64) * _U_GAMMA
    rounds = max(1, iters // _BURN_CHUNK)
    for _ in range(rounds):
        state = _mix64_arr(state + _U_GAMMA)
    return int(state[0])


# -- numba backend -----------------------------------------------------------

_requested = os.environ.get("BATCHSOCKET_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(
        f"BATCHSOCKET_KERNELS must be 'numba' or 'numpy', got {_requested!r}"
    )

_have_numba = False
if _requested == "numba":
    try:
        from numba import njit

        _have_numba = True
    except ImportError:
        _have_numba = False

if _have_numba:

    @njit("void(uint64[::1], uint64[::1], int64)", cache=True, nogil=True)
    def _fill_batch_nb(out, keys, words_per_sample):  # pragma: no cover - jitted
        for s in range(keys.shape[0]):
            base = s * words_per_sample
            k = keys[s]
            for w in range(words_per_sample):
                z = k + np.uint64(w + 1) * _U_GAMMA
                z = (z ^ (z >> _U30)) * _U_MIX1
                z = (z ^ (z >> _U27)) * _U_MIX2
                out[base + w] = z ^ (z >> _U31)

    @njit("int64[::1](int64, uint64)", cache=True, nogil=True)
    def _permutation_nb(n, key):  # pragma: no cover - jitted
        perm = np.empty(n, dtype=np.int64)
        for i in range(n):
            perm[i] = i
        t = np.uint64(0)
        one = np.uint64(1)
        for i in range(n - 1, 0, -1):
            z = key + (t + one) * _U_GAMMA
            t = t + one
            z = (z ^ (z >> _U30)) * _U_MIX1
            z = (z ^ (z >> _U27)) * _U_MIX2
            r = z ^ (z >> _U31)
            j = np.int64(r % np.uint64(i + 1))
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        return perm

    @njit("uint64(uint64)", cache=True, nogil=True)
    def _burn_nb(iters):  # pragma: no cover - jitted
        x = np.uint64(0x243F6A8885A308D3)
        for _ in range(iters):
            x = x + _U_GAMMA
            z = x
            z = (z ^ (z >> _U30)) * _U_MIX1
            z = (z ^ (z >> _U27)) * _U_MIX2
            x = z ^ (z >> _U31)
        return x

    BACKEND = "numba"
else:
    BACKEND = "numpy"


def fill_batch(out: np.ndarray, keys: np.ndarray, words_per_sample: int) -> None:
    """Fill a flat uint64 buffer with one stream segment per key.

    ``out`` must hold ``len(keys) * words_per_sample`` words. Output is
    identical across backends.
    """
    if BACKEND == "numba":
        _fill_batch_nb(out, keys, words_per_sample)
    else:
        _fill_batch_np(out, keys, words_per_sample)


def permutation(n: int, key: int) -> np.ndarray:
    """Fisher-Yates permutation of 0..n-1 driven by the SplitMix64 stream."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if BACKEND == "numba":
        return _permutation_nb(n, np.uint64(key & _M64))
    return _permutation_np(n, key & _M64)


def burn(iters: int) -> int:
    """Spin the mixer for roughly ``iters`` iterations of real CPU work."""
    global _burned
    if iters <= 0:
        return 0
    with _burned_lock:
        _burned += iters
    if BACKEND == "numba":
        return int(_burn_nb(np.uint64(iters)))
    return _burn_np(iters)


_rate_lock = threading.Lock()
_rate: float | None = None
_burned = 0
_burned_lock = threading.Lock()


def burned_iterations() -> int:
    """Total burn iterations issued by this process.

    Work-based CPU accounting: iterations divided by the calibrated rate give
    CPU-seconds of simulated cost, independent of how truthfully the host
    meters process CPU time (virtualized hosts can mis-report it badly).
    """
    with _burned_lock:
        return _burned


def set_burn_rate(rate: float) -> None:
    """Pin the burn calibration (iterations/second).

    Experiment orchestrators calibrate once on a quiet machine and pin the
    same rate into every spawned process, so simulated costs mean the same
    number of iterations everywhere regardless of startup load.
    """
    global _rate
    if rate <= 0:
        raise ValueError("rate must be positive")
    with _rate_lock:
        _rate = rate


def burn_rate() -> float:
    """Calibrated burn iterations per second for the active backend.

    Measured once per process (max over several short samples; contention can
    only slow a sample down, so the max tracks the uncontended rate).
    """
    global _rate
    with _rate_lock:
        if _rate is not None:
            return _rate
        burn(10_000)  # warm up (JIT compile / allocation)
        iters = 200_000
        # Scale the sample size until one sample takes ~10 ms.
        while True:
            t0 = time.perf_counter()
            burn(iters)
            dt = time.perf_counter() - t0
            if dt >= 0.010 or iters >= 1 << 30:
                break
            iters *= 4
        best = iters / dt
        for _ in range(6):
            t0 = time.perf_counter()
            burn(iters)
            dt = time.perf_counter() - t0
            best = max(best, iters / dt)
        _rate = best
        return _rate


def burn_us(us: float) -> None:
    """Consume approximately ``us`` microseconds of CPU (not wall sleep)."""
    if us <= 0:
        return
    burn(int(us * burn_rate() / 1e6))
