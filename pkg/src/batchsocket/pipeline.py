"""Batch preparation: dataset sources, seeded shuffle, and the worker pool.

Preparation is deterministic: for a fixed dataset spec, epoch, and batch
index the produced bytes are identical across runs and processes, so any
party can independently recompute a batch and its checksum. Simulated
pre-processing cost is real CPU burn (see ``kernels``), never sleep, so
process CPU accounting in experiments reflects actual work.
"""

from __future__ import annotations

import math
import os
import queue
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Union

import numpy as np

from . import kernels
from .wire import DType

_SHUFFLE_DOMAIN = 0x53485546  # keeps shuffle keys out of the sample-key space


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticSource:
    """Samples generated from a counter-based PRNG; nothing touches disk."""

    seed: int = 0
    sample_shape: tuple[int, ...] = (256,)
    dtype: DType = DType.U8

    @property
    def sample_nbytes(self) -> int:
        return int(np.prod(self.sample_shape)) * self.dtype.size


@dataclass(frozen=True)
class DirectorySource:
    """Flat directory of equally sized binary files.

    ``manifest.txt`` (one filename per line) fixes the sample order before
    shuffling; files follow the ``sample-%08d.bin`` convention.
    """

    path: str
    sample_bytes: int


@dataclass(frozen=True)
class DatasetSpec:
    source: Union[SyntheticSource, DirectorySource]
    samples_per_epoch: int
    batch_size: int
    shuffle_seed: int = 0
    reshuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples_per_epoch < self.batch_size:
            raise ValueError("samples_per_epoch must be >= batch_size")
        if isinstance(self.source, SyntheticSource) and self.source.sample_nbytes % 8:
            raise ValueError(
                "synthetic sample size must be a multiple of 8 bytes "
                f"(got {self.source.sample_nbytes})"
            )

    @property
    def epoch_len(self) -> int:
        """Batches per epoch; the ragged final batch is dropped."""
        return self.samples_per_epoch // self.batch_size

    @property
    def batch_dtype(self) -> DType:
        if isinstance(self.source, SyntheticSource):
            return self.source.dtype
        return DType.U8

    @property
    def batch_shape(self) -> tuple[int, ...]:
        if isinstance(self.source, SyntheticSource):
            return (self.batch_size, *self.source.sample_shape)
        return (self.batch_size, self.source.sample_bytes)

    @property
    def batch_nbytes(self) -> int:
        if isinstance(self.source, SyntheticSource):
            return self.batch_size * self.source.sample_nbytes
        return self.batch_size * self.source.sample_bytes


@dataclass(frozen=True)
class PrepSpec:
    workers: int = 1
    prep_cost_us_per_sample: int = 0
    aux_cost_us_per_batch: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.prep_cost_us_per_sample < 0 or self.aux_cost_us_per_batch < 0:
            raise ValueError("costs must be >= 0")


@lru_cache(maxsize=8)
def epoch_order(spec: DatasetSpec, epoch: int) -> np.ndarray:
    """Deterministic permutation of sample indices for one epoch.

    SplitMix64-keyed Fisher-Yates; identical across runs, processes, and
    kernel backends. With ``reshuffle_each_epoch=False`` every epoch reuses
    the epoch-0 permutation.
    """
    effective = epoch if spec.reshuffle_each_epoch else 0
    key = kernels.derive_key(spec.shuffle_seed, effective, _SHUFFLE_DOMAIN)
    return kernels.permutation(spec.samples_per_epoch, key)


@lru_cache(maxsize=4)
def _manifest(path: str) -> tuple[str, ...]:
    manifest = os.path.join(path, "manifest.txt")
    try:
        with open(manifest, "r", encoding="utf-8") as fh:
            names = tuple(line.strip() for line in fh if line.strip())
    except FileNotFoundError:
        raise PipelineError(f"missing manifest: {manifest}") from None
    if not names:
        raise PipelineError(f"empty manifest: {manifest}")
    return names


def write_directory_dataset(path: str, num_samples: int, sample_bytes: int, seed: int = 0) -> None:
    """Materialize a synthetic-looking directory dataset (tests, demos)."""
    if sample_bytes % 8:
        raise ValueError("sample_bytes must be a multiple of 8")
    os.makedirs(path, exist_ok=True)
    names = []
    words = sample_bytes // 8
    buf = np.empty(words, dtype=np.uint64)
    for i in range(num_samples):
        name = f"sample-{i:08d}.bin"
        keys = np.array([kernels.derive_key(seed, 0, i)], dtype=np.uint64)
        kernels.fill_batch(buf, keys, words)
        with open(os.path.join(path, name), "wb") as fh:
            fh.write(buf.tobytes())
        names.append(name)
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")


def prepare_batch(
    spec: DatasetSpec,
    prep: PrepSpec,
    epoch: int,
    batch_index: int,
    out: bytearray | memoryview | None = None,
) -> tuple[DType, tuple[int, ...], bytearray | memoryview]:
    """Prepare one batch into ``out`` (allocated when omitted).

    Bytes are a pure function of (spec, epoch, batch_index); the simulated
    pre-processing cost burns CPU after the bytes are in place.
    """
    if batch_index >= spec.epoch_len:
        raise ValueError(f"batch_index {batch_index} >= epoch_len {spec.epoch_len}")
    nbytes = spec.batch_nbytes
    if out is None:
        out = bytearray(nbytes)
    if len(out) != nbytes:
        raise ValueError(f"out buffer is {len(out)} bytes, batch needs {nbytes}")

    order = epoch_order(spec, epoch)
    lo = batch_index * spec.batch_size
    indices = order[lo : lo + spec.batch_size]

    src = spec.source
    if isinstance(src, SyntheticSource):
        words = src.sample_nbytes // 8
        keys = np.array(
            [kernels.derive_key(src.seed, epoch, int(i)) for i in indices],
            dtype=np.uint64,
        )
        kernels.fill_batch(np.frombuffer(out, dtype=np.uint64), keys, words)
    else:
        names = _manifest(src.path)
        mv = memoryview(out)
        for slot, sample_index in enumerate(indices):
            if sample_index >= len(names):
                raise PipelineError(
                    f"sample {sample_index} beyond manifest ({len(names)} entries)"
                )
            name = names[sample_index]
            filepath = os.path.join(src.path, name)
            try:
                with open(filepath, "rb") as fh:
                    data = fh.read(src.sample_bytes + 1)
            except FileNotFoundError:
                raise PipelineError(f"missing sample {sample_index}: {filepath}") from None
            if len(data) != src.sample_bytes:
                raise PipelineError(
                    f"sample {sample_index} ({filepath}) is {len(data)} bytes, "
                    f"expected {src.sample_bytes}"
                )
            mv[slot * src.sample_bytes : (slot + 1) * src.sample_bytes] = data

    kernels.burn_us(prep.prep_cost_us_per_sample * spec.batch_size + prep.aux_cost_us_per_batch)
    return spec.batch_dtype, spec.batch_shape, out


def prep_throughput(prep: PrepSpec, spec: DatasetSpec) -> float:
    """Analytic preparation capacity in batches/second.

    ``workers * 1e6 / (prep_cost_us_per_sample * batch_size + aux_cost)``;
    the oracle the experiment harness compares measurements against.
    """
    denom = prep.prep_cost_us_per_sample * spec.batch_size + prep.aux_cost_us_per_batch
    if denom == 0:
        return math.inf
    return prep.workers * 1e6 / denom


@dataclass
class PreparedBatch:
    seq: int
    epoch: int
    batch_index: int
    dtype: DType
    shape: tuple[int, ...]
    buffer: bytearray


@dataclass
class _Task:
    seq: int
    epoch: int
    batch_index: int


class PrepPool:
    """Worker threads preparing batches, delivered strictly in submit order.

    The pool hands finished batches to ``sink`` (which must not block) and
    recycles scratch buffers returned via :meth:`recycle`. Capacity is
    bounded by the scratch pool: ``workers + depth + 1`` buffers exist, so a
    coordinator that stops consuming stalls the workers rather than growing
    memory. Kernels release the GIL, so workers genuinely run in parallel.
    """

    def __init__(
        self,
        dataset: DatasetSpec,
        prep: PrepSpec,
        depth: int,
        sink: Callable[[PreparedBatch], None],
    ):
        self.dataset = dataset
        self.prep = prep
        self._sink = sink
        self._tasks: queue.Queue = queue.Queue()
        self._scratch: queue.Queue = queue.Queue()
        for _ in range(prep.workers + depth + 1):
            self._scratch.put(bytearray(dataset.batch_nbytes))
        self._emit_cond = threading.Condition()
        self._next_emit = 0
        self._calls = 0
        self._calls_lock = threading.Lock()
        self._error: Exception | None = None
        self._threads = [
            threading.Thread(target=self._work, name=f"prep-{i}", daemon=True)
            for i in range(prep.workers)
        ]
        self._started = False

    def start(self) -> None:
        if not self._started:
            self._started = True
            for t in self._threads:
                t.start()

    @property
    def calls(self) -> int:
        with self._calls_lock:
            return self._calls

    @property
    def error(self) -> Exception | None:
        return self._error

    def submit(self, seq: int, epoch: int, batch_index: int) -> None:
        self._tasks.put(_Task(seq, epoch, batch_index))

    def recycle(self, buffer: bytearray) -> None:
        self._scratch.put(buffer)

    def close(self) -> None:
        for _ in self._threads:
            self._tasks.put(None)
        with self._emit_cond:
            self._next_emit = -1  # unblock workers waiting for their turn
            self._emit_cond.notify_all()
        for t in self._threads:
            t.join(timeout=5.0)

    def _work(self) -> None:
        while True:
            task = self._tasks.get()
            if task is None:
                return
            buf = self._scratch.get()
            with self._calls_lock:
                self._calls += 1
            try:
                dtype, shape, _ = prepare_batch(
                    self.dataset, self.prep, task.epoch, task.batch_index, buf
                )
            except Exception as exc:
                self._error = exc
                self._sink(None)  # wake the coordinator so it can fail fast
                return
            batch = PreparedBatch(task.seq, task.epoch, task.batch_index, dtype, shape, buf)
            with self._emit_cond:
                while self._next_emit not in (-1, task.seq):
                    self._emit_cond.wait()
                if self._next_emit == -1:
                    return
                self._sink(batch)
                self._next_emit += 1
                self._emit_cond.notify_all()
