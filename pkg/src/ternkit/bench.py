"""Throughput comparison of the packed ternary GEMM against the scalar float GEMM."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError
from .kernels import float_gemm, set_threads, ternary_gemm
from .packed import pack

CSV_HEADER = ("rows", "c", "filters", "float_ns", "ternary_ns", "speedup")
DEFAULT_SHAPES = ((1, 576, 64), (256, 576, 64), (1024, 576, 64), (1024, 1152, 64),
                  (4096, 576, 32), (1024, 2304, 128))


@dataclass(frozen=True)
class BenchReport:
    rows: int
    c: int
    filters: int
    float_ns: float
    ternary_ns: float
    checksum: int
    threads: int = 1

    @property
    def speedup(self) -> float:
        return self.float_ns / self.ternary_ns

    def csv_row(self) -> list:
        return [self.rows, self.c, self.filters, f"{self.float_ns:.0f}", f"{self.ternary_ns:.0f}",
                f"{self.speedup:.3f}"]


def _problem(rows, c, filters, rng):
    patches = rng.integers(-1, 2, size=(rows, c)).astype(np.int8)
    codes = rng.integers(-1, 2, size=(filters, c)).astype(np.int8)
    alphas = rng.uniform(0.05, 1.0, size=filters).astype(np.float32)
    return patches, codes, alphas


def _median_ns(fn, repetitions: int) -> float:
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples))


def bench_shape(rows: int, c: int, filters: int, repetitions: int = 5, threads: int = 1,
                seed: int = 0) -> BenchReport:
    """Time one GEMM shape on both paths.

    Both outputs are checked against each other before any timing: the float
    result divided by the filter scales must round to the popcount result.
    """
    rng = np.random.default_rng(seed)
    patches, codes, alphas = _problem(rows, c, filters, rng)
    dense_in = patches.astype(np.float32)
    dense_w = codes.astype(np.float32) * alphas[:, None]
    packed_in = pack(patches)
    packed_w = pack(codes, scales=alphas)

    ref = float_gemm(dense_in, dense_w, threads)
    out = ternary_gemm(packed_in, packed_w, threads=threads)
    exact = np.rint(out / alphas).astype(np.int64)
    if not np.array_equal(np.rint(ref / alphas).astype(np.int64), exact):
        raise IntegrityError(f"checksum mismatch at shape ({rows}, {c}, {filters})")
    checksum = int(exact.sum())

    float_ns = _median_ns(lambda: float_gemm(dense_in, dense_w, threads), repetitions)
    ternary_ns = _median_ns(lambda: ternary_gemm(packed_in, packed_w, threads=threads), repetitions)
    return BenchReport(rows, c, filters, float_ns, ternary_ns, checksum, threads)


def bench(shapes=DEFAULT_SHAPES, repetitions: int = 5, threads: int = 1) -> list[BenchReport]:
    set_threads(threads)
    # first call of each kernel pays for JIT loading; keep it out of the numbers
    bench_shape(1, 64, 1, repetitions=1, threads=threads)
    return [bench_shape(r, c, f, repetitions, threads) for r, c, f in shapes]


def reports_to_csv(reports, stream=None) -> str:
    stream = stream if stream is not None else io.StringIO()
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.csv_row())
    return stream.getvalue() if isinstance(stream, io.StringIO) else ""
