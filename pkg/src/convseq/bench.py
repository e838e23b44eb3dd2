"""Compute/memory scaling harness.

Runs forward+backward over random encoded sequences through both encoders
across a ladder of sequence lengths, recording median wall time, the
numerics engine's own peak-allocation high-water mark, and analytic MAC
counts. Log-log slopes over the ladder separate the pyramid's linear
growth from attention's quadratic growth. Runs are single-threaded by
contract so timings stay interpretable.
"""

from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionParams, attention_encoder_forward, attention_total_macs
from .optim import zero_grads
from .pyramid import ConvBlockParams, cds_forward, count_flops, plan_schedule
from .tensor import Tensor, blas_thread_count, sum_all, track_allocations


class BenchError(RuntimeError):
    """The harness refused to run (thread contract) or cannot fit a slope."""


class InsufficientDataError(BenchError):
    """Fewer valid samples than a slope fit needs."""


@dataclass
class ScalingSample:
    encoder: str            # "cds" | "attention"
    length: int
    batch_size: int
    wall_seconds: float | None
    peak_bytes: int | None
    mac_count: int
    oom: bool = False


def greedy_schedule(length: int) -> list:
    """Halve with (2, 2) layers while the length exceeds 7, then collapse
    the remainder with one full-width layer. Depth stays logarithmic and
    per-layer cost geometric, so total work is linear in the length.
    """
    layers = []
    current = length
    while current > 7:
        layers.append((2, 2))
        current = (current + 1) // 2
    layers.append((current, current))
    return layers


def _build_batch(length: int, batch_size: int, d_v: int, rng) -> list[Tensor]:
    return [Tensor(rng.uniform(-1, 1, (length, d_v)), requires_grad=True)
            for _ in range(batch_size)]


def _run_batch(forward, batch, params) -> None:
    for z in batch:
        loss = sum_all(forward(z))
        loss.backward()
        z.grad = None
    zero_grads(params)


def _measure_one(encoder: str, length: int, batch_size: int, d_v: int,
                 schedule_family, repetitions: int, rng) -> ScalingSample:
    if encoder == "cds":
        layers = schedule_family(length)
        plan = plan_schedule(length, layers)
        block_rng = np.random.default_rng(1234)
        blocks = [ConvBlockParams(d_v, k, block_rng, index=i)
                  for i, (k, _) in enumerate(plan.layers)]
        params = [p for b in blocks for p in b.parameters()]

        def forward(z):
            return cds_forward(z, blocks, plan)

        macs = count_flops(plan, d_v) * batch_size
    elif encoder == "attention":
        attn = AttentionParams(d_v, heads=4, rng=np.random.default_rng(1234))
        params = attn.parameters()

        def forward(z):
            return attention_encoder_forward(attn, z)

        macs = attention_total_macs(length, d_v) * batch_size
    else:
        raise BenchError(f"unknown encoder {encoder!r}")

    try:
        batch = _build_batch(length, batch_size, d_v, rng)
        with track_allocations() as tracker:
            _run_batch(forward, batch, params)
        peak = tracker.peak_bytes
        times = []
        for _ in range(2 + repetitions):
            start = time.perf_counter()
            _run_batch(forward, batch, params)
            times.append(time.perf_counter() - start)
        wall = float(np.median(times[2:]))
    except MemoryError:
        return ScalingSample(encoder, length, batch_size, None, None, macs, oom=True)
    finally:
        gc.collect()
    return ScalingSample(encoder, length, batch_size, wall, peak, macs)


def measure_scaling(lengths, batch_size: int, d_v: int, schedule_family=greedy_schedule,
                    repetitions: int = 5, seed: int = 0,
                    encoders: tuple = ("cds", "attention")) -> list[ScalingSample]:
    """Measure both encoders across ascending lengths; one sample each.

    Peak bytes are taken from a dedicated tracked run, then wall time is
    the median of ``repetitions`` untracked runs after 2 warmup runs.
    """
    if list(lengths) != sorted(lengths):
        raise BenchError("lengths must be ascending")
    if repetitions < 5:
        raise BenchError(f"need at least 5 repetitions, got {repetitions}")
    samples = []
    with threadpool_limits(limits=1):
        threads = blas_thread_count()
        if threads != 1:
            raise BenchError(f"refusing to benchmark with {threads} BLAS threads")
        for encoder in encoders:
            for length in lengths:
                rng = np.random.default_rng([seed, length])
                samples.append(_measure_one(encoder, length, batch_size, d_v,
                                            schedule_family, repetitions, rng))
    return samples


def fit_loglog_slope(pairs) -> tuple[float, float]:
    """Least-squares slope and R^2 of log(metric) against log(length).

    ``pairs`` is a list of (length, metric); OOM/None entries are dropped
    before fitting. Needs at least 4 valid points spanning 8x in length.
    """
    valid = [(length, value) for length, value in pairs if value is not None and value > 0]
    if len(valid) < 4:
        raise InsufficientDataError(f"slope fit needs >= 4 samples, got {len(valid)}")
    lengths = np.array([v[0] for v in valid], dtype=np.float64)
    if lengths.max() / lengths.min() < 8.0:
        raise InsufficientDataError("slope fit needs lengths spanning at least 8x")
    x = np.log(lengths)
    y = np.log([v[1] for v in valid])
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    ss_res = float(((y - predicted) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), r2


def slopes_by_encoder(samples, metric: str) -> dict:
    out = {}
    for encoder in sorted({s.encoder for s in samples}):
        pairs = [(s.length, getattr(s, metric)) for s in samples if s.encoder == encoder]
        out[encoder] = fit_loglog_slope(pairs)
    return out


def write_samples_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encoder", "L", "batch", "median_seconds", "peak_bytes", "mac_count"])
        for s in samples:
            writer.writerow([
                s.encoder, s.length, s.batch_size,
                "oom" if s.oom else f"{s.wall_seconds:.6f}",
                "oom" if s.oom else s.peak_bytes,
                s.mac_count,
            ])


def write_samples_dat(samples, path) -> None:
    """Gnuplot-friendly dump: one indexed block per encoder."""
    with open(path, "w") as fh:
        for encoder in sorted({s.encoder for s in samples}):
            fh.write(f"# encoder={encoder}\n")
            fh.write("# L median_seconds peak_bytes mac_count\n")
            for s in samples:
                if s.encoder != encoder or s.oom:
                    continue
                fh.write(f"{s.length} {s.wall_seconds:.6f} {s.peak_bytes} {s.mac_count}\n")
            fh.write("\n\n")
