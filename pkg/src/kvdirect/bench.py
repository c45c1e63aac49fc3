"""Recompute-vs-read latency and cached-vs-scratch decoding benchmarks.

Timings are data. The only assertions are correctness ones: the cost columns
come from :func:`cost_model`, and every decoding mode must emit the same
tokens before any timing is reported.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .cache import FullCache, KVDirectCache, ResidualCheckpoint, cost_model, recompute_kv
from .model import Transformer, greedy_decode

DEFAULT_GRID = (1, 10, 50, 100, 500)

# Shortest interval we trust a single timer read for; faster calls are batched.
MIN_SAMPLE_NS = 20_000


class TokenMismatchError(RuntimeError):
    """Decoding modes disagreed; timings would be meaningless."""


@dataclass
class LatencySample:
    operation: str        # "recompute_kv" or "read_cached_kv"
    n_tokens: int
    layer: int
    median_ns: float
    min_ns: float
    max_ns: float
    repetitions: int
    inner_loops: int


@dataclass
class RatioPoint:
    n_tokens: int
    recompute: LatencySample
    read: LatencySample
    ratio: float          # median recompute / median read
    recompute_flops: int
    read_bytes: int


def _inner_loops(fn) -> int:
    """Calls per sample needed so one sample spans at least MIN_SAMPLE_NS."""
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    floor = max(MIN_SAMPLE_NS, 100 * resolution_ns)
    loops = 1
    while True:
        t0 = time.perf_counter_ns()
        for _ in range(loops):
            fn()
        elapsed = time.perf_counter_ns() - t0
        if elapsed >= floor or loops >= 1 << 20:
            return loops
        loops *= 2


def time_call(fn, reps: int, warmup: int) -> tuple[list[float], int]:
    """Per-call nanoseconds for ``reps`` samples after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    loops = _inner_loops(fn)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter_ns() - t0) / loops)
    return samples, loops


def _sample(op, n, layer, samples, loops) -> LatencySample:
    return LatencySample(op, n, layer, statistics.median(samples), min(samples), max(samples),
                         len(samples), loops)


def bench_recompute_vs_read(model: Transformer, grid=DEFAULT_GRID, reps: int = 30,
                            warmup: int = 5, layer: int = 0, seed: int = 0) -> list[RatioPoint]:
    """Time K/V recomputation for N checkpoints against copying N cached entries.

    Recompute runs rmsnorm, both projections and RoPE through the same kernels
    the forward pass uses. Read copies a contiguous (2, N, n_kv, d_head) buffer.
    """
    if not grid:
        raise ValueError("grid must not be empty")
    if reps < 10:
        raise ValueError("need at least 10 repetitions")
    cfg = model.config
    rng = np.random.default_rng(seed)
    points = []
    for n in grid:
        ckpt = ResidualCheckpoint(layer, np.arange(n, dtype=np.int64),
                                  rng.standard_normal((n, cfg.d_hidden)).astype(np.float32))
        cached = rng.standard_normal((2, n, cfg.n_kv_heads, cfg.d_head)).astype(np.float32)
        dest = np.empty_like(cached)
        rec, rec_loops = time_call(lambda: recompute_kv(model, ckpt, layer), reps, warmup)
        read, read_loops = time_call(lambda: np.copyto(dest, cached), reps, warmup)
        rec_s = _sample("recompute_kv", n, layer, rec, rec_loops)
        read_s = _sample("read_cached_kv", n, layer, read, read_loops)
        cost = cost_model(cfg, n)
        points.append(RatioPoint(n, rec_s, read_s, rec_s.median_ns / read_s.median_ns,
                                 cost.recompute_flops, cost.read_bytes))
    return points


@dataclass
class DecodeTiming:
    mode: str
    tokens: list[int]
    median_s: float
    samples_s: list[float]


def bench_decode(model: Transformer, prompt, n_new: int, budget: int = 0,
                 reps: int = 3) -> dict[str, DecodeTiming]:
    """Wall-clock greedy decoding with a full cache, with no cache, and with KV-Direct."""
    if n_new < 10:
        raise ValueError("n_new must be >= 10")
    modes = {
        "full_cache": FullCache,
        "scratch_recompute": lambda: None,
        f"kvdirect_b{budget}": lambda: KVDirectCache(budget),
    }
    outputs = {name: greedy_decode(model, prompt, n_new, make()) for name, make in modes.items()}
    reference = outputs["full_cache"]
    for name, toks in outputs.items():
        if toks != reference:
            raise TokenMismatchError(f"{name} produced {toks}, full cache produced {reference}")
    timings = {}
    for name, make in modes.items():
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            greedy_decode(model, prompt, n_new, make())
            samples.append(time.perf_counter() - t0)
        timings[name] = DecodeTiming(name, outputs[name], statistics.median(samples), samples)
    return timings
