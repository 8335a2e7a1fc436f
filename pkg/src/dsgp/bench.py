"""Desk-scale systems measurements: scaling shape, load balance, overhead.

Times are machine-dependent; the assertions worth making are about shape —
how per-iteration time responds to worker count (strong), to proportional
growth of data and workers (weak), how evenly the map work spreads across
balanced partitions (load), and that the coordinator's O(m^3) assembly cost
stays flat as n grows.  Medians over several iterations after warm-up keep
the numbers robust to scheduler noise.
"""

import csv
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import synth_latent_1d
from .engine import Partition, make_backend, make_partitions, run_iteration
from .model import new_regression

__all__ = [
    "BenchRow",
    "ScalingReport",
    "measure_iterations",
    "bench_strong",
    "bench_weak",
    "bench_load",
]

DEFAULT_WARMUP = 2


@dataclass(frozen=True)
class BenchRow:
    """Aggregated timings for one benchmark configuration."""

    label: str
    n: int
    workers: int
    median_iter_seconds: float
    map_min: float
    map_mean: float
    map_max: float
    imbalance: float  # median over iterations of (max - min) / mean map time
    reduce_seconds: float
    global_seconds: float
    bound: float
    speedup: float = float("nan")
    flagged: bool = False  # worker count exceeded the machine's cores


@dataclass(frozen=True)
class ScalingReport:
    kind: str  # strong | weak | load
    machine: str
    config: dict
    rows: List[BenchRow] = field(default_factory=list)

    _COLUMNS = (
        "label",
        "n",
        "workers",
        "median_iter_seconds",
        "map_min",
        "map_mean",
        "map_max",
        "imbalance",
        "reduce_seconds",
        "global_seconds",
        "bound",
        "speedup",
        "flagged",
    )

    def write_csv(self, stream):
        stream.write(f"# dsgp bench kind={self.kind}\n")
        stream.write(f"# machine: {self.machine}\n")
        for key in sorted(self.config):
            stream.write(f"# config: {key}={self.config[key]}\n")
        writer = csv.writer(stream)
        writer.writerow(self._COLUMNS)
        for r in self.rows:
            writer.writerow(
                [
                    r.label,
                    r.n,
                    r.workers,
                    repr(r.median_iter_seconds),
                    repr(r.map_min),
                    repr(r.map_mean),
                    repr(r.map_max),
                    repr(r.imbalance),
                    repr(r.reduce_seconds),
                    repr(r.global_seconds),
                    repr(r.bound),
                    repr(r.speedup),
                    int(r.flagged),
                ]
            )

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)

    def table(self):
        """Fixed-width human-readable rendering."""
        head = (
            f"{'label':<14}{'n':>8}{'workers':>8}{'iter(s)':>12}"
            f"{'map min':>11}{'map max':>11}{'imbal':>8}{'global(s)':>11}"
            f"{'speedup':>9}"
        )
        lines = [f"[{self.kind}] {self.machine}", head, "-" * len(head)]
        for r in self.rows:
            flag = " *" if r.flagged else ""
            lines.append(
                f"{r.label:<14}{r.n:>8}{r.workers:>8}"
                f"{r.median_iter_seconds:>12.5f}{r.map_min:>11.5f}"
                f"{r.map_max:>11.5f}{r.imbalance:>8.3f}"
                f"{r.global_seconds:>11.6f}{r.speedup:>9.2f}{flag}"
            )
        if any(r.flagged for r in self.rows):
            lines.append("* more workers than cores (oversubscribed)")
        return "\n".join(lines)


def _machine_descriptor():
    return f"{platform.system()}-{platform.machine()} cores={os.cpu_count()}"


def _check_iters(iters):
    # report medians are only meaningful over a reasonable sample
    if iters < 10:
        raise ValueError("reports need at least 10 measured iterations")


def _skewed_partitions(n, k):
    """Deliberately unbalanced split: the first worker gets ~60% of rows."""
    if k < 2:
        raise ValueError("skewed partitions need at least 2 workers")
    first = max(1, int(0.6 * n))
    rest = make_partitions(n - first, k - 1)
    out = [Partition(index=0, start=0, stop=first)]
    out += [
        Partition(index=p.index + 1, start=p.start + first, stop=p.stop + first)
        for p in rest
    ]
    return out


def measure_iterations(
    state, backend="threads", workers=1, iters=10, warmup=DEFAULT_WARMUP, partitions=None
):
    """Run repeated full iterations; returns (wall_seconds, timings, bound) rows."""
    es = state.engine_state if hasattr(state, "engine_state") else state
    be = make_backend(backend)
    parts = partitions if partitions is not None else make_partitions(es.n, workers)
    samples = []
    try:
        be.bind(es.Y, es.latents, parts)
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            report, timings = run_iteration(es, be)
            wall = time.perf_counter() - t0
            if i >= warmup:
                samples.append((wall, timings, report.value))
    finally:
        be.close()
    return samples


def _aggregate(label, n, workers, samples, baseline=None, flagged=False):
    walls = [s[0] for s in samples]
    map_mins = [min(s[1].map_seconds) for s in samples]
    map_means = [statistics.mean(s[1].map_seconds) for s in samples]
    map_maxes = [max(s[1].map_seconds) for s in samples]
    imbalances = [
        (mx - mn) / me if me > 0 else 0.0
        for mn, me, mx in zip(map_mins, map_means, map_maxes)
    ]
    median_wall = statistics.median(walls)
    return BenchRow(
        label=label,
        n=n,
        workers=workers,
        median_iter_seconds=median_wall,
        map_min=statistics.median(map_mins),
        map_mean=statistics.median(map_means),
        map_max=statistics.median(map_maxes),
        imbalance=statistics.median(imbalances),
        reduce_seconds=statistics.median([s[1].reduce_seconds for s in samples]),
        global_seconds=statistics.median([s[1].global_seconds for s in samples]),
        bound=samples[0][2],
        speedup=(baseline / median_wall) if baseline else float("nan"),
        flagged=flagged,
    )


def _bench_state(n, m, seed):
    ds = synth_latent_1d(n, seed=seed)
    return new_regression(ds.X, ds.Y, m=m, seed=seed)


def bench_strong(
    n=2000, worker_counts=(1, 2, 4), iters=10, m=10, seed=0, backend="threads"
):
    """Fixed dataset, growing worker count; speedup vs the smallest count."""
    _check_iters(iters)
    state = _bench_state(n, m, seed)
    cores = os.cpu_count() or 1
    all_samples = [
        (w, measure_iterations(state, backend=backend, workers=w, iters=iters))
        for w in worker_counts
    ]
    baseline = statistics.median([s[0] for s in all_samples[0][1]])
    rows = [
        _aggregate(f"workers={w}", n, w, samples, baseline=baseline, flagged=w > cores)
        for w, samples in all_samples
    ]
    return ScalingReport(
        kind="strong",
        machine=_machine_descriptor(),
        config=dict(
            n=n, m=m, seed=seed, backend=backend, iters=iters,
            warmup=DEFAULT_WARMUP, worker_counts=tuple(worker_counts),
        ),
        rows=rows,
    )


def bench_weak(
    base_n=500, base_workers=1, scale_factors=(1, 2, 4), iters=10, m=10, seed=0,
    backend="threads",
):
    """Dataset size and worker count grown together; flat time is the ideal."""
    _check_iters(iters)
    cores = os.cpu_count() or 1
    rows = []
    for s in scale_factors:
        n = base_n * s
        w = base_workers * s
        state = _bench_state(n, m, seed)
        samples = measure_iterations(state, backend=backend, workers=w, iters=iters)
        rows.append(
            _aggregate(f"scale={s}", n, w, samples, flagged=w > cores)
        )
    return ScalingReport(
        kind="weak",
        machine=_machine_descriptor(),
        config=dict(
            base_n=base_n, base_workers=base_workers, m=m, seed=seed,
            backend=backend, iters=iters, warmup=DEFAULT_WARMUP,
            scale_factors=tuple(scale_factors),
        ),
        rows=rows,
    )


def bench_load(n=2000, workers=4, iters=10, m=10, seed=0, backend="serial", unbalanced=False):
    """Per-worker map-time spread across balanced (or skewed) partitions.

    The serial backend is the default so the per-partition durations measure
    compute alone, independent of how many cores happen to be free.
    """
    _check_iters(iters)
    state = _bench_state(n, m, seed)
    parts = _skewed_partitions(n, workers) if unbalanced else None
    samples = measure_iterations(
        state, backend=backend, workers=workers, iters=iters, partitions=parts
    )
    label = "skewed" if unbalanced else "balanced"
    rows = [
        _aggregate(
            f"{label} k={workers}", n, workers, samples,
            flagged=backend != "serial" and workers > (os.cpu_count() or 1),
        )
    ]
    return ScalingReport(
        kind="load",
        machine=_machine_descriptor(),
        config=dict(
            n=n, m=m, seed=seed, backend=backend, iters=iters,
            warmup=DEFAULT_WARMUP, workers=workers, unbalanced=unbalanced,
        ),
        rows=rows,
    )
