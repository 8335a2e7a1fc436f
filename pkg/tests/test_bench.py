"""Benchmark report structure, determinism of model outputs, CSV schema."""

import csv
import io

import numpy as np
import pytest

from dsgp import bench as bb
from dsgp.data import synth_latent_1d
from dsgp.model import new_regression


def small_state(n=150, m=5, seed=0):
    ds = synth_latent_1d(n, seed=seed)
    return new_regression(ds.X, ds.Y, m=m, seed=seed)


class TestMeasureIterations:
    def test_sample_count_excludes_warmup(self):
        samples = bb.measure_iterations(small_state(), workers=2, iters=4, warmup=1)
        assert len(samples) == 4

    def test_bound_constant_across_iterations(self):
        samples = bb.measure_iterations(small_state(), workers=2, iters=3, warmup=0)
        values = {s[2] for s in samples}
        assert len(values) == 1

    def test_timings_populated(self):
        samples = bb.measure_iterations(small_state(), workers=3, iters=2, warmup=0)
        for wall, timings, _ in samples:
            assert wall > 0
            assert len(timings.map_seconds) == 3


class TestSkewedPartitions:
    def test_contiguous_exhaustive_and_skewed(self):
        parts = bb._skewed_partitions(100, 4)
        assert parts[0].start == 0 and parts[-1].stop == 100
        for a, b in zip(parts, parts[1:]):
            assert a.stop == b.start
        sizes = [p.size for p in parts]
        assert sizes[0] == 60
        assert max(sizes[1:]) < sizes[0]

    def test_needs_two_workers(self):
        with pytest.raises(ValueError):
            bb._skewed_partitions(10, 1)


@pytest.fixture(scope="module")
def report():
    return bb.bench_strong(n=150, worker_counts=(1, 2), iters=10, m=5)


class TestStrong:
    def test_row_per_worker_count(self, report):
        assert [r.workers for r in report.rows] == [1, 2]
        assert report.kind == "strong"

    def test_baseline_speedup_is_one(self, report):
        assert report.rows[0].speedup == 1.0

    def test_bound_identical_across_worker_counts(self, report):
        b0 = report.rows[0].bound
        for r in report.rows[1:]:
            assert abs(r.bound - b0) <= 1e-10 * abs(b0)

    def test_times_nonnegative(self, report):
        for r in report.rows:
            assert r.median_iter_seconds > 0
            assert 0 <= r.map_min <= r.map_mean <= r.map_max

    def test_rejects_thin_sampling(self):
        with pytest.raises(ValueError):
            bb.bench_strong(n=50, worker_counts=(1,), iters=3)


class TestWeak:
    def test_rows_scale_n_and_workers(self):
        report = bb.bench_weak(base_n=100, base_workers=1, scale_factors=(1, 2), iters=10, m=5)
        assert [(r.n, r.workers) for r in report.rows] == [(100, 1), (200, 2)]

    def test_bound_magnitude_grows_with_n(self):
        report = bb.bench_weak(base_n=100, base_workers=1, scale_factors=(1, 4), iters=10, m=5)
        assert abs(report.rows[1].bound) > abs(report.rows[0].bound)


class TestLoad:
    def test_single_worker_degenerate_spread(self):
        report = bb.bench_load(n=120, workers=1, iters=10, m=5)
        (row,) = report.rows
        assert row.map_min == row.map_mean == row.map_max
        assert row.imbalance == 0.0

    def test_skewed_partitions_report_higher_imbalance(self):
        balanced = bb.bench_load(n=400, workers=4, iters=10, m=5)
        skewed = bb.bench_load(n=400, workers=4, iters=10, m=5, unbalanced=True)
        assert skewed.rows[0].imbalance > balanced.rows[0].imbalance


class TestReportOutput:
    def test_csv_schema_and_config_echo(self):
        report = bb.bench_strong(n=120, worker_counts=(1, 2), iters=10, m=5)
        buf = io.StringIO()
        report.write_csv(buf)
        text = buf.getvalue()
        comments = [l for l in text.splitlines() if l.startswith("#")]
        assert any("kind=strong" in c for c in comments)
        assert any("n=120" in c for c in comments)
        body = [l for l in text.splitlines() if not l.startswith("#")]
        rows = list(csv.reader(io.StringIO("\n".join(body))))
        assert rows[0] == list(bb.ScalingReport._COLUMNS)
        assert len(rows) == 1 + len(report.rows)
        # numeric fields parse back as floats
        float(rows[1][3])

    def test_save_csv(self, tmp_path):
        report = bb.bench_load(n=80, workers=2, iters=10, m=4)
        path = tmp_path / "load.csv"
        report.save_csv(path)
        assert path.exists() and path.stat().st_size > 0

    def test_table_renders(self):
        report = bb.bench_weak(base_n=80, base_workers=1, scale_factors=(1,), iters=10, m=4)
        text = report.table()
        assert "scale=1" in text
        assert "workers" in text
