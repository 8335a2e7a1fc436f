"""Dataset ingestion, splitting, standardization, and synthetic data.

Two on-disk forms are supported: a CSV subset (header row optional, decimal
doubles, rows with unparseable or missing fields are dropped and counted)
and a compact binary form used both for files and for shipping partition
blocks to worker processes:

    magic "DGPD" | version u16 | n u64 | q u64 | d u64
    | X doubles, row-major (present iff q > 0) | Y doubles, row-major

All integers and doubles are little-endian; doubles are IEEE-754 binary64,
so write/read round-trips are bit-exact.
"""

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .validate import as_matrix

__all__ = [
    "Dataset",
    "ColumnStats",
    "load_csv",
    "write_csv",
    "read_binary",
    "write_binary",
    "dataset_to_bytes",
    "dataset_from_bytes",
    "split",
    "take_head",
    "standardize",
    "destandardize",
    "synth_latent_1d",
]

logger = logging.getLogger(__name__)

MAGIC = b"DGPD"
BINARY_VERSION = 1


@dataclass(frozen=True)
class ColumnStats:
    """Per-column standardization record; constant columns pass through."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # boolean mask


@dataclass(frozen=True)
class Dataset:
    """Immutable numeric dataset with optional inputs.

    ``X`` is None for output-only (latent-model) data.  ``x_stats``/``y_stats``
    are set when the dataset has been standardized and allow exact inversion.
    """

    Y: np.ndarray
    X: Optional[np.ndarray] = None
    x_names: List[str] = field(default_factory=list)
    y_names: List[str] = field(default_factory=list)
    dropped_rows: int = 0
    x_stats: Optional[ColumnStats] = None
    y_stats: Optional[ColumnStats] = None

    def __post_init__(self):
        Y = as_matrix(self.Y, "Y")
        object.__setattr__(self, "Y", Y)
        if self.X is not None:
            X = as_matrix(self.X, "X")
            if X.shape[0] != Y.shape[0]:
                raise ValueError("X and Y row counts differ")
            object.__setattr__(self, "X", X)
        if not np.all(np.isfinite(Y)) or (
            self.X is not None and not np.all(np.isfinite(self.X))
        ):
            raise ValueError("dataset contains NaN or Inf")

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def q(self):
        return 0 if self.X is None else self.X.shape[1]

    @property
    def d(self):
        return self.Y.shape[1]

    def rows(self, idx):
        return replace(
            self,
            Y=self.Y[idx],
            X=None if self.X is None else self.X[idx],
            dropped_rows=0,
        )


def _resolve_columns(wanted, names):
    idx = []
    for w in wanted:
        if isinstance(w, int) or (isinstance(w, str) and w.isdigit() and w not in names):
            j = int(w)
            if not 0 <= j < len(names):
                raise ValueError(f"column index {j} out of range")
            idx.append(j)
        elif w in names:
            idx.append(names.index(w))
        else:
            raise ValueError(f"column {w!r} not found in {names}")
    return idx


def load_csv(path, input_columns=(), output_columns=(), header=True):
    """Read a CSV file into a Dataset.

    Parameters
    ----------
    input_columns, output_columns : sequence of str or int
        Column names (with ``header=True``) or zero-based indices.  At least
        one output column is required.
    header : bool
        Whether the first row holds column names.

    Rows with missing or unparseable fields in the selected columns are
    dropped; the count is kept in ``Dataset.dropped_rows`` and logged.
    """
    if not output_columns:
        raise ValueError("at least one output column is required")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r and not (r[0].startswith("#"))]
    if not rows:
        raise ValueError(f"{path}: no rows")
    if header:
        names = [c.strip() for c in rows[0]]
        body = rows[1:]
    else:
        names = [str(i) for i in range(len(rows[0]))]
        body = rows
    xi = _resolve_columns(list(input_columns), names)
    yi = _resolve_columns(list(output_columns), names)

    x_rows, y_rows, dropped = [], [], 0
    for r in body:
        try:
            xv = [float(r[j]) for j in xi]
            yv = [float(r[j]) for j in yi]
        except (ValueError, IndexError):
            dropped += 1
            continue
        if not all(np.isfinite(v) for v in xv + yv):
            dropped += 1
            continue
        x_rows.append(xv)
        y_rows.append(yv)
    if not y_rows:
        raise ValueError(f"{path}: no usable rows ({dropped} dropped)")
    if dropped:
        logger.warning("%s: dropped %d unusable rows", path, dropped)
    X = np.array(x_rows) if xi else None
    return Dataset(
        Y=np.array(y_rows),
        X=X,
        x_names=[names[j] for j in xi],
        y_names=[names[j] for j in yi],
        dropped_rows=dropped,
    )


def write_csv(dataset, path):
    """Write a Dataset as CSV with a header; floats use repr (round-trip exact)."""
    x_names = dataset.x_names or [f"x{i}" for i in range(dataset.q)]
    y_names = dataset.y_names or [f"y{i}" for i in range(dataset.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(x_names + y_names)
        for i in range(dataset.n):
            row = [] if dataset.X is None else [repr(float(v)) for v in dataset.X[i]]
            row += [repr(float(v)) for v in dataset.Y[i]]
            w.writerow(row)


def dataset_to_bytes(dataset):
    """Serialize to the binary block format (see module docstring)."""
    n, q, d = dataset.n, dataset.q, dataset.d
    head = MAGIC + struct.pack("<HQQQ", BINARY_VERSION, n, q, d)
    parts = [head]
    if q:
        parts.append(np.ascontiguousarray(dataset.X, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(dataset.Y, dtype="<f8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf):
    """Parse the binary block format."""
    if buf[:4] != MAGIC:
        raise ValueError("bad magic; not a DGPD block")
    version, n, q, d = struct.unpack_from("<HQQQ", buf, 4)
    if version != BINARY_VERSION:
        raise ValueError(f"unsupported version {version}")
    off = 4 + 2 + 24
    X = None
    if q:
        X = np.frombuffer(buf, dtype="<f8", count=n * q, offset=off).reshape(n, q).copy()
        off += 8 * n * q
    Y = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    if len(buf) != off + 8 * n * d:
        raise ValueError("truncated or oversized DGPD block")
    return Dataset(Y=Y, X=X)


def write_binary(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def read_binary(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def split(dataset, n_test, seed=0, strategy="random"):
    """Split into (train, test), disjoint and exhaustive.

    ``random`` draws the test rows with a seeded permutation (row order within
    each side is preserved).  ``head`` is deterministic: the training set is
    the leading prefix and the test set the trailing ``n_test`` rows — pair it
    with :func:`take_head` to reproduce prefix-then-split pipelines.
    """
    n = dataset.n
    if not 0 < n_test < n:
        raise ValueError(f"n_test must be in (0, {n}), got {n_test}")
    if strategy == "head":
        train_idx = np.arange(0, n - n_test)
        test_idx = np.arange(n - n_test, n)
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    return dataset.rows(train_idx), dataset.rows(test_idx)


def take_head(dataset, n_rows):
    """The first ``n_rows`` rows (prefix selection before splitting)."""
    if n_rows < 1 or n_rows > dataset.n:
        raise ValueError(f"n_rows must be in [1, {dataset.n}]")
    return dataset.rows(np.arange(n_rows))


def standardize(dataset):
    """Zero-mean unit-std columns; constant columns unchanged and flagged."""

    def stats(arr):
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        constant = std == 0.0
        safe = np.where(constant, 1.0, std)
        return ColumnStats(mean=mean, std=safe, constant=constant), np.where(
            constant, arr, (arr - mean) / safe
        )

    y_stats, Y = stats(dataset.Y)
    x_stats, X = (None, None)
    if dataset.X is not None:
        x_stats, X = stats(dataset.X)
    return replace(dataset, Y=Y, X=X, x_stats=x_stats, y_stats=y_stats)


def destandardize(dataset):
    """Invert :func:`standardize` using the stored records."""

    def undo(arr, st):
        if st is None:
            return arr
        return np.where(st.constant, arr, arr * st.std + st.mean)

    return replace(
        dataset,
        Y=undo(dataset.Y, dataset.y_stats),
        X=None if dataset.X is None else undo(dataset.X, dataset.x_stats),
        x_stats=None,
        y_stats=None,
    )


def synth_latent_1d(n, seed=0, noise_std=0.1):
    """Synthetic data: 1-D latent mapped nonlinearly to 3-D observations.

    x_i ~ N(0, 1);  Y_i = [sin(2 x_i), cos(3 x_i), x_i^2 / 2] + noise.
    The latent draws are kept as ``X`` so the same dataset doubles as a
    regression problem with known inputs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    Y = np.column_stack([np.sin(2.0 * x), np.cos(3.0 * x), 0.5 * x * x])
    if noise_std:
        Y = Y + rng.normal(0.0, noise_std, Y.shape)
    return Dataset(
        Y=Y,
        X=x[:, None],
        x_names=["latent"],
        y_names=["sin2x", "cos3x", "halfxsq"],
    )
