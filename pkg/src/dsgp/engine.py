"""Coordinator/worker execution of the four-step training protocol.

One iteration is:

1. broadcast the shared parameters G = (Z, kernel hyperparameters, noise
   precision) to every worker;
2. every worker computes its partition's :func:`~dsgp.bound.local_terms`
   (the map step);
3. the coordinator reduces the partial sums in ascending partition order,
   assembles the bound and the broadcast accumulators in O(m^3), and pushes
   the accumulators back out;
4. gradient-driven updates: in ``joint`` mode all parameters (G plus any
   latent means / log-variances) form one vector driven by the optimizer; in
   ``alternating`` mode the coordinator optimizes G alone and the workers
   then take fixed-rate gradient sub-steps on their own latent blocks using
   the frozen accumulators.

Three interchangeable backends run the map phases: in-process serial, an
in-process thread pool, and a pool of spawned worker processes speaking the
wire protocol of :mod:`dsgp.wire`.  All reduce in the same order, so results
agree across backends to tight tolerance (bit-exact for k = 1).

Per-worker map durations cover the per-datapoint work (statistics and
gradient terms); ``global_seconds`` covers only the O(m^3) coordinator
assembly, which is the part that must stay flat as n grows.
"""

import os
import shlex
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .bound import (
    BoundReport,
    GradTerms,
    bound_core,
    finalize_gradients,
    grad_terms,
    local_grads,
    local_terms,
    reduce_partials,
)
from .kernel import InducingInputs, KernelParams, LatentPosterior
from .linalg import PosDefError
from .optim import OptimizerConfig, lbfgs, scg
from . import wire
from .data import Dataset, dataset_from_bytes, dataset_to_bytes

__all__ = [
    "GlobalParams",
    "Partition",
    "IterationTimings",
    "EngineState",
    "StepInfo",
    "WorkerError",
    "make_partitions",
    "run_iteration",
    "optimize_step",
    "SerialBackend",
    "ThreadBackend",
    "ProcessBackend",
    "make_backend",
    "LOCAL_STEP_RATE",
]

# Fixed ascent rate for worker-side latent sub-steps in alternating mode.
# The LOCAL_STEP message carries only a count, so the rate is a protocol
# constant shared by every backend.
LOCAL_STEP_RATE = 0.01

OPTIMIZERS = {"lbfgs": lbfgs, "scg": scg}


@dataclass(frozen=True)
class GlobalParams:
    """Shared parameters G: inducing inputs plus kernel hyperparameters."""

    Z: InducingInputs
    kernel: KernelParams

    def __post_init__(self):
        if self.Z.q != self.kernel.input_dim:
            raise ValueError(
                f"Z has {self.Z.q} columns but kernel expects {self.kernel.input_dim}"
            )

    @property
    def m(self):
        return self.Z.m

    @property
    def q(self):
        return self.Z.q

    def flatten(self):
        """Flat layout: Z row-major, log ard weights, log sigma2, log beta."""
        k = self.kernel
        if np.any(k.ard_weights <= 0.0):
            raise ValueError("flattening requires strictly positive ard weights")
        return np.concatenate(
            [
                self.Z.Z.ravel(),
                np.log(k.ard_weights),
                [np.log(k.signal_variance), np.log(k.noise_precision)],
            ]
        )

    @classmethod
    def unflatten(cls, vec, m, q):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (m * q + q + 2,):
            raise ValueError(
                f"flat vector has length {vec.size}, expected {m * q + q + 2}"
            )
        Z = vec[: m * q].reshape(m, q)
        ard = np.exp(vec[m * q : m * q + q])
        sv = float(np.exp(vec[m * q + q]))
        beta = float(np.exp(vec[m * q + q + 1]))
        return cls(Z=InducingInputs(Z), kernel=KernelParams(sv, ard, beta))


def flatten_grad(grad_global):
    """Gradient vector in the :meth:`GlobalParams.flatten` layout."""
    return np.concatenate(
        [
            grad_global.Z.ravel(),
            grad_global.log_ard_weights,
            [grad_global.log_signal_variance, grad_global.log_noise_precision],
        ]
    )


@dataclass(frozen=True)
class Partition:
    """Contiguous half-open row range [start, stop) owned by one worker."""

    index: int
    start: int
    stop: int

    @property
    def size(self):
        return self.stop - self.start

    @property
    def row_slice(self):
        return slice(self.start, self.stop)

    def take(self, arr):
        return arr[self.start : self.stop]


def make_partitions(n, k):
    """Balanced contiguous partitions: sizes differ by at most one."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= workers <= n, got k={k} for n={n}")
    base, rem = divmod(n, k)
    out = []
    start = 0
    for i in range(k):
        stop = start + base + (1 if i < rem else 0)
        out.append(Partition(index=i, start=start, stop=stop))
        start = stop
    return out


@dataclass(frozen=True)
class IterationTimings:
    """Wall-clock decomposition of one iteration."""

    map_seconds: List[float]
    reduce_seconds: float
    global_seconds: float

    def __post_init__(self):
        if any(t < 0 for t in self.map_seconds):
            raise ValueError("negative map duration")
        if self.reduce_seconds < 0 or self.global_seconds < 0:
            raise ValueError("negative duration")


@dataclass(frozen=True)
class EngineState:
    """Everything an iteration needs: data, latent posterior, shared params."""

    Y: np.ndarray
    latents: LatentPosterior
    global_params: GlobalParams

    def __post_init__(self):
        if self.Y.shape[0] != self.latents.n:
            raise ValueError("Y and latents disagree on row count")
        if self.latents.q != self.global_params.q:
            raise ValueError("latents and global params disagree on input dim")

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def frozen(self):
        return self.latents.frozen


@dataclass(frozen=True)
class StepInfo:
    """Outcome of one optimization step (bound convention: larger is better)."""

    bound_before: float
    bound_after: float
    n_evals: int
    status: str
    accepted: bool


class WorkerError(RuntimeError):
    def __init__(self, partition_index, message):
        super().__init__(f"worker {partition_index}: {message}")
        self.partition_index = partition_index


class Backend:
    """Lifecycle: bind -> (set_globals / map_terms / set_accum /
    map_grad_terms / local_step)* -> close."""

    def bind(self, Y, latents, partitions):
        raise NotImplementedError

    def set_globals(self, gp):
        raise NotImplementedError

    def set_latents(self, latents):
        raise NotImplementedError

    def map_terms(self):
        raise NotImplementedError

    def set_accum(self, accum):
        raise NotImplementedError

    def map_grad_terms(self):
        raise NotImplementedError

    def local_step(self, count):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class SerialBackend(Backend):
    """Reference backend: map phases run as a plain loop in-process."""

    def __init__(self):
        self._Y = None
        self._latents = None
        self._parts = None
        self._gp = None
        self._accum = None

    @property
    def n_workers(self):
        return len(self._parts)

    @property
    def latents(self):
        return self._latents

    def bind(self, Y, latents, partitions):
        self._Y = Y
        self._latents = latents
        self._parts = list(partitions)

    def set_globals(self, gp):
        self._gp = gp

    def set_latents(self, latents):
        self._latents = latents

    def _block(self, p):
        return p.take(self._Y), self._latents.rows(p.row_slice)

    def _run_blocks(self, fn):
        results, times = [], []
        for p in self._parts:
            t0 = time.perf_counter()
            results.append(fn(*self._block(p)))
            times.append(time.perf_counter() - t0)
        return results, times

    def map_terms(self):
        gp = self._gp
        return self._run_blocks(
            lambda Yb, lb: local_terms(Yb, lb, gp.Z, gp.kernel)
        )

    def set_accum(self, accum):
        self._accum = accum

    def map_grad_terms(self):
        gp, accum = self._gp, self._accum
        return self._run_blocks(
            lambda Yb, lb: grad_terms(Yb, lb, gp.Z, gp.kernel, accum)
        )

    def local_step(self, count):
        if self._latents.frozen:
            raise ValueError("no local parameters in frozen mode")
        if count == 0:
            return self._latents
        gp, accum = self._gp, self._accum

        def step_block(Yb, lb):
            mu = lb.means.copy()
            logS = np.log(lb.variances)
            for _ in range(count):
                cur = LatentPosterior(means=mu, variances=np.exp(logS))
                dmu, dlogS = local_grads(Yb, cur, gp.Z, gp.kernel, accum)
                mu = mu + LOCAL_STEP_RATE * dmu
                logS = logS + LOCAL_STEP_RATE * dlogS
            return mu, logS

        blocks, _ = self._run_blocks(step_block)
        mu = np.concatenate([b[0] for b in blocks], axis=0)
        S = np.exp(np.concatenate([b[1] for b in blocks], axis=0))
        self._latents = LatentPosterior(means=mu, variances=S)
        return self._latents


class ThreadBackend(SerialBackend):
    """In-process pool; partitions map concurrently (BLAS releases the GIL)."""

    def __init__(self):
        super().__init__()
        self._pool = None

    def bind(self, Y, latents, partitions):
        super().bind(Y, latents, partitions)
        self._pool = ThreadPoolExecutor(max_workers=len(self._parts))

    def _run_blocks(self, fn):
        def timed(p):
            Yb, lb = self._block(p)
            t0 = time.perf_counter()
            out = fn(Yb, lb)
            return out, time.perf_counter() - t0

        pairs = list(self._pool.map(timed, self._parts))
        return [r for r, _ in pairs], [t for _, t in pairs]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


class ProcessBackend(Backend):
    """Out-of-process pool speaking the wire protocol over stdin/stdout.

    The coordinator keeps its own copy of the data: the protocol's worker
    messages cover statistics and local steps, so the per-block gradient
    terms for the shared parameters are recomputed coordinator-side.
    """

    def __init__(self):
        self._procs = []
        self._parts = None
        self._Y = None
        self._latents = None
        self._gp = None
        self._accum = None

    @property
    def n_workers(self):
        return len(self._parts)

    @property
    def latents(self):
        return self._latents

    @staticmethod
    def _command():
        override = os.environ.get("DSGP_WORKER")
        if override:
            return shlex.split(override)
        return [sys.executable, "-m", "dsgp.worker"]

    def bind(self, Y, latents, partitions):
        self._Y = Y
        self._latents = latents
        self._parts = list(partitions)
        mode = "frozen" if latents.frozen else "latent"
        base = self._command()
        for p in self._parts:
            cmd = base + [
                "--index",
                str(p.index),
                "--mode",
                mode,
                "--input-dim",
                str(latents.q),
            ]
            proc = subprocess.Popen(
                cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
            self._procs.append(proc)
        for p, proc in zip(self._parts, self._procs):
            tag, payload = self._read(p.index, proc)
            if tag != wire.TAG_HELLO:
                raise WorkerError(p.index, f"expected HELLO, got tag {tag:#x}")
            version, index = wire.unpack_hello(payload)
            if version != wire.PROTOCOL_VERSION:
                raise WorkerError(p.index, f"protocol version {version}")
            if index != p.index:
                raise WorkerError(p.index, f"worker reported index {index}")
        self._send_data()

    def _read(self, index, proc):
        try:
            return wire.read_frame(proc.stdout)
        except wire.ProtocolError as exc:
            code = proc.poll()
            raise WorkerError(index, f"{exc} (exit status {code})")

    def _send(self, index, proc, tag, payload=b""):
        try:
            wire.write_frame(proc.stdin, tag, payload)
        except (BrokenPipeError, OSError) as exc:
            raise WorkerError(index, str(exc))

    def _block_dataset(self, p):
        Yb = p.take(self._Y)
        lb = self._latents.rows(p.row_slice)
        if self._latents.frozen:
            X = lb.means
        else:
            X = np.concatenate([lb.means, lb.variances], axis=1)
        return Dataset(Y=Yb, X=X)

    def _send_data(self):
        for p, proc in zip(self._parts, self._procs):
            self._send(
                p.index, proc, wire.TAG_SET_DATA, dataset_to_bytes(self._block_dataset(p))
            )

    def set_globals(self, gp):
        self._gp = gp
        payload = wire.pack_doubles(gp.flatten())
        for p, proc in zip(self._parts, self._procs):
            self._send(p.index, proc, wire.TAG_SET_GLOBALS, payload)

    def set_latents(self, latents):
        self._latents = latents
        self._send_data()

    def map_terms(self):
        m, d = self._gp.m, self._Y.shape[1]
        start = time.perf_counter()
        for p, proc in zip(self._parts, self._procs):
            self._send(p.index, proc, wire.TAG_COMPUTE_TERMS)
        results, times = [], []
        for p, proc in zip(self._parts, self._procs):
            tag, payload = self._read(p.index, proc)
            if tag != wire.TAG_TERMS_RESULT:
                raise WorkerError(p.index, f"expected TERMS_RESULT, got {tag:#x}")
            results.append(wire.unpack_terms_result(payload, m, d))
            times.append(time.perf_counter() - start)
        return results, times

    def set_accum(self, accum):
        self._accum = accum
        payload = wire.pack_accum(accum)
        for p, proc in zip(self._parts, self._procs):
            self._send(p.index, proc, wire.TAG_SET_ACCUM, payload)

    def map_grad_terms(self):
        gp, accum = self._gp, self._accum
        results, times = [], []
        for p in self._parts:
            t0 = time.perf_counter()
            Yb = p.take(self._Y)
            lb = self._latents.rows(p.row_slice)
            results.append(grad_terms(Yb, lb, gp.Z, gp.kernel, accum))
            times.append(time.perf_counter() - t0)
        return results, times

    def local_step(self, count):
        if self._latents.frozen:
            raise ValueError("no local parameters in frozen mode")
        if count == 0:
            return self._latents
        payload = wire.pack_local_step(count)
        for p, proc in zip(self._parts, self._procs):
            self._send(p.index, proc, wire.TAG_LOCAL_STEP, payload)
        q = self._latents.q
        mus, Ss = [], []
        for p, proc in zip(self._parts, self._procs):
            tag, data = self._read(p.index, proc)
            if tag != wire.TAG_LOCAL_RESULT:
                raise WorkerError(p.index, f"expected LOCAL_RESULT, got {tag:#x}")
            mu, logS = wire.unpack_local_result(data, p.size, q)
            mus.append(mu)
            Ss.append(np.exp(logS))
        self._latents = LatentPosterior(
            means=np.concatenate(mus, axis=0), variances=np.concatenate(Ss, axis=0)
        )
        return self._latents

    def close(self):
        for proc in self._procs:
            if proc.poll() is None:
                try:
                    wire.write_frame(proc.stdin, wire.TAG_SHUTDOWN)
                    proc.stdin.close()
                except (BrokenPipeError, OSError):
                    pass
        for proc in self._procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._procs = []


BACKENDS = {
    "serial": SerialBackend,
    "threads": ThreadBackend,
    "procs": ProcessBackend,
}


def make_backend(name):
    try:
        return BACKENDS[name]()
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}")


def _run_iteration_full(state, backend):
    """Steps 1-3 plus the gradient map; returns (report, timings, terms)."""
    gp = state.global_params
    backend.set_globals(gp)
    parts, map_times = backend.map_terms()

    t0 = time.perf_counter()
    totals = reduce_partials(parts, gp.m, state.d)
    t_reduce = time.perf_counter() - t0

    t1 = time.perf_counter()
    core = bound_core(totals, gp.Z, gp.kernel, state.n, state.d)
    t_assemble = time.perf_counter() - t1

    backend.set_accum(core.accum)
    terms_list, grad_times = backend.map_grad_terms()

    t2 = time.perf_counter()
    merged = None
    for t in terms_list:
        merged = t if merged is None else merged.merge(t)
    if merged is None:
        merged = GradTerms(
            Z=np.zeros((gp.m, gp.q)), d_sv=0.0, d_ard=np.zeros(gp.q)
        )
    report = finalize_gradients(core, totals, merged, gp.Z, gp.kernel, state.n, state.d)
    t_finalize = time.perf_counter() - t2

    timings = IterationTimings(
        map_seconds=[a + b for a, b in zip(map_times, grad_times)],
        reduce_seconds=t_reduce,
        global_seconds=t_assemble + t_finalize,
    )
    return report, timings, merged


def run_iteration(state, backend):
    """One full evaluate-and-differentiate pass over the protocol.

    Returns
    -------
    (BoundReport, IterationTimings)
    """
    report, timings, _ = _run_iteration_full(state, backend)
    return report, timings


def _stack_joint(gp, latents):
    flat = gp.flatten()
    if latents.frozen:
        return flat
    return np.concatenate([flat, latents.means.ravel(), np.log(latents.variances).ravel()])


def _unstack_joint(vec, template_gp, latents):
    m, q = template_gp.m, template_gp.q
    ng = m * q + q + 2
    gp = GlobalParams.unflatten(vec[:ng], m, q)
    if latents.frozen:
        return gp, latents
    n = latents.n
    mu = vec[ng : ng + n * q].reshape(n, q)
    S = np.exp(vec[ng + n * q :]).reshape(n, q)
    return gp, LatentPosterior(means=mu, variances=S)


def optimize_step(
    state,
    backend,
    method="lbfgs",
    opt_config=None,
    mode="joint",
    local_steps=0,
):
    """Step 4: one bounded optimization pass; returns the updated state.

    ``joint`` drives G and any latent parameters as one vector.
    ``alternating`` optimizes G alone, then lets workers take
    ``local_steps`` fixed-rate ascent sub-steps on their latent blocks with
    the accumulators frozen at the new G.  A pass that fails to improve the
    bound leaves the state unchanged and is flagged.
    """
    if mode not in ("joint", "alternating"):
        raise ValueError(f"unknown mode {mode!r}")
    if method not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {method!r}; choose from {sorted(OPTIMIZERS)}")
    optimizer = OPTIMIZERS[method]
    cfg = opt_config or OptimizerConfig(max_evals=20)
    gp0, lat0 = state.global_params, state.latents

    if mode == "joint":
        def fg(vec):
            gp, lat = _unstack_joint(vec, gp0, lat0)
            if not lat.frozen:
                backend.set_latents(lat)
            trial = EngineState(Y=state.Y, latents=lat, global_params=gp)
            try:
                report, _, merged = _run_iteration_full(trial, backend)
            except PosDefError:
                # trial point is numerically infeasible: reject it
                return np.inf, np.zeros_like(vec)
            g = flatten_grad(report.grad_global)
            if not lat.frozen:
                dlogS = merged.variances * lat.variances
                g = np.concatenate([g, merged.means.ravel(), dlogS.ravel()])
            return -report.value, -g

        res = optimizer(fg, _stack_joint(gp0, lat0), cfg)
        improved = res.fun < res.trace[0]
        if improved:
            gp_new, lat_new = _unstack_joint(res.x, gp0, lat0)
        else:
            gp_new, lat_new = gp0, lat0
        if not lat_new.frozen:
            backend.set_latents(lat_new)
        new_state = EngineState(Y=state.Y, latents=lat_new, global_params=gp_new)
        info = StepInfo(
            bound_before=-res.trace[0],
            bound_after=-res.fun if improved else -res.trace[0],
            n_evals=res.n_evals,
            status=res.status,
            accepted=improved,
        )
        return new_state, info

    # alternating: G first, latents fixed
    def fg_global(vec):
        gp = GlobalParams.unflatten(vec, gp0.m, gp0.q)
        trial = EngineState(Y=state.Y, latents=lat0, global_params=gp)
        try:
            report, _, _ = _run_iteration_full(trial, backend)
        except PosDefError:
            return np.inf, np.zeros_like(vec)
        return -report.value, -flatten_grad(report.grad_global)

    res = optimizer(fg_global, gp0.flatten(), cfg)
    improved = res.fun < res.trace[0]
    gp_new = GlobalParams.unflatten(res.x, gp0.m, gp0.q) if improved else gp0
    lat_new = lat0
    n_evals = res.n_evals
    if local_steps > 0 and not lat0.frozen:
        # refresh the accumulators at the accepted G, then hand off to workers
        trial = EngineState(Y=state.Y, latents=lat0, global_params=gp_new)
        backend.set_globals(gp_new)
        parts, _ = backend.map_terms()
        totals = reduce_partials(parts, gp_new.m, state.d)
        core = bound_core(totals, gp_new.Z, gp_new.kernel, state.n, state.d)
        backend.set_accum(core.accum)
        lat_new = backend.local_step(local_steps)
        n_evals += 1
    new_state = EngineState(Y=state.Y, latents=lat_new, global_params=gp_new)
    info = StepInfo(
        bound_before=-res.trace[0],
        bound_after=-res.fun if improved else -res.trace[0],
        n_evals=n_evals,
        status=res.status,
        accepted=improved,
    )
    return new_state, info
