"""Deterministic derivative-based minimizers and gradient checking.

Two drivers are provided, both consuming a callback ``fg(x) -> (value,
gradient)`` and minimizing:

* :func:`scg` — scaled conjugate gradient after Møller (1993).  Step lengths
  come from a model-trust scaling parameter lambda rather than a line search,
  so each iteration costs a fixed two evaluations.
* :func:`lbfgs` — limited-memory BFGS with the two-loop recursion and a
  strong-Wolfe line search (bracket + bisection zoom).

Both are deterministic: identical inputs produce identical iterate
sequences.  The returned trace records every callback evaluation in order;
``accepted`` holds the monotone sequence of accepted-iterate values.  A
non-finite objective encountered mid-run ends the run with the best iterate
seen so far and ``status='nonfinite'``.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

__all__ = [
    "OptimizerConfig",
    "OptimResult",
    "scg",
    "lbfgs",
    "fd_gradient",
    "grad_check",
]

FGCallback = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    max_evals: int = 500
    grad_tol: float = 1e-6
    obj_tol: float = 0.0
    history: int = 10

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if self.grad_tol < 0 or self.obj_tol < 0:
            raise ValueError("tolerances must be non-negative")
        if self.history < 1:
            raise ValueError("history must be >= 1")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    trace: List[float] = field(default_factory=list)
    accepted: List[float] = field(default_factory=list)
    n_evals: int = 0
    status: str = "maxevals"


class _Budget(Exception):
    pass


class _NonFinite(Exception):
    pass


class _Driver:
    """Counts evaluations, records the trace, tracks the best finite iterate."""

    def __init__(self, fg, max_evals):
        self._fg = fg
        self.max_evals = max_evals
        self.trace = []
        self.best_x = None
        self.best_f = np.inf
        self.best_hist = []

    def __call__(self, x, *, track_best=True):
        if len(self.trace) >= self.max_evals:
            raise _Budget
        f, g = self._fg(x)
        f = float(f)
        self.trace.append(f)
        if track_best and np.isfinite(f) and f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, copy=True)
        self.best_hist.append(self.best_f)
        return f, np.asarray(g, dtype=float)

    @property
    def n_evals(self):
        return len(self.trace)

    def stalled(self, obj_tol, window=5):
        """Relative best-value improvement below obj_tol over the last window."""
        if obj_tol <= 0 or len(self.best_hist) <= window:
            return False
        older = self.best_hist[-window - 1]
        newest = self.best_hist[-1]
        return (older - newest) <= obj_tol * max(1.0, abs(newest))


def _finish(drv, x, f, accepted, status):
    if drv.best_x is not None and drv.best_f < f:
        x, f = drv.best_x, drv.best_f
    return OptimResult(
        x=np.array(x, copy=True),
        fun=float(f),
        trace=drv.trace,
        accepted=accepted,
        n_evals=drv.n_evals,
        status=status,
    )


def scg(fg: FGCallback, x0, config: OptimizerConfig = OptimizerConfig()) -> OptimResult:
    """Scaled conjugate gradient (Møller 1993) minimization.

    No user step length: curvature along the search direction is estimated
    from a finite-difference gradient probe and regularised by the
    model-trust parameter lambda, which adapts to the quality of the local
    quadratic model.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    drv = _Driver(fg, config.max_evals)
    sigma0 = 1e-4
    lam, lam_bar = 1e-6, 0.0
    lam_max = 1e15

    f, g = drv(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the starting point")
    accepted = [f]
    if np.max(np.abs(g)) < config.grad_tol:
        return _finish(drv, x, f, accepted, "gradtol")

    r = -g
    p = r.copy()
    success = True
    delta = 0.0
    s_probe = np.zeros(n)
    k = 0
    status = "maxevals"
    try:
        while True:
            norm_p2 = float(p @ p)
            if norm_p2 <= 0.0:
                status = "gradtol"
                break
            if success:
                sigma = sigma0 / np.sqrt(norm_p2)
                f_probe, g_probe = drv(x + sigma * p, track_best=False)
                if not np.isfinite(f_probe) or not np.all(np.isfinite(g_probe)):
                    status = "nonfinite"
                    break
                s_probe = (g_probe - g) / sigma
                delta = float(p @ s_probe)
            delta += (lam - lam_bar) * norm_p2
            if delta <= 0.0:
                lam_bar = 2.0 * (lam - delta / norm_p2)
                delta = -delta + lam * norm_p2
                lam = lam_bar
            mu = float(p @ r)
            alpha = mu / delta
            f_new, g_new = drv(x + alpha * p)
            if not np.isfinite(f_new):
                lam_bar = lam
                lam *= 10.0
                success = False
                if lam > lam_max:
                    status = "nonfinite"
                    break
                continue
            comparison = 2.0 * delta * (f - f_new) / mu ** 2
            if comparison >= 0.0:
                x = x + alpha * p
                f_old = f
                f, g = f_new, g_new
                accepted.append(f)
                r_new = -g
                lam_bar = 0.0
                success = True
                k += 1
                if np.max(np.abs(g)) < config.grad_tol:
                    status = "gradtol"
                    break
                if k % n == 0:
                    p = r_new.copy()
                else:
                    beta = float(r_new @ r_new - r_new @ r) / mu
                    p = r_new + beta * p
                r = r_new
                if comparison >= 0.75:
                    lam = max(0.25 * lam, 1e-15)
            else:
                lam_bar = lam
                success = False
            if comparison < 0.25:
                lam = lam + delta * (1.0 - comparison) / norm_p2
            if lam > lam_max:
                status = "linesearch"
                break
            if drv.stalled(config.obj_tol):
                status = "objtol"
                break
    except _Budget:
        status = "maxevals"
    return _finish(drv, x, f, accepted, status)


def _zoom(drv, x, d, f0, dphi0, a_lo, f_lo, dphi_lo, a_hi, f_hi, c1, c2, max_iter=30):
    """Bisection zoom for the strong Wolfe conditions (N&W alg. 3.6 shape)."""
    for _ in range(max_iter):
        a = 0.5 * (a_lo + a_hi)
        f, g = drv(x + a * d)
        if not np.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
            a_hi, f_hi = a, f
        else:
            dphi = float(g @ d)
            if abs(dphi) <= -c2 * dphi0:
                return a, f, g
            if dphi * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo, dphi_lo = a, f, dphi
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    return None


def _wolfe_search(drv, x, d, f0, g0, c1=1e-4, c2=0.9, a_init=1.0, a_max=1e6):
    """Bracketing line search enforcing the strong Wolfe conditions."""
    dphi0 = float(g0 @ d)
    if dphi0 >= 0.0:
        return None
    a_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    a = a_init
    for it in range(30):
        f, g = drv(x + a * d)
        if not np.isfinite(f) or f > f0 + c1 * a * dphi0 or (it > 0 and f >= f_prev):
            return _zoom(drv, x, d, f0, dphi0, a_prev, f_prev, dphi_prev, a, f, c1, c2)
        dphi = float(g @ d)
        if abs(dphi) <= -c2 * dphi0:
            return a, f, g
        if dphi >= 0.0:
            return _zoom(drv, x, d, f0, dphi0, a, f, dphi, a_prev, f_prev, c1, c2)
        a_prev, f_prev, dphi_prev = a, f, dphi
        a = min(2.0 * a, a_max)
    return None


def lbfgs(fg: FGCallback, x0, config: OptimizerConfig = OptimizerConfig()) -> OptimResult:
    """Limited-memory BFGS with strong-Wolfe line search.

    The inverse-Hessian action is the standard two-loop recursion over the
    last ``config.history`` curvature pairs, scaled by s.y/y.y.
    """
    x = np.asarray(x0, dtype=float).copy()
    drv = _Driver(fg, config.max_evals)
    f, g = drv(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the starting point")
    accepted = [f]
    if np.max(np.abs(g)) < config.grad_tol:
        return _finish(drv, x, f, accepted, "gradtol")

    mem = []  # (s, y, rho) pairs, oldest first
    status = "maxevals"
    try:
        while True:
            q = g.copy()
            alphas = []
            for s, y, rho in reversed(mem):
                a = rho * float(s @ q)
                alphas.append(a)
                q -= a * y
            if mem:
                s, y, _ = mem[-1]
                q *= float(s @ y) / float(y @ y)
            for (s, y, rho), a in zip(mem, reversed(alphas)):
                b = rho * float(y @ q)
                q += (a - b) * s
            d = -q
            if float(d @ g) >= 0.0:  # safeguard: fall back to steepest descent
                d = -g
            a_init = 1.0 if mem else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))
            hit = _wolfe_search(drv, x, d, f, g, a_init=a_init)
            if hit is None:
                status = "linesearch"
                if not np.all(np.isfinite(drv.trace[-1:])):
                    status = "nonfinite"
                break
            a, f_new, g_new = hit
            s_vec = a * d
            y_vec = g_new - g
            sy = float(s_vec @ y_vec)
            if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
                mem.append((s_vec, y_vec, 1.0 / sy))
                if len(mem) > config.history:
                    mem.pop(0)
            x = x + s_vec
            f, g = f_new, g_new
            accepted.append(f)
            if np.max(np.abs(g)) < config.grad_tol:
                status = "gradtol"
                break
            if drv.stalled(config.obj_tol):
                status = "objtol"
                break
    except _Budget:
        status = "maxevals"
    return _finish(drv, x, f, accepted, status)


def fd_gradient(fun, x0, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        step = np.zeros_like(x0)
        step.flat[i] = h
        g.flat[i] = (fun(x0 + step) - fun(x0 - step)) / (2.0 * h)
    return g


def grad_check(fg, x0, h=1e-5):
    """Compare the callback's gradient against central finite differences.

    Per-entry error is measured relative to the finite-difference entry,
    floored at one percent of the gradient's infinity norm so near-zero
    entries do not dominate.

    Returns
    -------
    (max_rel_err, analytic, numeric)
    """
    x0 = np.asarray(x0, dtype=float)
    _, analytic = fg(x0)
    numeric = fd_gradient(lambda x: fg(x)[0], x0, h=h)
    scale = np.maximum(np.abs(numeric), 0.01 * np.max(np.abs(numeric)) + 1e-12)
    rel = np.abs(analytic - numeric) / np.maximum(scale, 1e-12)
    return float(rel.max()), analytic, numeric
