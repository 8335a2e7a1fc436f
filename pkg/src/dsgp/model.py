"""User-facing model: construction, training, prediction, density scoring.

One state type covers both problems.  Regression freezes the latent
posterior at the given inputs with zero variance; the latent-variable model
keeps per-point variational means and variances.  Both run through the same
bound and engine code paths, so the regression model is exactly the frozen
special case, not a parallel implementation.
"""

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from sklearn.cluster import KMeans

from .bound import bound_core, local_grads, local_terms, reduce_partials
from .engine import (
    EngineState,
    GlobalParams,
    make_backend,
    make_partitions,
    optimize_step,
)
from .kernel import InducingInputs, KernelParams, LatentPosterior, kernel_matrix
from .linalg import PosDefError
from .optim import OptimizerConfig, lbfgs
from .validate import as_matrix, check_finite_2d

__all__ = [
    "ModelState",
    "Prediction",
    "TrainTrace",
    "PCAProjector",
    "BETA_CAP",
    "new_regression",
    "new_gplvm",
    "train",
    "evaluate",
    "predict",
    "classify_by_density",
    "reconstruct",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

# Upper bound on the noise precision: keeps degenerate (near-noiseless)
# targets from driving beta to infinity during training.
BETA_CAP = 1e6

CKPT_MAGIC = b"DGPC"
CKPT_VERSION = 1
_MODE_CODES = {"regression": 0, "latent": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


@dataclass(frozen=True)
class PCAProjector:
    """Linear map from observation space to the latent initialization space."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (q, d) rows: principal axes
    scales: np.ndarray  # (q,) score stds used for unit-variance scaling

    def project(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return (Y - self.mean) @ self.components.T / self.scales


@dataclass(frozen=True)
class ModelState:
    """Data, latent posterior, and shared parameters for one model."""

    Y: np.ndarray
    latents: LatentPosterior
    global_params: GlobalParams
    mode: str
    projector: Optional[PCAProjector] = None

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.mode == "regression") != self.latents.frozen:
            raise ValueError("regression mode requires frozen zero-variance latents")
        # dimension consistency enforced by the engine-state constructor
        EngineState(Y=self.Y, latents=self.latents, global_params=self.global_params)

    @property
    def engine_state(self):
        return EngineState(
            Y=self.Y, latents=self.latents, global_params=self.global_params
        )

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def m(self):
        return self.global_params.m

    @property
    def q(self):
        return self.global_params.q


@dataclass(frozen=True)
class Prediction:
    """Posterior predictive mean and per-output variance."""

    mean: np.ndarray  # (n*, d)
    variance: np.ndarray  # (n*, d)


@dataclass(frozen=True)
class TrainTrace:
    """Per-step objective values and bookkeeping from a training run."""

    bounds: List[float] = field(default_factory=list)
    accepted: List[bool] = field(default_factory=list)
    statuses: List[str] = field(default_factory=list)
    n_evals: int = 0

    @property
    def final_bound(self):
        return self.bounds[-1] if self.bounds else float("nan")


def _data_scale_kernel(Y, ard_weights):
    total_var = float(np.var(Y))
    if total_var == 0.0:
        total_var = 1.0
    beta0 = min(1.0 / (0.1 * total_var), BETA_CAP)
    return KernelParams(
        signal_variance=total_var, ard_weights=ard_weights, noise_precision=beta0
    )


def _kmeans_centers(points, m, seed, noise_frac=0.01):
    """k-means centers plus a little noise so no center sits exactly on data."""
    if m == points.shape[0]:
        centers = points.copy()
    else:
        km = KMeans(n_clusters=m, random_state=seed, n_init=10)
        km.fit(points)
        centers = km.cluster_centers_
    rng = np.random.default_rng(seed)
    scale = noise_frac * points.std(axis=0)
    return centers + rng.normal(0.0, 1.0, centers.shape) * scale


def new_regression(X, Y, m, seed=0, init_z="kmeans"):
    """Sparse GP regression state: latents frozen at the inputs.

    ``init_z``: ``kmeans`` (default) places inducing inputs at noised k-means
    centers of X; ``data`` copies the first m rows of X exactly (useful for
    the m = n configuration, where the bound is tight).
    """
    X = as_matrix(np.asarray(X, dtype=float), "X")
    Y = as_matrix(np.asarray(Y, dtype=float), "Y")
    check_finite_2d(X, "X")
    check_finite_2d(Y, "Y")
    n, q = X.shape
    if Y.shape[0] != n:
        raise ValueError("X and Y disagree on row count")
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if init_z == "data":
        Z = X[:m].copy()
    elif init_z == "kmeans":
        Z = _kmeans_centers(X, m, seed)
    else:
        raise ValueError(f"unknown init_z {init_z!r}")
    ard0 = 1.0 / np.maximum(X.var(axis=0), 1e-12)
    return ModelState(
        Y=Y,
        latents=LatentPosterior.point_mass(X),
        global_params=GlobalParams(
            Z=InducingInputs(Z), kernel=_data_scale_kernel(Y, ard0)
        ),
        mode="regression",
    )


def new_gplvm(Y, q, m, seed=0, init_variance=0.1, init_noise=0.0):
    """Latent-variable model state: latents seeded from PCA scores.

    Means are the first q principal-component scores of mean-centered Y,
    rescaled to unit variance per dimension; variances start at
    ``init_variance``; inducing inputs are noised k-means centers of the
    means.

    ``init_noise`` adds seed-dependent Gaussian noise of that standard
    deviation to the (unit-variance) scores.  The PCA start is otherwise
    deterministic, so restart schemes that only vary ``seed`` explore a
    single basin; a noised start around 1.0 gives restarts real diversity.
    """
    Y = as_matrix(np.asarray(Y, dtype=float), "Y")
    check_finite_2d(Y, "Y")
    n, d = Y.shape
    if not 1 <= q <= d:
        raise ValueError(f"need 1 <= q <= d, got q={q}, d={d}")
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    mean = Y.mean(axis=0)
    centered = Y - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:q]
    scores = centered @ components.T
    scales = scores.std(axis=0)
    scales = np.where(scales == 0.0, 1.0, scales)
    scores = scores / scales
    if init_noise:
        rng = np.random.default_rng(seed)
        scores = scores + float(init_noise) * rng.standard_normal(scores.shape)
    projector = PCAProjector(mean=mean, components=components, scales=scales)
    Z = _kmeans_centers(scores, m, seed)
    return ModelState(
        Y=Y,
        latents=LatentPosterior(
            means=scores, variances=np.full((n, q), float(init_variance))
        ),
        global_params=GlobalParams(
            Z=InducingInputs(Z), kernel=_data_scale_kernel(Y, np.ones(q))
        ),
        mode="latent",
        projector=projector,
    )


def _cap_beta(es):
    beta = es.global_params.kernel.noise_precision
    if beta <= BETA_CAP:
        return es
    gp = replace(
        es.global_params, kernel=es.global_params.kernel.replace(noise_precision=BETA_CAP)
    )
    return EngineState(Y=es.Y, latents=es.latents, global_params=gp)


def train(
    state,
    backend="serial",
    workers=1,
    method="lbfgs",
    max_evals=200,
    evals_per_step=25,
    mode="joint",
    local_steps=0,
):
    """Maximize the bound; returns (trained state, trace).

    Runs engine optimization steps of at most ``evals_per_step`` objective
    evaluations until the budget is spent, the gradient converges, or two
    consecutive steps fail to improve.  Deterministic for fixed inputs,
    backend, and worker count.
    """
    be = make_backend(backend)
    partitions = make_partitions(state.n, workers)
    es = state.engine_state
    bounds, accepted, statuses = [], [], []
    evals = 0
    stall = 0
    try:
        be.bind(es.Y, es.latents, partitions)
        while evals < max_evals:
            budget = min(evals_per_step, max_evals - evals)
            if budget < 2:
                break
            es, info = optimize_step(
                es,
                be,
                method=method,
                opt_config=OptimizerConfig(max_evals=budget),
                mode=mode,
                local_steps=local_steps,
            )
            es = _cap_beta(es)
            evals += info.n_evals
            bounds.append(info.bound_after)
            accepted.append(info.accepted)
            statuses.append(info.status)
            stall = 0 if info.accepted else stall + 1
            if stall >= 2 or info.status == "gradtol":
                break
    finally:
        be.close()
    new_state = replace(state, Y=es.Y, latents=es.latents, global_params=es.global_params)
    return new_state, TrainTrace(
        bounds=bounds, accepted=accepted, statuses=statuses, n_evals=evals
    )


def _totals_and_core(Y, latents, gp, n, d):
    parts = local_terms(Y, latents, gp.Z, gp.kernel)
    totals = reduce_partials([parts], gp.m, d)
    return totals, bound_core(totals, gp.Z, gp.kernel, n, d)


def evaluate(state):
    """Current bound value (single-block computation)."""
    gp = state.global_params
    _, core = _totals_and_core(state.Y, state.latents, gp, state.n, state.d)
    return core.value


def predict(state, X_star, include_noise=False):
    """Predictive mean and variance at the given input (or latent) points.

    Marginalizes the analytically optimal inducing posterior:
    mean = K*m (K + beta D)^-1 beta C and variance = k** − K*m K^-1 Km*
    + K*m (K + beta D)^-1 Km*, plus 1/beta when ``include_noise``.
    """
    X_star = as_matrix(np.asarray(X_star, dtype=float), "X_star")
    if X_star.shape[1] != state.q:
        raise ValueError(
            f"X_star has {X_star.shape[1]} columns, model expects {state.q}"
        )
    gp = state.global_params
    _, core = _totals_and_core(state.Y, state.latents, gp, state.n, state.d)
    acc = core.accum
    K_sm = kernel_matrix(X_star, gp.Z.Z, gp.kernel)
    mean = gp.kernel.noise_precision * (K_sm @ acc.E)
    quad_prior = np.einsum("ij,jk,ik->i", K_sm, acc.Kinv, K_sm)
    quad_post = np.einsum("ij,jk,ik->i", K_sm, acc.P, K_sm)
    var = gp.kernel.signal_variance - quad_prior + quad_post
    var = np.maximum(var, 0.0)  # guards roundoff on the PSD difference
    if include_noise:
        var = var + 1.0 / gp.kernel.noise_precision
    return Prediction(mean=mean, variance=np.tile(var[:, None], (1, state.d)))


def _init_test_latent(state, y_filled):
    if state.projector is not None:
        return state.projector.project(y_filled)[0]
    return np.zeros(state.q)


def _fit_test_latent(state, y_row, columns=None, max_evals=150):
    """Optimize a fresh latent point's (mean, variance) for one observation.

    All training latents and shared parameters stay fixed; only the new
    point's variational parameters move.  ``columns`` restricts the bound to
    a subset of output dimensions.  Returns
    (augmented bound, train-only bound, latent mean, converged flag).
    """
    gp = state.global_params
    if columns is None:
        Y_train = state.Y
        y_obs = y_row
    else:
        Y_train = state.Y[:, columns]
        y_obs = y_row[:, columns]
    d_eff = Y_train.shape[1]
    n = state.n
    totals_train, base_core = _totals_and_core(Y_train, state.latents, gp, n, d_eff)
    base_value = base_core.value

    q = state.q
    if columns is None:
        filled = y_row[0]
    else:
        # unobserved dimensions take the training mean so the projection
        # only reflects what was actually seen
        base = state.projector.mean if state.projector is not None else np.zeros(state.d)
        filled = base.copy()
        filled[columns] = y_row[0, columns]
    x0 = _init_test_latent(state, filled)
    theta0 = np.concatenate([x0, np.full(q, np.log(0.1))])

    def fg(theta):
        mu = theta[:q][None, :]
        S = np.exp(theta[q:])[None, :]
        lat = LatentPosterior(means=mu, variances=S)
        try:
            parts = totals_train.merge(local_terms(y_obs, lat, gp.Z, gp.kernel))
            core = bound_core(parts, gp.Z, gp.kernel, n + 1, d_eff)
            dmu, dlogS = local_grads(y_obs, lat, gp.Z, gp.kernel, core.accum)
        except PosDefError:
            return np.inf, np.zeros_like(theta)
        return -core.value, -np.concatenate([dmu.ravel(), dlogS.ravel()])

    res = lbfgs(fg, theta0, OptimizerConfig(max_evals=max_evals))
    # A line-search stall means no further ascent direction was found, which
    # at these scales is ordinary termination; only a spent budget suggests
    # the fit may genuinely be unconverged.
    converged = res.status in ("gradtol", "objtol", "linesearch")
    if not converged:
        logger.warning(
            "test-latent optimization stopped with status %r; using best value",
            res.status,
        )
    return -res.fun, base_value, res.x[:q], converged


def classify_by_density(class_models, y_star, max_evals=150):
    """Label a point by which class density model explains it best.

    Each class scores log p(y*|Y) ≈ L_{augmented} − L_{train}: the bound with
    y* appended (its fresh latent point optimized, everything else fixed)
    minus the bound on the training data alone.  Ties resolve to the lowest
    class index.
    """
    if not class_models:
        raise ValueError("need at least one class model")
    d = class_models[0].d
    for i, m in enumerate(class_models):
        if m.mode != "latent":
            raise ValueError(f"class model {i} is not a latent-variable model")
        if m.d != d:
            raise ValueError("class models disagree on output dimension")
    y_row = np.asarray(y_star, dtype=float).reshape(1, d)
    scores = np.empty(len(class_models))
    for i, m in enumerate(class_models):
        aug, base, _, _ = _fit_test_latent(m, y_row, max_evals=max_evals)
        scores[i] = aug - base
    return int(np.argmax(scores)), scores


def reconstruct(state, y_partial, observed, max_evals=150):
    """Fill in a partially observed point via its optimized latent.

    ``observed`` is a boolean mask over output dimensions.  The fresh latent
    point is fit against the bound restricted to the observed columns; the
    returned vector is the predictive mean at the optimized latent for every
    dimension.
    """
    if state.mode != "latent":
        raise ValueError("reconstruction needs a latent-variable model")
    observed = np.asarray(observed, dtype=bool).ravel()
    if observed.shape != (state.d,):
        raise ValueError(f"mask must have length {state.d}")
    if not observed.any():
        raise ValueError("at least one dimension must be observed")
    y = np.asarray(y_partial, dtype=float).reshape(1, state.d)
    columns = np.flatnonzero(observed)
    _, _, x_opt, _ = _fit_test_latent(state, y, columns=columns, max_evals=max_evals)
    return predict(state, x_opt[None, :]).mean[0]


def save_model(state, path):
    """Write a model checkpoint (atomic replace; see load_model)."""
    has_proj = state.projector is not None
    header = CKPT_MAGIC + struct.pack(
        "<HBBQQQQ",
        CKPT_VERSION,
        _MODE_CODES[state.mode],
        1 if has_proj else 0,
        state.n,
        state.d,
        state.m,
        state.q,
    )
    k = state.global_params.kernel
    blocks = [
        state.Y,
        state.latents.means,
        np.zeros((state.n, state.q)) if state.latents.frozen else state.latents.variances,
        state.global_params.Z.Z,
        k.ard_weights,
        np.array([k.signal_variance, k.noise_precision]),
    ]
    if has_proj:
        blocks += [state.projector.mean, state.projector.components, state.projector.scales]
    payload = header + b"".join(
        np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path):
    """Read a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, mode_code, flags, n, d, m, q = struct.unpack_from("<HBBQQQQ", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if mode_code not in _MODE_NAMES:
        raise ValueError(f"{path}: unknown mode code {mode_code}")
    offset = 4 + struct.calcsize("<HBBQQQQ")

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).copy()

    expected = 4 + struct.calcsize("<HBBQQQQ") + 8 * (
        n * d + 2 * n * q + m * q + q + 2 + ((flags & 1) * (d + q * d + q))
    )
    if len(blob) != expected:
        raise ValueError(f"{path}: checkpoint has {len(blob)} bytes, expected {expected}")

    Y = take(n, d)
    means = take(n, q)
    variances = take(n, q)
    Z = take(m, q)
    ard = take(q)
    sv, beta = take(2)
    mode = _MODE_NAMES[mode_code]
    if mode == "regression":
        latents = LatentPosterior.point_mass(means)
    else:
        latents = LatentPosterior(means=means, variances=variances)
    projector = None
    if flags & 1:
        projector = PCAProjector(mean=take(d), components=take(q, d), scales=take(q))
    return ModelState(
        Y=Y,
        latents=latents,
        global_params=GlobalParams(
            Z=InducingInputs(Z),
            kernel=KernelParams(
                signal_variance=float(sv), ard_weights=ard, noise_precision=float(beta)
            ),
        ),
        mode=mode,
        projector=projector,
    )
