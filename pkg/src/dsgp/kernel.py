"""ARD squared-exponential kernel and its Gaussian expectations.

The kernel is k(x, x') = sigma2 * exp(-1/2 * sum_r alpha_r (x_r - x'_r)^2)
with one non-negative inverse squared lengthscale ``alpha_r`` per input
dimension.  Besides plain evaluation this module provides the three
expectations of the kernel under independent diagonal Gaussians
q(X_i) = N(mu_i, diag(S_i)) that the collapsed bound is built from:

    psi0_i      = <k(X_i, X_i)>          (scalar, = sigma2 for this kernel)
    psi1_i      = <k(X_i, Z)>            (1 x m)
    psi2_i      = <k(Z, X_i) k(X_i, Z)>  (m x m)

Rows with exactly zero variance are routed through the plain kernel so that
the collapse ``psi1 = k(mu, Z)`` and ``psi2 = k_mi k_im`` holds bit-for-bit,
not merely to rounding; a fully frozen posterior (the regression case) takes
a fast matrix path with no per-row work.

Each ``*_vjp`` function accumulates the gradient of ``sum(weights * stat)``
with respect to every input of the statistic.  Gradients are returned on the
natural scale (sigma2, alpha, variances); callers apply log-scale chain rules.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .validate import as_matrix, check_same_columns

__all__ = [
    "KernelParams",
    "InducingInputs",
    "LatentPosterior",
    "KernelGrads",
    "kernel_matrix",
    "psi0",
    "psi1",
    "psi2",
    "psi2_sum",
    "psi1_vjp",
    "psi2_vjp",
    "kmm_vjp",
]

# Cap on the number of temporary elements formed at once by the chunked
# expectation code; keeps peak memory around a few tens of MB.
_CHUNK_BUDGET = 2 ** 21


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the ARD squared-exponential kernel plus noise.

    Parameters
    ----------
    signal_variance : float
        Output scale sigma2 > 0.
    ard_weights : ndarray, shape (q,)
        Non-negative inverse squared lengthscales alpha_r.
    noise_precision : float
        Observation noise precision beta > 0.
    """

    signal_variance: float
    ard_weights: np.ndarray
    noise_precision: float

    def __post_init__(self):
        sv = float(self.signal_variance)
        beta = float(self.noise_precision)
        ard = np.atleast_1d(np.asarray(self.ard_weights, dtype=float))
        if not (np.isfinite(sv) and sv > 0.0):
            raise ValueError(f"signal_variance must be positive, got {sv}")
        if not (np.isfinite(beta) and beta > 0.0):
            raise ValueError(f"noise_precision must be positive, got {beta}")
        if ard.ndim != 1 or not np.all(np.isfinite(ard)) or np.any(ard < 0.0):
            raise ValueError("ard_weights must be a vector of non-negative finite reals")
        object.__setattr__(self, "signal_variance", sv)
        object.__setattr__(self, "noise_precision", beta)
        object.__setattr__(self, "ard_weights", ard)

    @property
    def input_dim(self):
        return self.ard_weights.shape[0]

    def replace(self, **kw):
        fields = {
            "signal_variance": self.signal_variance,
            "ard_weights": self.ard_weights,
            "noise_precision": self.noise_precision,
        }
        fields.update(kw)
        return KernelParams(**fields)


@dataclass(frozen=True)
class InducingInputs:
    """Inducing input locations Z (m x q)."""

    Z: np.ndarray

    def __post_init__(self):
        Z = as_matrix(self.Z, "Z")
        if Z.shape[0] < 1:
            raise ValueError("need at least one inducing input")
        if not np.all(np.isfinite(Z)):
            raise ValueError("Z contains NaN or Inf")
        object.__setattr__(self, "Z", Z)

    @property
    def m(self):
        return self.Z.shape[0]

    @property
    def q(self):
        return self.Z.shape[1]


@dataclass(frozen=True)
class LatentPosterior:
    """Per-point diagonal Gaussians q(X_i) = N(mu_i, diag(S_i)).

    ``frozen=True`` marks the regression case: variances are exactly zero and
    the means are observed inputs that never move during optimization.
    """

    means: np.ndarray
    variances: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        means = as_matrix(self.means, "means")
        variances = as_matrix(self.variances, "variances")
        if means.shape != variances.shape:
            raise ValueError(
                f"means {means.shape} and variances {variances.shape} differ in shape"
            )
        if not np.all(np.isfinite(means)):
            raise ValueError("means contain NaN or Inf")
        if not (np.all(np.isfinite(variances)) and np.all(variances >= 0.0)):
            raise ValueError("variances must be finite and non-negative")
        if self.frozen and np.any(variances != 0.0):
            raise ValueError("frozen posterior must have exactly zero variances")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @classmethod
    def point_mass(cls, X):
        """Frozen zero-variance posterior at the observed inputs X."""
        X = as_matrix(X, "X")
        return cls(means=X, variances=np.zeros_like(X), frozen=True)

    @property
    def n(self):
        return self.means.shape[0]

    @property
    def q(self):
        return self.means.shape[1]

    def rows(self, idx):
        """Posterior restricted to a row slice/index array."""
        return LatentPosterior(
            means=self.means[idx], variances=self.variances[idx], frozen=self.frozen
        )


@dataclass
class KernelGrads:
    """Natural-scale gradients of a weighted kernel statistic.

    ``means``/``variances`` are ``None`` when the statistic does not depend
    on a latent posterior (plain Gram matrices) or when it is frozen.
    """

    Z: np.ndarray
    signal_variance: float
    ard_weights: np.ndarray
    means: Optional[np.ndarray] = None
    variances: Optional[np.ndarray] = None


def _check_dims(q_data, params, Z=None):
    if params.input_dim != q_data:
        raise ValueError(
            f"ard_weights has length {params.input_dim} but inputs have {q_data} columns"
        )
    if Z is not None and Z.shape[1] != q_data:
        raise ValueError(f"Z has {Z.shape[1]} columns but inputs have {q_data}")


def _row_step(per_row_elems, budget=_CHUNK_BUDGET):
    return max(1, int(budget // max(1, per_row_elems)))


def kernel_matrix(Xa, Xb, params):
    """Gram matrix k(Xa, Xb) of the ARD squared-exponential kernel.

    Parameters
    ----------
    Xa : ndarray, shape (na, q)
    Xb : ndarray, shape (nb, q)
    params : KernelParams

    Returns
    -------
    ndarray, shape (na, nb)
    """
    Xa = as_matrix(Xa, "Xa")
    Xb = as_matrix(Xb, "Xb")
    check_same_columns(Xa, Xb, "Xa", "Xb")
    _check_dims(Xa.shape[1], params)
    na, q = Xa.shape
    nb = Xb.shape[0]
    alpha = params.ard_weights
    out = np.empty((na, nb))
    step = _row_step(nb * q)
    for lo in range(0, na, step):
        hi = min(na, lo + step)
        d = Xa[lo:hi, None, :] - Xb[None, :, :]
        quad = np.einsum("ijr,r->ij", d * d, alpha)
        out[lo:hi] = params.signal_variance * np.exp(-0.5 * quad)
    return out


def psi0(latents, params):
    """<k(X_i, X_i)> for every row; constant sigma2 for this kernel.

    Returns
    -------
    ndarray, shape (n,)
    """
    _check_dims(latents.q, params)
    return np.full(latents.n, params.signal_variance)


def _zero_rows(latents):
    """Boolean mask of rows whose variance vector is exactly zero."""
    return ~latents.variances.any(axis=1)


def _psi1_dense(means, variances, Z, params):
    """Closed-form <k(X_i, Z)> for strictly positive-variance rows."""
    alpha = params.ard_weights
    n, q = means.shape
    m = Z.shape[0]
    c = alpha * variances + 1.0
    lognorm = -0.5 * np.sum(np.log(c), axis=1)
    a = alpha / c
    out = np.empty((n, m))
    step = _row_step(m * q)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        d = means[lo:hi, None, :] - Z[None, :, :]
        quad = np.einsum("imr,ir->im", d * d, a[lo:hi])
        out[lo:hi] = params.signal_variance * np.exp(lognorm[lo:hi, None] - 0.5 * quad)
    return out


def psi1(latents, Z, params):
    """Expected cross-covariance <k(X_i, Z)> row by row.

    Zero-variance rows (and fully frozen posteriors) evaluate the plain
    kernel, so the collapse to ``kernel_matrix`` is exact.

    Returns
    -------
    ndarray, shape (n, m)
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(latents.q, params, Zm)
    if latents.frozen:
        return kernel_matrix(latents.means, Zm, params)
    zero = _zero_rows(latents)
    if zero.all():
        return kernel_matrix(latents.means, Zm, params)
    if not zero.any():
        return _psi1_dense(latents.means, latents.variances, Zm, params)
    out = np.empty((latents.n, Zm.shape[0]))
    out[zero] = kernel_matrix(latents.means[zero], Zm, params)
    live = ~zero
    out[live] = _psi1_dense(latents.means[live], latents.variances[live], Zm, params)
    return out


def _psi2_setup(Z, params):
    """Pairwise pieces of the psi2 closed form that do not depend on the data."""
    alpha = params.ard_weights
    dvec = Z[:, None, :] - Z[None, :, :]          # (m, m, q)
    dsq = dvec * dvec
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])  # (m, m, q)
    base = np.exp(-0.25 * np.einsum("abr,r->ab", dsq, alpha))
    return dvec, dsq, zbar, base


def _psi2_dense_chunks(means, variances, Z, params):
    """Yield (slice, psi2 tensor chunk, per-chunk aux) for positive-variance rows.

    The aux tuple carries the quantities the gradient pass reuses:
    ``(g, lognorm)`` with g = 2*alpha*S + 1.
    """
    alpha = params.ard_weights
    n, q = means.shape
    m = Z.shape[0]
    dvec, dsq, zbar, base = _psi2_setup(Z, params)
    zbar2 = zbar * zbar
    sv2 = params.signal_variance ** 2
    step = _row_step(m * m)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        mu = means[lo:hi]
        g = 2.0 * alpha * variances[lo:hi] + 1.0
        w = alpha / g
        lognorm = -0.5 * np.sum(np.log(g), axis=1)
        c1 = np.sum(w * mu * mu, axis=1)
        t2 = np.einsum("ir,abr->iab", w * mu, zbar)
        t3 = np.einsum("ir,abr->iab", w, zbar2)
        quad = c1[:, None, None] - 2.0 * t2 + t3
        chunk = sv2 * np.exp(lognorm)[:, None, None] * base[None, :, :] * np.exp(-quad)
        yield slice(lo, hi), chunk, (g, lognorm)


def psi2(latents, Z, params):
    """Per-row expectation <k(Z, X_i) k(X_i, Z)>.

    Returns
    -------
    ndarray, shape (n, m, m)
        Symmetric PSD matrix per row; zero-variance rows are exact outer
        products of the plain kernel vector.
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(latents.q, params, Zm)
    n, m = latents.n, Zm.shape[0]
    out = np.empty((n, m, m))
    zero = np.ones(n, dtype=bool) if latents.frozen else _zero_rows(latents)
    if zero.any():
        K = kernel_matrix(latents.means[zero], Zm, params)
        out[zero] = np.einsum("ia,ib->iab", K, K)
    live = ~zero
    if live.any():
        sub = np.empty((int(live.sum()), m, m))
        for sl, chunk, _ in _psi2_dense_chunks(
            latents.means[live], latents.variances[live], Zm, params
        ):
            sub[sl] = chunk
        out[live] = sub
    return out


def psi2_sum(latents, Z, params):
    """Sum of psi2 over all rows, the m x m accumulator D for a block.

    Returns
    -------
    ndarray, shape (m, m)
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(latents.q, params, Zm)
    m = Zm.shape[0]
    out = np.zeros((m, m))
    zero = np.ones(latents.n, dtype=bool) if latents.frozen else _zero_rows(latents)
    if zero.any():
        K = kernel_matrix(latents.means[zero], Zm, params)
        out += K.T @ K
    live = ~zero
    if live.any():
        for _, chunk, _ in _psi2_dense_chunks(
            latents.means[live], latents.variances[live], Zm, params
        ):
            out += chunk.sum(axis=0)
    return 0.5 * (out + out.T)


def _plain_vjp(P, X, Z, params, want_input_grads):
    """Gradients of sum(P * K) for the plain kernel K = k(X, Z).

    P must already include the kernel value factor, i.e. P = weights * K.
    Uses matrix products only; never materialises an (n, m, q) tensor.
    """
    alpha = params.ard_weights
    rowsum = P.sum(axis=1)          # (n,)
    colsum = P.sum(axis=0)          # (m,)
    PZ = P @ Z                      # (n, q)
    PtX = P.T @ X                   # (m, q)
    x2 = X * X
    z2 = Z * Z
    # sum_ia P_ia (X_ir - Z_ar)^2, per dimension r
    quad_r = rowsum @ x2 - 2.0 * np.sum(X * PZ, axis=0) + colsum @ z2
    d_ard = -0.5 * quad_r
    d_sv = float(P.sum()) / params.signal_variance
    dZ = alpha * (PtX - Z * colsum[:, None])
    d_means = d_vars = None
    if want_input_grads:
        d_means = -alpha * (X * rowsum[:, None] - PZ)
        # one-sided derivative at S = 0
        quad_ir = x2 * rowsum[:, None] - 2.0 * X * PZ + (P @ z2)
        d_vars = -0.5 * alpha * rowsum[:, None] + 0.5 * alpha ** 2 * quad_ir
    return dZ, d_sv, d_ard, d_means, d_vars


def psi1_vjp(V, latents, Z, params):
    """Gradients of ``sum(V * psi1)`` with respect to all inputs.

    Parameters
    ----------
    V : ndarray, shape (n, m)
        Weight on each psi1 entry.

    Returns
    -------
    KernelGrads
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(latents.q, params, Zm)
    V = np.asarray(V, dtype=float)
    n, q = latents.means.shape
    m = Zm.shape[0]
    if V.shape != (n, m):
        raise ValueError(f"V has shape {V.shape}, expected {(n, m)}")
    alpha = params.ard_weights

    dZ = np.zeros((m, q))
    d_sv = 0.0
    d_ard = np.zeros(q)
    d_means = None if latents.frozen else np.zeros((n, q))
    d_vars = None if latents.frozen else np.zeros((n, q))

    zero = np.ones(n, dtype=bool) if latents.frozen else _zero_rows(latents)
    if zero.any():
        X = latents.means[zero]
        K = kernel_matrix(X, Zm, params)
        P = V[zero] * K
        z_dZ, z_sv, z_ard, z_mu, z_var = _plain_vjp(
            P, X, Zm, params, want_input_grads=not latents.frozen
        )
        dZ += z_dZ
        d_sv += z_sv
        d_ard += z_ard
        if not latents.frozen:
            d_means[zero] = z_mu
            d_vars[zero] = z_var

    live = ~zero
    if live.any():
        mu_l = latents.means[live]
        S_l = latents.variances[live]
        V_l = V[live]
        k = mu_l.shape[0]
        c = alpha * S_l + 1.0
        a = alpha / c
        vals = _psi1_dense(mu_l, S_l, Zm, params)
        P = V_l * vals
        rowsum = P.sum(axis=1)
        mu_live = np.empty((k, q))
        var_live = np.empty((k, q))
        step = _row_step(m * q)
        for lo in range(0, k, step):
            hi = min(k, lo + step)
            d = mu_l[lo:hi, None, :] - Zm[None, :, :]
            Pd = np.einsum("im,imr->ir", P[lo:hi], d)
            Pd2 = np.einsum("im,imr->ir", P[lo:hi], d * d)
            ai = a[lo:hi]
            mu_live[lo:hi] = -ai * Pd
            var_live[lo:hi] = (
                -0.5 * ai * rowsum[lo:hi, None] + 0.5 * ai * ai * Pd2
            )
            dZ += np.einsum("im,imr,ir->mr", P[lo:hi], d, ai)
            d_ard += np.sum(
                -0.5 * (S_l[lo:hi] / c[lo:hi]) * rowsum[lo:hi, None]
                - 0.5 * Pd2 / (c[lo:hi] ** 2),
                axis=0,
            )
        d_sv += float(P.sum()) / params.signal_variance
        d_means[live] = mu_live
        d_vars[live] = var_live

    return KernelGrads(
        Z=dZ,
        signal_variance=d_sv,
        ard_weights=d_ard,
        means=d_means,
        variances=d_vars,
    )


def psi2_vjp(W, latents, Z, params):
    """Gradients of ``sum_i sum_ab W_ab * psi2_i[a, b]`` (W symmetric).

    Parameters
    ----------
    W : ndarray, shape (m, m)
        Symmetric weight matrix applied to every per-row psi2.

    Returns
    -------
    KernelGrads
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(latents.q, params, Zm)
    W = np.asarray(W, dtype=float)
    m = Zm.shape[0]
    if W.shape != (m, m):
        raise ValueError(f"W has shape {W.shape}, expected {(m, m)}")
    n, q = latents.means.shape
    alpha = params.ard_weights

    dZ = np.zeros((m, q))
    d_sv = 0.0
    d_ard = np.zeros(q)
    d_means = None if latents.frozen else np.zeros((n, q))
    d_vars = None if latents.frozen else np.zeros((n, q))

    zero = np.ones(n, dtype=bool) if latents.frozen else _zero_rows(latents)
    if zero.any():
        X = latents.means[zero]
        K = kernel_matrix(X, Zm, params)
        P = 2.0 * (K @ W) * K
        z_dZ, z_sv, z_ard, z_mu, z_var = _plain_vjp(
            P, X, Zm, params, want_input_grads=not latents.frozen
        )
        dZ += z_dZ
        d_sv += z_sv
        d_ard += z_ard
        if not latents.frozen:
            d_means[zero] = z_mu
            d_vars[zero] = z_var

    live = ~zero
    if live.any():
        mu_l = latents.means[live]
        S_l = latents.variances[live]
        dvec, dsq, zbar, _ = _psi2_setup(Zm, params)
        zbar2 = zbar * zbar
        mu_acc = np.empty((int(live.sum()), q))
        var_acc = np.empty((int(live.sum()), q))
        for sl, chunk, (g, _) in _psi2_dense_chunks(mu_l, S_l, Zm, params):
            WP = W[None, :, :] * chunk           # (k, m, m)
            mu_c = mu_l[sl]
            s = WP.sum(axis=(1, 2))              # (k,)
            t = np.einsum("iab,abr->ir", WP, zbar)
            u = np.einsum("iab,abr->ir", WP, zbar2)
            wd = np.einsum("iab,abr->ir", WP, dsq)
            qq = mu_c * mu_c * s[:, None] - 2.0 * mu_c * t + u
            ag = alpha / g
            mu_acc[sl] = -2.0 * ag * (mu_c * s[:, None] - t)
            var_acc[sl] = -ag * s[:, None] + 2.0 * ag * ag * qq
            d_ard += np.sum(
                -(S_l[sl] / g) * s[:, None] - 0.25 * wd - qq / (g * g), axis=0
            )
            d_sv += 2.0 * float(s.sum()) / params.signal_variance
            m1 = np.einsum("iab,abr->ar", WP, dvec)
            m2 = np.einsum("ia,ir->ar", WP.sum(axis=2), mu_c / g)
            m3 = np.einsum("iar,ir->ar", np.einsum("iab,abr->iar", WP, zbar), 1.0 / g)
            dZ += alpha * (-m1 + 2.0 * (m2 - m3))
        if not latents.frozen:
            d_means[live] = mu_acc
            d_vars[live] = var_acc

    return KernelGrads(
        Z=dZ,
        signal_variance=d_sv,
        ard_weights=d_ard,
        means=d_means,
        variances=d_vars,
    )


def kmm_vjp(W, Z, params, K_reg):
    """Gradients of ``sum(W * K_reg)`` for the regularised Gram matrix on Z.

    ``K_reg`` is ``k(Z, Z) + jitter * I`` with the jitter proportional to the
    signal variance, so dK_reg/d sigma2 = K_reg / sigma2 holds exactly and the
    returned signal-variance gradient accounts for the regulariser.

    Returns
    -------
    KernelGrads
        With ``means``/``variances`` set to None.
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else as_matrix(Z, "Z")
    _check_dims(Zm.shape[1], params, Zm)
    W = np.asarray(W, dtype=float)
    K_reg = np.asarray(K_reg, dtype=float)
    alpha = params.ard_weights
    WK = W * K_reg
    rowsum = WK.sum(axis=1)
    colsum = WK.sum(axis=0)
    WKZ = WK @ Zm
    WKtZ = WK.T @ Zm
    z2 = Zm * Zm
    # d/dZ_ar of sum_ab WK'_ab (-1/2 alpha_r (Z_ar - Z_br)^2), both slots
    dZ = -alpha * (Zm * rowsum[:, None] - WKZ + Zm * colsum[:, None] - WKtZ)
    quad_r = rowsum @ z2 - 2.0 * np.sum(Zm * WKZ, axis=0) + colsum @ z2
    d_ard = -0.5 * quad_r
    d_sv = float(WK.sum()) / params.signal_variance
    return KernelGrads(Z=dZ, signal_variance=d_sv, ard_weights=d_ard)
