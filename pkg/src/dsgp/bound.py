"""Collapsed variational lower bound as a sum of per-point terms.

For outputs Y (n x d), inducing inputs Z (m x q) and an ARD kernel with
noise precision beta, the bound on the log marginal likelihood is

    F = -(nd/2) log 2pi + (nd/2) log beta
        + (d/2) log|K~|  - (d/2) log|K~ + beta D|
        - (beta/2) A - (beta d/2) B + (beta d/2) tr(K~^-1 D)
        + (beta^2/2) tr(C^T (K~ + beta D)^-1 C) - KL

where the data enter only through sums of independent per-point statistics

    A  = sum_i ||Y_i||^2          B = sum_i psi0_i
    C  = sum_i psi1_i^T Y_i       D = sum_i psi2_i
    KL = sum_i KL(q(X_i) || N(0, I))   (zero when the posterior is frozen).

A, B, C, D, KL therefore decompose over any partition of the rows
(:class:`PartialSums` is the per-block contribution) and the bound itself is
assembled from the reduced totals with O(m^3) work, independent of n.

K~ is the inducing Gram matrix with a diagonal regulariser proportional to
the signal variance.  That choice keeps F a true lower bound on the exact
log marginal of the *same* model — it is the bound obtained when the
inducing variables carry prior N(0, K_mm + eps*sigma2*I), whose implied
marginal over the data is unchanged — and it makes d K~ / d log sigma2 = K~
hold exactly, so hyperparameter gradients stay exact in the presence of the
regulariser.

Gradients are likewise split: :func:`grad_terms` produces each block's
additive contribution from constant-size broadcast state
(:class:`StepAccum`), and :func:`finalize_gradients` adds the terms that
involve only the reduced totals.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .linalg import (
    MAX_REL_JITTER,
    REL_JITTER,
    CholFactor,
    PosDefError,
    inv_from_chol,
    logdet_from_chol,
    solve_chol,
)
from .kernel import (
    InducingInputs,
    kernel_matrix,
    psi0,
    psi1,
    psi1_vjp,
    psi2_sum,
    psi2_vjp,
    kmm_vjp,
)
from .validate import check_finite_2d

__all__ = [
    "PartialSums",
    "StepAccum",
    "GradGlobal",
    "GradTerms",
    "BoundReport",
    "BoundCore",
    "kl_diag_gaussian",
    "local_terms",
    "reduce_partials",
    "assemble_bound",
    "bound_core",
    "grad_terms",
    "local_grads",
    "finalize_gradients",
    "assemble_gradients",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PartialSums:
    """One block's additive contribution to the bound statistics."""

    A: float
    B: float
    C: np.ndarray
    D: np.ndarray
    KL: float
    count: int

    @classmethod
    def zero(cls, m, d):
        return cls(A=0.0, B=0.0, C=np.zeros((m, d)), D=np.zeros((m, m)), KL=0.0, count=0)

    def merge(self, other):
        """Field-wise sum; commutative, associative up to rounding."""
        if self.C.shape != other.C.shape or self.D.shape != other.D.shape:
            raise ValueError("cannot merge partial sums with different shapes")
        return PartialSums(
            A=self.A + other.A,
            B=self.B + other.B,
            C=self.C + other.C,
            D=self.D + other.D,
            KL=self.KL + other.KL,
            count=self.count + other.count,
        )


def reduce_partials(parts, m, d):
    """Fold a sequence of PartialSums in the given (ascending-index) order."""
    total = PartialSums.zero(m, d)
    for p in parts:
        total = total.merge(p)
    return total


def kl_diag_gaussian(mu_i, S_i):
    """KL(N(mu, diag(S)) || N(0, I)) for one point.

    Parameters
    ----------
    mu_i, S_i : array-like, shape (q,)
        Posterior mean and variance of a single latent point; variances must
        be strictly positive.
    """
    mu = np.atleast_1d(np.asarray(mu_i, dtype=float)).ravel()
    S = np.atleast_1d(np.asarray(S_i, dtype=float)).ravel()
    if np.any(S <= 0.0):
        raise ValueError("KL requires strictly positive variances")
    return 0.5 * float(np.sum(mu * mu + S - np.log(S) - 1.0))


def _kl_block(latents):
    if latents.frozen:
        return 0.0
    S = latents.variances
    if np.any(S <= 0.0):
        raise ValueError("latent-mode KL requires strictly positive variances")
    mu = latents.means
    return 0.5 * float(np.sum(mu * mu + S - np.log(S) - 1.0))


def local_terms(Y_block, latents_block, Z, params):
    """Map step: the five partial sums for one block of rows.

    Returns
    -------
    PartialSums
    """
    Y = check_finite_2d(Y_block, "Y_block")
    if Y.shape[0] != latents_block.n:
        raise ValueError(
            f"Y_block has {Y.shape[0]} rows but latents have {latents_block.n}"
        )
    Zm = Z.Z if isinstance(Z, InducingInputs) else np.asarray(Z, dtype=float)
    m = Zm.shape[0]
    if Y.shape[0] == 0:
        return PartialSums.zero(m, Y.shape[1])
    P1 = psi1(latents_block, Zm, params)
    return PartialSums(
        A=float(np.sum(Y * Y)),
        B=float(np.sum(psi0(latents_block, params))),
        C=P1.T @ Y,
        D=psi2_sum(latents_block, Zm, params),
        KL=_kl_block(latents_block),
        count=Y.shape[0],
    )


def _factorize(Kmm, D, beta, signal_variance):
    """Jointly factorize K~ = Kmm + j*I and Sigma = K~ + beta*D.

    The same escalating diagonal regulariser is applied to both matrices (it
    enters Sigma through K~), so the pair stays algebraically consistent.
    """
    m = Kmm.shape[0]
    eye = np.eye(m)
    rel = REL_JITTER
    while True:
        jitter = rel * signal_variance
        K_reg = Kmm + jitter * eye
        Sigma = K_reg + beta * D
        try:
            LK = sla.cholesky(K_reg, lower=True, check_finite=False)
            LS = sla.cholesky(Sigma, lower=True, check_finite=False)
            return (
                CholFactor(L=LK, jitter=jitter, matrix=K_reg),
                CholFactor(L=LS, jitter=jitter, matrix=Sigma),
            )
        except np.linalg.LinAlgError:
            if rel >= MAX_REL_JITTER:
                raise PosDefError(
                    f"inducing Gram factorization failed at jitter "
                    f"{jitter:.3e} (relative {rel:.0e})"
                )
            rel *= 10.0


@dataclass(frozen=True)
class StepAccum:
    """Constant-size state broadcast after the reduce step.

    Together with a worker's own block this is sufficient to compute the
    block's gradient contributions: Sigma = K~ + beta D.

    Attributes
    ----------
    P : ndarray, shape (m, m)
        Sigma^-1.
    E : ndarray, shape (m, d)
        Sigma^-1 C.
    Kinv : ndarray, shape (m, m)
        K~^-1.
    beta : float
    d : int
    """

    P: np.ndarray
    E: np.ndarray
    Kinv: np.ndarray
    beta: float
    d: int

    def weight_D(self):
        """dF/dD with C, K~ held fixed; symmetric m x m."""
        b = self.beta
        W = 0.5 * b * self.d * (self.Kinv - self.P) - 0.5 * b ** 3 * (self.E @ self.E.T)
        return 0.5 * (W + W.T)


@dataclass
class GradGlobal:
    """Gradient of F for the shared parameters, log scale for positives."""

    Z: np.ndarray
    log_signal_variance: float
    log_ard_weights: np.ndarray
    log_noise_precision: float


@dataclass
class GradTerms:
    """Additive per-block gradient contributions (natural scale).

    ``means``/``variances`` hold the block's local-parameter gradients and
    concatenate (rather than add) across blocks taken in row order.
    """

    Z: np.ndarray
    d_sv: float
    d_ard: np.ndarray
    means: Optional[np.ndarray] = None
    variances: Optional[np.ndarray] = None

    def merge(self, other):
        def _cat(a, b):
            if a is None and b is None:
                return None
            if a is None:
                return b
            if b is None:
                return a
            return np.concatenate([a, b], axis=0)

        return GradTerms(
            Z=self.Z + other.Z,
            d_sv=self.d_sv + other.d_sv,
            d_ard=self.d_ard + other.d_ard,
            means=_cat(self.means, other.means),
            variances=_cat(self.variances, other.variances),
        )


@dataclass(frozen=True)
class BoundReport:
    """Assembled bound value, global gradient, and broadcast accumulators."""

    value: float
    grad_global: GradGlobal
    accum: StepAccum


@dataclass(frozen=True)
class BoundCore:
    """Coordinator-side intermediates shared by value and gradient assembly."""

    value: float
    accum: StepAccum
    K_reg: np.ndarray
    KinvD: np.ndarray
    trPD: float
    trKinvD: float
    trCE: float
    trEDE: float


def bound_core(totals, Z, params, n, d):
    """Assemble F and the broadcast accumulators from reduced totals.

    O(m^3); independent of n apart from scalar bookkeeping.
    """
    if totals.count != n:
        raise ValueError(f"totals cover {totals.count} points, expected {n}")
    Zm = Z.Z if isinstance(Z, InducingInputs) else np.asarray(Z, dtype=float)
    beta = params.noise_precision
    Kmm = kernel_matrix(Zm, Zm, params)
    fK, fS = _factorize(Kmm, totals.D, beta, params.signal_variance)
    Kinv = inv_from_chol(fK)
    P = inv_from_chol(fS)
    E = solve_chol(fS, totals.C)
    KinvD = solve_chol(fK, totals.D)
    trKinvD = float(np.trace(KinvD))
    trPD = float(np.sum(P * totals.D))
    trCE = float(np.sum(totals.C * E))
    trEDE = float(np.sum(E * (totals.D @ E)))
    F = (
        -0.5 * n * d * LOG_2PI
        + 0.5 * n * d * math.log(beta)
        + 0.5 * d * logdet_from_chol(fK)
        - 0.5 * d * logdet_from_chol(fS)
        - 0.5 * beta * totals.A
        - 0.5 * beta * d * totals.B
        + 0.5 * beta * d * trKinvD
        + 0.5 * beta ** 2 * trCE
        - totals.KL
    )
    accum = StepAccum(P=P, E=E, Kinv=Kinv, beta=beta, d=d)
    return BoundCore(
        value=float(F),
        accum=accum,
        K_reg=fK.matrix,
        KinvD=KinvD,
        trPD=trPD,
        trKinvD=trKinvD,
        trCE=trCE,
        trEDE=trEDE,
    )


def assemble_bound(totals, Z, params, n, d):
    """The bound F from reduced totals (see module docstring for the formula)."""
    return bound_core(totals, Z, params, n, d).value


def grad_terms(Y_block, latents_block, Z, params, accum):
    """One block's additive gradient contribution given broadcast state.

    Covers the channels that flow through the data statistics C and D; the
    block's own local-parameter gradients ride along in ``means`` and
    ``variances`` (KL term included, natural scale for variances).

    Returns
    -------
    GradTerms
    """
    Y = check_finite_2d(Y_block, "Y_block")
    Zm = Z.Z if isinstance(Z, InducingInputs) else np.asarray(Z, dtype=float)
    m, q = Zm.shape
    if Y.shape[0] == 0:
        none = None if latents_block.frozen else np.zeros((0, q))
        return GradTerms(
            Z=np.zeros((m, q)), d_sv=0.0, d_ard=np.zeros(q), means=none, variances=none
        )
    beta = accum.beta
    V = beta ** 2 * (Y @ accum.E.T)
    g1 = psi1_vjp(V, latents_block, Zm, params)
    g2 = psi2_vjp(accum.weight_D(), latents_block, Zm, params)
    means = variances = None
    if not latents_block.frozen:
        means = g1.means + g2.means - latents_block.means
        variances = (
            g1.variances
            + g2.variances
            - 0.5 * (1.0 - 1.0 / latents_block.variances)
        )
    return GradTerms(
        Z=g1.Z + g2.Z,
        d_sv=g1.signal_variance + g2.signal_variance,
        d_ard=g1.ard_weights + g2.ard_weights,
        means=means,
        variances=variances,
    )


def local_grads(Y_block, latents_block, Z, params, accum):
    """Worker-side gradients for the block's own latent parameters.

    Returns
    -------
    (d_means, d_log_variances) : pair of (n_k, q) ndarrays
        Gradient of F with respect to mu and log S for the block's rows.
    """
    if latents_block.frozen:
        raise ValueError("frozen posterior has no local parameters")
    t = grad_terms(Y_block, latents_block, Z, params, accum)
    return t.means, t.variances * latents_block.variances


def finalize_gradients(core, totals, terms, Z, params, n, d):
    """Combine per-block gradient terms with the totals-only channels.

    Adds the inducing-Gram channel, the psi0 channel, and the noise-precision
    gradient, then converts positive parameters to log scale.
    """
    Zm = Z.Z if isinstance(Z, InducingInputs) else np.asarray(Z, dtype=float)
    beta = params.noise_precision
    acc = core.accum
    # dF/dK~ with the data statistics held fixed
    WK = (
        0.5 * d * (acc.Kinv - acc.P)
        - 0.5 * beta * d * (core.KinvD @ acc.Kinv)
        - 0.5 * beta ** 2 * (acc.E @ acc.E.T)
    )
    WK = 0.5 * (WK + WK.T)
    gk = kmm_vjp(WK, Zm, params, core.K_reg)
    d_sv = terms.d_sv + gk.signal_variance - 0.5 * beta * d * n  # psi0 channel: B = n*sigma2
    d_ard = terms.d_ard + gk.ard_weights
    dZ = terms.Z + gk.Z
    d_beta = (
        0.5 * n * d / beta
        - 0.5 * d * core.trPD
        - 0.5 * totals.A
        - 0.5 * d * totals.B
        + 0.5 * d * core.trKinvD
        + beta * core.trCE
        - 0.5 * beta ** 2 * core.trEDE
    )
    grad = GradGlobal(
        Z=dZ,
        log_signal_variance=params.signal_variance * d_sv,
        log_ard_weights=params.ard_weights * d_ard,
        log_noise_precision=beta * d_beta,
    )
    return BoundReport(value=core.value, grad_global=grad, accum=acc)


def assemble_gradients(totals, blocks, Z, params, n, d):
    """Single-coordinator assembly of F and its global gradient.

    Parameters
    ----------
    totals : PartialSums
        Reduced over all blocks.
    blocks : sequence of (Y_block, latents_block)
        The same data the totals were computed from, in ascending row order.

    Returns
    -------
    BoundReport
    """
    core = bound_core(totals, Z, params, n, d)
    Zm = Z.Z if isinstance(Z, InducingInputs) else np.asarray(Z, dtype=float)
    m, q = Zm.shape
    merged = None
    for Y_block, latents_block in blocks:
        t = grad_terms(Y_block, latents_block, Z, params, core.accum)
        merged = t if merged is None else merged.merge(t)
    if merged is None:
        merged = GradTerms(Z=np.zeros((m, q)), d_sv=0.0, d_ard=np.zeros(q))
    return finalize_gradients(core, totals, merged, Z, params, n, d)
