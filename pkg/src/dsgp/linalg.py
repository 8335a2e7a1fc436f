"""Dense linear algebra with a fixed diagonal-regularisation policy.

All factorizations of kernel Gram matrices go through :func:`chol_with_jitter`
so that every caller applies the same rule: add ``rel_jitter * scale`` to the
diagonal before factorizing, and on failure escalate the jitter tenfold up to
``max_rel_jitter * scale`` before giving up.  Keeping the regulariser
proportional to the signal variance makes the augmented matrix the Gram matrix
of the same kernel plus independent noise on the inducing points, so
downstream quantities remain well defined rather than silently clipped.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

__all__ = [
    "CholFactor",
    "chol_with_jitter",
    "solve_chol",
    "inv_from_chol",
    "logdet_from_chol",
    "PosDefError",
]

REL_JITTER = 1e-6
MAX_REL_JITTER = 1e-2


class PosDefError(np.linalg.LinAlgError):
    """Matrix could not be factorized even at the maximum allowed jitter."""


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor of ``matrix + jitter * I``.

    Attributes
    ----------
    L : ndarray, shape (m, m)
        Lower-triangular factor.
    jitter : float
        Absolute value that was added to the diagonal.
    matrix : ndarray, shape (m, m)
        The regularised matrix ``L @ L.T`` (input plus jitter).
    """

    L: np.ndarray
    jitter: float
    matrix: np.ndarray


def chol_with_jitter(mat, scale=1.0, rel_jitter=REL_JITTER, max_rel_jitter=MAX_REL_JITTER):
    """Cholesky-factorize ``mat + j*I``, escalating ``j`` tenfold on failure.

    Parameters
    ----------
    mat : ndarray, shape (m, m)
        Symmetric matrix to factorize.
    scale : float
        Reference scale for the jitter (the kernel signal variance for Gram
        matrices); the jitter added is ``rel_jitter * scale``.
    rel_jitter, max_rel_jitter : float
        Starting and maximum jitter relative to ``scale``.

    Returns
    -------
    CholFactor

    Raises
    ------
    PosDefError
        If the factorization still fails at ``max_rel_jitter * scale``.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains NaN or Inf")

    eye = np.eye(mat.shape[0])
    rel = rel_jitter
    while True:
        jitter = rel * scale
        reg = mat + jitter * eye
        try:
            L = sla.cholesky(reg, lower=True, check_finite=False)
            return CholFactor(L=L, jitter=jitter, matrix=reg)
        except np.linalg.LinAlgError:
            pass
        except sla.LinAlgError:
            pass
        if rel >= max_rel_jitter:
            raise PosDefError(
                f"Cholesky failed with jitter up to {max_rel_jitter * scale:.3e} "
                f"(scale {scale:.3e})"
            )
        rel *= 10.0


def solve_chol(factor, b):
    """Solve ``factor.matrix @ x = b`` from the Cholesky factor."""
    return sla.cho_solve((factor.L, True), b, check_finite=False)


def inv_from_chol(factor):
    """Explicit inverse of the factorized matrix (symmetrised)."""
    inv = sla.cho_solve((factor.L, True), np.eye(factor.L.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def logdet_from_chol(factor):
    """log-determinant of the factorized (regularised) matrix."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.L))))
