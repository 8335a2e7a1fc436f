"""Scikit-learn style estimators wrapping the training and prediction API.

``SparseGPRegressor`` is a regressor with ``fit``/``predict``/``score``;
``BayesianGPLVM`` is a transformer whose latent space is learned by maximizing
the same variational bound with per-point latent posteriors.  Both follow
scikit-learn conventions: constructor arguments are stored verbatim,
``get_params``/``set_params``/``clone`` work, fitted attributes carry a
trailing underscore, and inputs are validated with scikit-learn helpers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import (
    _fit_test_latent,
    evaluate,
    new_gplvm,
    new_regression,
    predict,
    train,
)

__all__ = ["SparseGPRegressor", "BayesianGPLVM"]


class SparseGPRegressor(RegressorMixin, BaseEstimator):
    """Sparse Gaussian process regression on inducing points.

    Fitting maximizes the collapsed variational lower bound on the marginal
    likelihood over inducing inputs, kernel hyperparameters, and noise
    precision.  Multi-output targets share the kernel.

    Parameters
    ----------
    n_inducing : int
        Number of inducing inputs (the ``m`` in the O(n m^2) cost).
    optimizer : {"lbfgs", "scg"}
    backend : {"serial", "threads", "procs"}
        Execution backend for the per-datapoint partial sums.
    workers : int
        Partition count for the backend.
    max_evals : int
        Total objective-evaluation budget.
    evals_per_step : int
        Budget per optimizer restart-step inside training.
    seed : int
        Seed for inducing-point initialization.
    init_z : {"kmeans", "data"}
        Inducing initialization: k-means centers or the first data rows.
    """

    def __init__(
        self,
        n_inducing=10,
        optimizer="lbfgs",
        backend="serial",
        workers=1,
        max_evals=200,
        evals_per_step=25,
        seed=0,
        init_z="kmeans",
    ):
        self.n_inducing = n_inducing
        self.optimizer = optimizer
        self.backend = backend
        self.workers = workers
        self.max_evals = max_evals
        self.evals_per_step = evals_per_step
        self.seed = seed
        self.init_z = init_z

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = check_array(y, dtype=float, ensure_2d=False)
        self._single_output = y.ndim == 1
        Y = y[:, None] if self._single_output else y
        if Y.shape[0] != X.shape[0]:
            raise ValueError("X and y row counts differ")
        state = new_regression(
            X, Y, self.n_inducing, seed=self.seed, init_z=self.init_z
        )
        state, trace = train(
            state,
            backend=self.backend,
            workers=self.workers,
            method=self.optimizer,
            max_evals=self.max_evals,
            evals_per_step=self.evals_per_step,
        )
        self.state_ = state
        self.trace_ = trace
        self.bound_ = evaluate(state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False, include_noise=False):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        pred = predict(self.state_, X, include_noise=include_noise)
        mean, var = pred.mean, pred.variance
        if self._single_output:
            mean, var = mean[:, 0], var[:, 0]
        if return_std:
            return mean, np.sqrt(var)
        return mean

    @property
    def inducing_points_(self):
        check_is_fitted(self, "state_")
        return self.state_.global_params.Z.Z

    @property
    def ard_weights_(self):
        check_is_fitted(self, "state_")
        return self.state_.global_params.kernel.ard_weights

    @property
    def noise_variance_(self):
        check_is_fitted(self, "state_")
        return 1.0 / self.state_.global_params.kernel.noise_precision


class BayesianGPLVM(TransformerMixin, BaseEstimator):
    """Latent variable model: GP regression with inferred Gaussian inputs.

    Fitting learns per-point latent posteriors q(x_i) = N(mu_i, diag(S_i))
    jointly with the shared parameters.  ``transform`` embeds new rows by
    optimizing a fresh latent posterior per row against the trained model;
    ``fit_transform`` returns the training rows' posterior means directly.

    Parameters
    ----------
    n_components : int
        Latent dimensionality q. Irrelevant directions are suppressed by the
        learned per-dimension kernel weights (``ard_weights_``).
    n_inducing, optimizer, backend, workers, max_evals, evals_per_step, seed :
        As in :class:`SparseGPRegressor`.
    init_variance : float
        Initial per-point latent variance.
    transform_max_evals : int
        Objective-evaluation budget per row in ``transform``.
    """

    def __init__(
        self,
        n_components=2,
        n_inducing=10,
        optimizer="lbfgs",
        backend="serial",
        workers=1,
        max_evals=200,
        evals_per_step=25,
        seed=0,
        init_variance=0.1,
        transform_max_evals=150,
    ):
        self.n_components = n_components
        self.n_inducing = n_inducing
        self.optimizer = optimizer
        self.backend = backend
        self.workers = workers
        self.max_evals = max_evals
        self.evals_per_step = evals_per_step
        self.seed = seed
        self.init_variance = init_variance
        self.transform_max_evals = transform_max_evals

    def fit(self, X, y=None):
        """Learn the latent space of the observation matrix ``X`` (n x d)."""
        Y = check_array(X, dtype=float)
        state = new_gplvm(
            Y,
            q=self.n_components,
            m=self.n_inducing,
            seed=self.seed,
            init_variance=self.init_variance,
        )
        state, trace = train(
            state,
            backend=self.backend,
            workers=self.workers,
            method=self.optimizer,
            max_evals=self.max_evals,
            evals_per_step=self.evals_per_step,
        )
        self.state_ = state
        self.trace_ = trace
        self.bound_ = evaluate(state)
        self.n_features_in_ = Y.shape[1]
        return self

    def fit_transform(self, X, y=None):
        """Fit, then return the training rows' latent posterior means."""
        self.fit(X, y)
        return self.state_.latents.means.copy()

    def transform(self, X):
        """Latent posterior means for new observation rows."""
        check_is_fitted(self, "state_")
        Y = check_array(X, dtype=float)
        if Y.shape[1] != self.state_.d:
            raise ValueError(
                f"X has {Y.shape[1]} columns, model was fit with {self.state_.d}"
            )
        out = np.empty((Y.shape[0], self.n_components))
        for i in range(Y.shape[0]):
            _, _, x_opt, _ = _fit_test_latent(
                self.state_, Y[i : i + 1], max_evals=self.transform_max_evals
            )
            out[i] = x_opt
        return out

    def inverse_transform(self, X):
        """Predictive output means at the given latent coordinates."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        return predict(self.state_, X).mean

    @property
    def latent_means_(self):
        check_is_fitted(self, "state_")
        return self.state_.latents.means

    @property
    def latent_variances_(self):
        check_is_fitted(self, "state_")
        return self.state_.latents.variances

    @property
    def ard_weights_(self):
        check_is_fitted(self, "state_")
        return self.state_.global_params.kernel.ard_weights
