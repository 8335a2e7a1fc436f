"""Tests for the scikit-learn style estimator wrappers."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dsgp.estimators import BayesianGPLVM, SparseGPRegressor


@pytest.fixture(scope="module")
def reg_data():
    rng = np.random.default_rng(5)
    X = rng.uniform(-3.0, 3.0, (150, 1))
    f = np.sin(1.5 * X[:, 0])
    y = f + rng.normal(0.0, 0.05, 150)
    return X, y, f


@pytest.fixture(scope="module")
def fitted_regressor(reg_data):
    X, y, _ = reg_data
    return SparseGPRegressor(n_inducing=10, max_evals=80, seed=0).fit(X, y)


class TestSparseGPRegressor:
    def test_params_round_trip_and_clone(self):
        est = SparseGPRegressor(n_inducing=7, optimizer="scg", seed=3)
        params = est.get_params()
        assert params["n_inducing"] == 7
        assert params["optimizer"] == "scg"
        twin = clone(est)
        assert twin.get_params() == params
        est.set_params(n_inducing=9)
        assert est.get_params()["n_inducing"] == 9

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            SparseGPRegressor().predict(np.zeros((2, 1)))

    def test_fit_predict_recovers_function(self, reg_data, fitted_regressor):
        X, y, f = reg_data
        pred = fitted_regressor.predict(X)
        assert pred.shape == (150,)  # 1-D in, 1-D out
        assert np.sqrt(np.mean((pred - f) ** 2)) < 0.1
        assert fitted_regressor.score(X, y) > 0.9

    def test_return_std_and_noise(self, reg_data, fitted_regressor):
        X, _, _ = reg_data
        mean, std = fitted_regressor.predict(X[:10], return_std=True)
        assert mean.shape == std.shape == (10,)
        assert np.all(std >= 0.0)
        _, std_noisy = fitted_regressor.predict(
            X[:10], return_std=True, include_noise=True
        )
        assert np.all(std_noisy > std)

    def test_fitted_attributes(self, reg_data, fitted_regressor):
        assert fitted_regressor.inducing_points_.shape == (10, 1)
        assert fitted_regressor.ard_weights_.shape == (1,)
        assert 0.0 < fitted_regressor.noise_variance_ < 1.0
        assert fitted_regressor.n_features_in_ == 1
        assert np.isfinite(fitted_regressor.bound_)

    def test_multi_output_shape(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-2, 2, (60, 2))
        Y = np.column_stack([np.sin(X[:, 0]), np.cos(X[:, 1])])
        est = SparseGPRegressor(n_inducing=8, max_evals=30).fit(X, Y)
        pred = est.predict(X[:5])
        assert pred.shape == (5, 2)

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            SparseGPRegressor().fit(np.zeros((4, 1)), np.zeros(5))


@pytest.fixture(scope="module")
def lvm_data():
    rng = np.random.default_rng(9)
    latents = rng.standard_normal((80, 2))
    W = rng.standard_normal((2, 5))
    Y = latents @ W + rng.normal(0.0, 0.05, (80, 5))
    return Y


@pytest.fixture(scope="module")
def fitted_lvm(lvm_data):
    return BayesianGPLVM(n_components=2, n_inducing=10, max_evals=80, seed=0).fit(
        lvm_data
    )


class TestBayesianGPLVM:
    def test_params_and_clone(self):
        est = BayesianGPLVM(n_components=3, n_inducing=6)
        twin = clone(est)
        assert twin.get_params()["n_components"] == 3
        assert twin.get_params()["n_inducing"] == 6

    def test_transform_before_fit_raises(self, lvm_data):
        with pytest.raises(NotFittedError):
            BayesianGPLVM().transform(lvm_data)

    def test_fit_transform_shape(self, lvm_data):
        est = BayesianGPLVM(n_components=2, n_inducing=8, max_evals=40, seed=0)
        Z = est.fit_transform(lvm_data)
        assert Z.shape == (80, 2)
        assert np.array_equal(Z, est.latent_means_)

    def test_inverse_transform_round_trip(self, lvm_data, fitted_lvm):
        Z = fitted_lvm.latent_means_
        recon = fitted_lvm.inverse_transform(Z)
        assert recon.shape == lvm_data.shape
        rmse = np.sqrt(np.mean((recon - lvm_data) ** 2))
        assert rmse < 0.15  # linear rank-2 data reconstructs near noise level

    def test_transform_new_rows(self, lvm_data, fitted_lvm):
        new = lvm_data[:3]
        Z = fitted_lvm.transform(new)
        assert Z.shape == (3, 2)
        recon = fitted_lvm.inverse_transform(Z)
        assert np.sqrt(np.mean((recon - new) ** 2)) < 0.2

    def test_transform_wrong_width_raises(self, fitted_lvm):
        with pytest.raises(ValueError):
            fitted_lvm.transform(np.zeros((2, 3)))

    def test_fitted_attributes(self, fitted_lvm):
        assert fitted_lvm.latent_variances_.shape == (80, 2)
        assert np.all(fitted_lvm.latent_variances_ > 0.0)
        assert fitted_lvm.ard_weights_.shape == (2,)
        assert fitted_lvm.n_features_in_ == 5
