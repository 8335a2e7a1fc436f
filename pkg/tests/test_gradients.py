"""Central finite differences as the oracle for every gradient block.

The bound's gradient is assembled from hand-derived pieces (kernel
expectation adjoints, Gram-matrix channel, noise-precision channel); each
parameter group — Z, log signal variance, log ARD weights, log noise
precision, latent means, log latent variances — is compared against central
differences on the log-scale parameterization with h = 1e-5.
"""

import numpy as np
import pytest

from dsgp.bound import assemble_bound, assemble_gradients, local_grads, local_terms
from dsgp.kernel import InducingInputs, KernelParams, LatentPosterior
from dsgp.optim import fd_gradient

REL_TOL = 1e-4


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    floor = 0.01 * np.max(np.abs(numeric)) + 1e-10
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def make_instance(seed, n=12, m=4, q=2, d=2, frozen=False):
    rng = np.random.default_rng(seed)
    params = KernelParams(
        signal_variance=float(rng.uniform(0.8, 1.6)),
        ard_weights=rng.uniform(0.4, 1.2, q),
        noise_precision=float(rng.uniform(1.5, 3.0)),
    )
    means = rng.normal(size=(n, q))
    if frozen:
        latents = LatentPosterior.point_mass(means)
    else:
        latents = LatentPosterior(means=means, variances=rng.uniform(0.1, 0.5, (n, q)))
    Y = rng.normal(size=(n, d))
    Z = InducingInputs(rng.normal(size=(m, q)))
    return params, Y, latents, Z


def pack(Z, params, latents):
    parts = [
        Z.Z.ravel(),
        [np.log(params.signal_variance)],
        np.log(params.ard_weights),
        [np.log(params.noise_precision)],
    ]
    if not latents.frozen:
        parts += [latents.means.ravel(), np.log(latents.variances).ravel()]
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def unpack(theta, m, q, n, d, frozen, means_frozen=None):
    i = 0
    Z = InducingInputs(theta[i : i + m * q].reshape(m, q))
    i += m * q
    sv = float(np.exp(theta[i]))
    i += 1
    ard = np.exp(theta[i : i + q])
    i += q
    beta = float(np.exp(theta[i]))
    i += 1
    params = KernelParams(sv, ard, beta)
    if frozen:
        latents = LatentPosterior.point_mass(means_frozen)
    else:
        mu = theta[i : i + n * q].reshape(n, q)
        i += n * q
        S = np.exp(theta[i : i + n * q]).reshape(n, q)
        latents = LatentPosterior(means=mu, variances=S)
    return Z, params, latents


def bound_of_theta(theta, Y, m, q, frozen, means_frozen=None):
    n, d = Y.shape
    Z, params, latents = unpack(theta, m, q, n, d, frozen, means_frozen)
    totals = local_terms(Y, latents, Z, params)
    return assemble_bound(totals, Z, params, n, d)


def analytic_gradient(Y, latents, Z, params):
    n, d = Y.shape
    totals = local_terms(Y, latents, Z, params)
    report = assemble_gradients(totals, [(Y, latents)], Z, params, n, d)
    g = report.grad_global
    parts = [
        g.Z.ravel(),
        [g.log_signal_variance],
        g.log_ard_weights,
        [g.log_noise_precision],
    ]
    if not latents.frozen:
        dmu, dlogS = local_grads(Y, latents, Z, params, report.accum)
        parts += [dmu.ravel(), dlogS.ravel()]
    return np.concatenate([np.asarray(p, dtype=float) for p in parts]), report


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_latent_mode_all_groups(seed):
    params, Y, latents, Z = make_instance(seed)
    n, d = Y.shape
    m, q = Z.m, Z.q
    theta0 = pack(Z, params, latents)
    analytic, _ = analytic_gradient(Y, latents, Z, params)
    numeric = fd_gradient(lambda t: bound_of_theta(t, Y, m, q, False), theta0, h=1e-5)

    blocks = {
        "Z": (0, m * q),
        "log_sv": (m * q, m * q + 1),
        "log_ard": (m * q + 1, m * q + 1 + q),
        "log_beta": (m * q + 1 + q, m * q + 2 + q),
        "means": (m * q + 2 + q, m * q + 2 + q + n * q),
        "log_vars": (m * q + 2 + q + n * q, m * q + 2 + q + 2 * n * q),
    }
    for name, (a, b) in blocks.items():
        err = rel_err(analytic[a:b], numeric[a:b])
        assert err < REL_TOL, f"group {name}: rel err {err:.2e}"


@pytest.mark.parametrize("seed", [3, 4])
def test_frozen_mode_global_groups(seed):
    params, Y, latents, Z = make_instance(seed, n=15, m=5, frozen=True)
    m, q = Z.m, Z.q
    theta0 = pack(Z, params, latents)
    analytic, report = analytic_gradient(Y, latents, Z, params)
    numeric = fd_gradient(
        lambda t: bound_of_theta(t, Y, m, q, True, latents.means), theta0, h=1e-5
    )
    assert rel_err(analytic, numeric) < REL_TOL
    # frozen posterior exposes no local-parameter gradients
    from dsgp.bound import grad_terms

    terms = grad_terms(Y, latents, Z, params, report.accum)
    assert terms.means is None and terms.variances is None
    with pytest.raises(ValueError):
        local_grads(Y, latents, Z, params, report.accum)


def test_mirrored_data_gives_zero_inducing_gradient():
    # two clusters mirrored about the origin, single inducing input at 0:
    # the bound is even in Z, so its gradient there vanishes.
    X = np.array([[1.0], [-1.0], [0.4], [-0.4]])
    Y = np.array([[0.8], [0.8], [0.2], [0.2]])
    params = KernelParams(1.0, np.array([0.9]), 2.0)
    latents = LatentPosterior.point_mass(X)
    Z = InducingInputs(np.array([[0.0]]))
    totals = local_terms(Y, latents, Z, params)
    report = assemble_gradients(totals, [(Y, latents)], Z, params, 4, 1)
    assert abs(report.grad_global.Z[0, 0]) < 1e-10

    theta0 = pack(Z, params, latents)
    numeric = fd_gradient(lambda t: bound_of_theta(t, Y, 1, 1, True, X), theta0, h=1e-5)
    assert abs(numeric[0]) < 1e-7


def test_gradient_dimensions_match_parameter_layout():
    params, Y, latents, Z = make_instance(7, n=9, m=3, q=2, d=3)
    analytic, report = analytic_gradient(Y, latents, Z, params)
    expected = Z.m * Z.q + 1 + Z.q + 1 + 2 * latents.n * latents.q
    assert analytic.size == expected
    assert report.grad_global.Z.shape == Z.Z.shape
    assert report.grad_global.log_ard_weights.shape == params.ard_weights.shape


def test_accumulators_have_broadcast_shapes():
    params, Y, latents, Z = make_instance(8, n=10, m=4, d=2)
    totals = local_terms(Y, latents, Z, params)
    report = assemble_gradients(totals, [(Y, latents)], Z, params, 10, 2)
    acc = report.accum
    assert acc.P.shape == (4, 4)
    assert acc.Kinv.shape == (4, 4)
    assert acc.E.shape == (4, 2)
    assert acc.beta == params.noise_precision
    assert acc.d == 2
