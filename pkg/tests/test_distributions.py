import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtivae import diffcore as dc
from rtivae import distributions as D
from rtivae.diffcore import Tensor


def gauss(mean, lv):
    return D.DiagonalGaussian(Tensor(mean), Tensor(lv))


def random_mixture(rng, k=3, d=2):
    w = rng.dirichlet(np.ones(k))
    return D.MixturePrior(Tensor(rng.normal(0, 2, (k, d))), Tensor(rng.normal(0, 0.5, (k, d))), w)


# ---------------------------------------------------------------- reparameterize

def test_reparameterize_zero_noise_returns_mean():
    q = gauss([0.3, -1.0], [0.5, -2.0])
    assert np.array_equal(D.reparameterize(q, np.zeros(2)).data, q.mean.data)


def test_reparameterize_unit_sigma():
    assert np.array_equal(D.reparameterize(gauss([0.0, 0.0], [0.0, 0.0]), [1.0, -1.0]).data,
                          [1.0, -1.0])


def test_reparameterize_moments_monte_carlo():
    rng = np.random.default_rng(0)
    q = gauss([1.5, -0.7], [0.4, -1.0])
    n = 100_000
    z = D.reparameterize(D.DiagonalGaussian(Tensor(np.tile(q.mean.data, (n, 1))),
                                            Tensor(np.tile(q.log_variance.data, (n, 1)))),
                         rng.standard_normal((n, 2))).data
    assert np.allclose(z.mean(0), q.mean.data, rtol=0.02)
    assert np.allclose(z.var(0), np.exp(q.log_variance.data), rtol=0.02)


def test_reparameterize_mean_gradient_is_identity():
    noise = np.array([0.2, -0.4, 1.0])
    lv = Tensor([0.1, 0.2, -0.3])
    w = np.array([1.0, -2.0, 0.5])
    m = Tensor([0.0, 1.0, 2.0], requires_grad=True)
    g = dc.backward((D.reparameterize(D.DiagonalGaussian(m, lv), noise) * w).sum(), [m])[m]
    assert np.array_equal(g.data, w)
    rep = dc.grad_check(lambda x: (D.reparameterize(D.DiagonalGaussian(x, lv), noise) * w).sum(),
                        m.data)
    assert rep.passed


def test_reparameterize_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        D.reparameterize(gauss([0.0, 0.0], [0.0, 0.0]), np.zeros(3))


def test_floor_clamps_log_variance():
    q = D.DiagonalGaussian.with_floor(Tensor([0.0, 0.0]), Tensor([-9.0, -1.0]), -4.0)
    assert np.array_equal(q.log_variance.data, [-4.0, -1.0])


# ---------------------------------------------------------------- Gaussian KL

def test_kl_identical_is_zero():
    q = gauss([0.3, -0.2, 1.0], [0.1, -1.0, 0.5])
    assert abs(float(D.kl_diag_gaussians(q, q).data)) < 1e-12


def test_kl_unit_shift_is_half():
    assert float(D.kl_diag_gaussians(gauss([1.0], [0.0]), gauss([0.0], [0.0])).data) == \
        pytest.approx(0.5, abs=1e-15)


def _mc_kl(q, p, rng, n=100_000):
    mq, sq = q.mean.data, np.exp(0.5 * q.log_variance.data)
    mp, sp = p.mean.data, np.exp(0.5 * p.log_variance.data)
    z = mq + sq * rng.standard_normal((n, len(mq)))
    log_q = -0.5 * (((z - mq) / sq) ** 2 + 2 * np.log(sq) + math.log(2 * math.pi)).sum(1)
    log_p = -0.5 * (((z - mp) / sp) ** 2 + 2 * np.log(sp) + math.log(2 * math.pi)).sum(1)
    return float(np.mean(log_q - log_p))


def test_kl_matches_monte_carlo_3d():
    rng = np.random.default_rng(1)
    q = gauss(rng.normal(size=3), rng.normal(0, 0.5, 3))
    p = gauss(rng.normal(size=3), rng.normal(0, 0.5, 3))
    exact = float(D.kl_diag_gaussians(q, p).data)
    assert _mc_kl(q, p, rng) == pytest.approx(exact, rel=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_kl_non_negative(a, b):
    q, p = gauss(a[:2], a[2:]), gauss(b[:2], b[2:])
    assert float(D.kl_diag_gaussians(q, p).data) >= -1e-12


def test_kl_batched_shape():
    q = gauss(np.zeros((5, 3)), np.zeros((5, 3)))
    assert D.kl_diag_gaussians(q, gauss(np.ones(3), np.zeros(3))).shape == (5,)


# ---------------------------------------------------------------- categorical KL

def test_kl_categorical_uniform_zero():
    q = D.CategoricalPosterior(Tensor(np.full(3, 1 / 3)))
    assert abs(float(D.kl_categorical(q, np.full(3, 1 / 3)).data)) < 1e-12


def test_kl_categorical_one_hot_is_log_k():
    q = D.CategoricalPosterior(Tensor([1.0, 0.0, 0.0]))
    assert float(D.kl_categorical(q, np.full(3, 1 / 3)).data) == pytest.approx(math.log(3), abs=1e-6)


def test_kl_categorical_against_uniform_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.dirichlet(np.ones(4))
        got = float(D.kl_categorical(D.CategoricalPosterior(Tensor(q)), np.full(4, 0.25)).data)
        assert got == pytest.approx(float(np.sum(q * np.log(q))) + math.log(4), abs=1e-12)


# ---------------------------------------------------------------- mixtures

def test_responsibilities_symmetric_point():
    prior = D.MixturePrior.uniform([[0.0], [4.0]], [[0.0], [0.0]])
    r = D.mixture_responsibilities(prior, Tensor([2.0])).probabilities.data
    assert np.allclose(r, [0.5, 0.5], atol=1e-15)


def test_responsibilities_dominant_component():
    prior = D.MixturePrior.uniform([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0]], np.zeros((3, 2)))
    r = D.mixture_responsibilities(prior, Tensor([10.0, 10.0])).probabilities.data
    assert r[1] > 0.999


def test_responsibilities_match_extended_precision_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        prior = random_mixture(rng)
        z = rng.normal(0, 2, 2)
        mu = prior.means.data.astype(np.longdouble)
        var = np.exp(prior.log_variances.data.astype(np.longdouble))
        dens = np.prod(np.exp(-0.5 * (z - mu) ** 2 / var) / np.sqrt(2 * np.pi * var), axis=1)
        dens = dens * prior.weights
        oracle = dens / dens.sum()
        got = D.mixture_responsibilities(prior, Tensor(z)).probabilities.data
        assert np.allclose(got, oracle.astype(np.float64), atol=1e-9)


def test_responsibilities_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(4)
    prior = random_mixture(rng, k=4, d=3)
    z = Tensor(rng.normal(size=(10, 3)))
    r = D.mixture_responsibilities(prior, z).probabilities.data
    assert np.allclose(r.sum(-1), 1.0, atol=1e-9)
    logd = D.component_log_densities(prior, z).data + np.log(prior.weights)
    shifted = dc.softmax(Tensor(logd + 123.0)).data
    assert np.allclose(shifted, r, atol=1e-12)


def test_expected_kl_one_hot_equals_component():
    rng = np.random.default_rng(5)
    prior = random_mixture(rng)
    q = gauss(rng.normal(size=2), rng.normal(size=2))
    got = D.expected_mixture_kl(q, D.CategoricalPosterior(Tensor([0.0, 1.0, 0.0])), prior)
    want = D.kl_diag_gaussians(q, prior.component(1))
    assert float(got.data) == pytest.approx(float(want.data), abs=1e-12)


def test_expected_kl_identity_zero():
    comp = ([0.5, -0.5], [-1.0, 0.3])
    prior = D.MixturePrior.uniform([comp[0]] * 3, [comp[1]] * 3)
    q_yl = D.CategoricalPosterior(Tensor([0.2, 0.5, 0.3]))
    assert abs(float(D.expected_mixture_kl(gauss(*comp), q_yl, prior).data)) < 1e-12


def test_expected_kl_loop_oracle():
    rng = np.random.default_rng(6)
    prior = random_mixture(rng)
    q = gauss(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    w = rng.dirichlet(np.ones(3), size=4)
    got = D.expected_mixture_kl(q, D.CategoricalPosterior(Tensor(w)), prior).data
    for b in range(4):
        qb = gauss(q.mean.data[b], q.log_variance.data[b])
        want = sum(w[b, k] * float(D.kl_diag_gaussians(qb, prior.component(k)).data)
                   for k in range(3))
        assert got[b] == pytest.approx(want, abs=1e-12)


def test_marginal_of_preset_mixture():
    prior = D.MixturePrior.uniform(np.eye(3), np.full((3, 3), -4.0))
    m = D.marginal_prior_stats(prior)
    assert np.allclose(m.mean.data, [1 / 3] * 3, atol=1e-15)


def test_marginal_single_component():
    prior = D.MixturePrior.uniform([[1.0, 2.0]], [[0.5, -0.5]])
    m = D.marginal_prior_stats(prior)
    assert np.array_equal(m.mean.data, [1.0, 2.0])
    assert np.array_equal(m.log_variance.data, [0.5, -0.5])


def test_marginal_variance_monte_carlo():
    rng = np.random.default_rng(7)
    prior = random_mixture(rng, k=3, d=2)
    n = 1_000_000
    comp = rng.choice(3, size=n, p=prior.weights)
    draws = prior.means.data[comp] + np.exp(0.5 * prior.log_variances.data[comp]) * \
        rng.standard_normal((n, 2))
    m = D.marginal_prior_stats(prior)
    assert np.allclose(np.exp(m.log_variance.data), draws.var(0), rtol=0.02)


def test_mixture_validation():
    with pytest.raises(ValueError):
        D.MixturePrior(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1))), np.array([0.7, 0.7]))
    with pytest.raises(dc.ShapeError):
        D.MixturePrior(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))), np.array([0.5, 0.5]))
