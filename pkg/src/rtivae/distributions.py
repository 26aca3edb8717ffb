"""Diagonal Gaussians, categorical posteriors and the Gaussian-mixture prior.

All functions accept batched parameters: the last axis is the latent
dimension, leading axes are batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise dc.ShapeError(
                f"mean {self.mean.shape} and log_variance {self.log_variance.shape} differ")

    @classmethod
    def with_floor(cls, mean, log_variance, floor: float | None) -> "DiagonalGaussian":
        """Build a Gaussian whose log-variance is clamped at ``floor`` (zero gradient below)."""
        lv = dc.as_tensor(log_variance)
        if floor is not None:
            lv = dc.clamp_min(lv, floor)
        return cls(dc.as_tensor(mean), lv)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance.data)


@dataclass(frozen=True)
class CategoricalPosterior:
    probabilities: Tensor

    @property
    def k(self) -> int:
        return self.probabilities.shape[-1]


@dataclass(frozen=True)
class MixturePrior:
    means: Tensor          # (K, d)
    log_variances: Tensor  # (K, d)
    weights: np.ndarray    # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) < 1:
            raise ValueError("mixture needs at least one component")
        if self.means.shape != (len(w), self.means.shape[-1]) or \
                self.log_variances.shape != self.means.shape:
            raise dc.ShapeError(f"component parameters {self.means.shape} / "
                                f"{self.log_variances.shape} do not match {len(w)} weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must be a probability vector, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, means, log_variances) -> "MixturePrior":
        means = dc.as_tensor(means)
        k = means.shape[0]
        return cls(means, dc.as_tensor(log_variances), np.full(k, 1.0 / k))

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def component(self, k: int) -> DiagonalGaussian:
        return DiagonalGaussian(self.means[k], self.log_variances[k])


def reparameterize(q: DiagonalGaussian, noise) -> Tensor:
    """mean + exp(log_variance / 2) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mean.shape:
        raise dc.ShapeError(f"noise shape {noise.shape} does not match {q.mean.shape}")
    return q.mean + dc.exp(q.log_variance * 0.5) * noise


def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) summed over the last axis, in closed form."""
    if q.dim != p.dim:
        raise dc.ShapeError(f"KL between dims {q.dim} and {p.dim}")
    var_ratio = dc.exp(q.log_variance - p.log_variance)
    mahal = dc.square(q.mean - p.mean) * dc.exp(-p.log_variance)
    terms = (p.log_variance - q.log_variance) * 0.5 + (var_ratio + mahal) * 0.5 - 0.5
    return terms.sum(axis=-1)


def _clamped_log(p) -> Tensor:
    return dc.log(dc.clamp_prob(p))


def kl_categorical(q: CategoricalPosterior, p) -> Tensor:
    """sum_k q_k log(q_k / p_k) with 0 log 0 = 0 (probabilities clamped before log)."""
    probs = q.probabilities
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != q.k:
        raise dc.ShapeError(f"categorical lengths {q.k} and {p.shape[-1]} differ")
    log_p = np.log(np.clip(p, dc.PROB_CLAMP, 1.0 - dc.PROB_CLAMP))
    return (probs * (_clamped_log(probs) - log_p)).sum(axis=-1)


def component_log_densities(prior: MixturePrior, z) -> Tensor:
    """log N(z; mu_k, diag sigma_k^2) for every component; shape (..., K)."""
    z = dc.as_tensor(z)
    if z.shape[-1] != prior.dim:
        raise dc.ShapeError(f"z dim {z.shape[-1]} vs prior dim {prior.dim}")
    zk = dc.reshape(z, z.shape[:-1] + (1, prior.dim))
    sq = dc.square(zk - prior.means) * dc.exp(-prior.log_variances)
    return ((sq + prior.log_variances + LOG_2PI) * -0.5).sum(axis=-1)


def mixture_responsibilities(prior: MixturePrior, z) -> CategoricalPosterior:
    logits = component_log_densities(prior, z) + np.log(prior.weights)
    return CategoricalPosterior(dc.softmax(logits, axis=-1))


def expected_mixture_kl(q_zl: DiagonalGaussian, q_yl: CategoricalPosterior,
                        prior: MixturePrior) -> Tensor:
    """sum_k q(y_l = k) KL(q(z_l) || p(z_l | y_l = k))."""
    if q_yl.k != prior.k:
        raise dc.ShapeError(f"{q_yl.k} responsibilities for {prior.k} components")
    lead = q_zl.mean.shape[:-1]
    expanded = DiagonalGaussian(dc.reshape(q_zl.mean, lead + (1, prior.dim)),
                                dc.reshape(q_zl.log_variance, lead + (1, prior.dim)))
    kls = kl_diag_gaussians(expanded, DiagonalGaussian(prior.means, prior.log_variances))
    return (q_yl.probabilities * kls).sum(axis=-1)


def marginal_prior_stats(prior: MixturePrior) -> DiagonalGaussian:
    """Moment-matched Gaussian of the mixture marginal (constant, no gradient)."""
    if prior.k == 1:
        return DiagonalGaussian(Tensor(prior.means.data[0]), Tensor(prior.log_variances.data[0]))
    w = prior.weights[:, None]
    mu = prior.means.data
    var = np.exp(prior.log_variances.data)
    mean = (w * mu).sum(axis=0)
    second = (w * (var + mu ** 2)).sum(axis=0)
    variance = np.maximum(second - mean ** 2, np.finfo(float).tiny)
    return DiagonalGaussian(Tensor(mean), Tensor(np.log(variance)))
