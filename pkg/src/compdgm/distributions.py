"""Observation log-likelihoods, Gaussian KL terms and reparameterized sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .numerics import Rng

LOGVAR_MIN, LOGVAR_MAX = -60.0, 20.0
RATE_FLOOR = 1e-8
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str  # gaussian | poisson | nb | bernoulli
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson", "nb", "bernoulli"):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if self.sigma2 <= 0:
            raise ValueError("gaussian observation variance must be positive")

    @property
    def is_count(self) -> bool:
        return self.kind in ("poisson", "nb")


@dataclass
class DiagGaussian:
    mean: ad.Tensor
    logvar: ad.Tensor


def _check_counts(x: np.ndarray) -> None:
    if np.any(x < 0) or np.any(x != np.floor(x)):
        raise ad.DomainError("count likelihood needs non-negative integer observations")


def log_likelihood(spec: LikelihoodSpec, x, mean: ad.Tensor, theta: ad.Tensor | None = None) -> ad.Tensor:
    """Per-sample log-likelihood (summed over features), shape ``(batch,)``.

    ``mean`` is the Gaussian mean, Poisson/NB rate or Bernoulli probability.
    ``theta`` is the NB inverse dispersion (broadcastable to ``mean``).
    """
    x = np.asarray(x, float)
    mean = ad.tensor(mean)
    if spec.kind == "gaussian":
        r = ad.sub(x, mean)
        ll = ad.square(r) * (-0.5 / spec.sigma2) - 0.5 * (_LOG_2PI + np.log(spec.sigma2))
        return ad.sum(ll, axis=1)
    if spec.kind == "poisson":
        _check_counts(x)
        ll = ad.mul(x, ad.log(mean)) - mean - _lgamma1(x)
        return ad.sum(ll, axis=1)
    if spec.kind == "nb":
        _check_counts(x)
        if theta is None:
            raise ValueError("negative binomial needs theta")
        theta = ad.tensor(theta)
        if np.any(theta.data <= 0):
            raise ad.DomainError("nb: theta must be positive")
        log_tm = ad.log(theta + mean)
        ll = (
            ad.lgamma(ad.add(x, theta))
            - ad.lgamma(theta)
            - _lgamma1(x)
            + theta * (ad.log(theta) - log_tm)
            + ad.mul(x, ad.log(mean) - log_tm)
        )
        return ad.sum(ll, axis=1)
    # bernoulli
    if np.any((x != 0) & (x != 1)):
        raise ad.DomainError("bernoulli needs binary observations")
    ll = ad.mul(x, ad.log(mean)) + ad.mul(1.0 - x, ad.log(1.0 - mean))
    return ad.sum(ll, axis=1)


def _lgamma1(x: np.ndarray) -> np.ndarray:
    return gammaln(x + 1.0)


def clamp_logvar(logvar: ad.Tensor) -> ad.Tensor:
    return ad.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def kl_diag_gaussian_to_standard(q: DiagGaussian) -> ad.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) per sample, shape ``(batch,)``."""
    mu, lv = q.mean, q.logvar
    if mu.shape[-1] == 0:
        return ad.Tensor(np.zeros(mu.shape[0]))
    terms = ad.square(mu) + ad.exp(lv) - lv - 1.0
    return ad.sum(terms, axis=1) * 0.5


def reparam_sample(q: DiagGaussian, rng: Rng | None = None, eps: np.ndarray | None = None) -> ad.Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` (or the given noise)."""
    if eps is None:
        eps = rng.normal(q.mean.shape)
    std = ad.exp(q.logvar * 0.5)
    return q.mean + std * eps
