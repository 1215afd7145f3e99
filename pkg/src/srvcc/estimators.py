"""Importance-weighted gradient estimators.

Every function here works on per-sample quantities with shape ``(..., K, L)``
(``...`` is any batch shape, ``K`` the importance samples) and returns
gradients of the *loss*, i.e. of ``-log(1/K sum_k w_k)``, summed over ``K``
but not over the batch axes. Callers chain the results through their MLPs.

Conventions for a diagonal Gaussian ``q = N(mu, sigma^2)`` with
``z_k = mu + sigma * eps_k``:

* ``grad_lik``   d log p(x | z_k) / d z_k along the reconstruction path
* ``grad_prior`` d log p(z_k) / d z_k
* ``d log w_k / d z_k`` with q's parameters held fixed is
  ``grad_lik + grad_prior + eps_k / sigma``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalError
from .gmm import GaussianMixture, log_density_grads, responsibilities
from .nn import MlpParams, Trace, logsumexp, mlp_backward


@dataclass
class WeightSet:
    log_weights: np.ndarray
    weights: np.ndarray


@dataclass
class ImportanceSamples:
    z: np.ndarray           # (..., K, L) sample in q's space
    eps: np.ndarray         # (..., K, L)
    sigma: np.ndarray       # broadcastable to z
    log_prior: np.ndarray   # (..., K)
    log_lik: np.ndarray     # (..., K)
    log_q: np.ndarray       # (..., K)
    grad_lik: np.ndarray    # (..., K, L)
    grad_prior: np.ndarray  # (..., K, L)

    @property
    def log_weights(self) -> np.ndarray:
        return self.log_prior + self.log_lik - self.log_q

    def grad_log_weight(self) -> np.ndarray:
        return self.grad_lik + self.grad_prior + self.eps / self.sigma


def normalize_weights(log_weights) -> WeightSet:
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.shape[-1] < 1:
        raise ValueError("need at least one importance sample")
    if not np.all(np.isfinite(lw)):
        raise NumericalError("non-finite log-weight")
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    return WeightSet(lw, w / w.sum(axis=-1, keepdims=True))


def iwae_bound_loss(log_weights) -> np.ndarray:
    """-log(1/K sum_k w_k) per item."""
    lw = np.asarray(log_weights, dtype=np.float64)
    return -(logsumexp(lw, axis=-1) - np.log(lw.shape[-1]))


def iwae_decoder_grad(weights: WeightSet, decoder: MlpParams, trace: Trace, dloglik_dout):
    """-sum_k w~_k grad_theta log p(x | z_k) for decoder outputs laid out as
    ``(..., K, D)`` (flattened into the trace's rows in the same order).

    Also returns d log p(x | z_k) / d input, unweighted, shaped like the
    decoder input rows.
    """
    g = np.reshape(dloglik_dout, trace.post[-1].shape)
    grads, dinput = mlp_backward(decoder, trace, -g, sample_weights=weights.weights.ravel())
    return grads, -dinput


def dreg_encoder_grad(samples: ImportanceSamples, weights: WeightSet, reduce: bool = True):
    """Doubly reparameterized encoder gradient w.r.t. (mu, sigma) of q.

    With ``reduce=False`` the per-sample terms are returned, for models whose
    q parameters differ between samples.
    """
    w2 = (weights.weights ** 2)[..., None]
    gz = samples.grad_log_weight()
    dmu = -w2 * gz
    dsigma = -w2 * gz * samples.eps
    if reduce:
        return dmu.sum(axis=-2), dsigma.sum(axis=-2)
    return dmu, dsigma


def naive_encoder_grad(samples: ImportanceSamples, weights: WeightSet, reduce: bool = True):
    """Total derivative of the sampled bound, score-function term included.

    Under frozen noise this is the exact gradient of the bound w.r.t. q's
    parameters.
    """
    w = weights.weights[..., None]
    g = samples.grad_lik + samples.grad_prior
    sigma = np.broadcast_to(samples.sigma, g.shape)
    dmu = -w * g
    dsigma = -w * (g * samples.eps + 1.0 / sigma)
    if reduce:
        return dmu.sum(axis=-2), dsigma.sum(axis=-2)
    return dmu, dsigma


def attribution_weights(prior: GaussianMixture, z, mode: str = "soft", rng=None):
    """Which prior component each sample is treated as coming from, (..., K, C).

    ``soft`` uses the responsibilities themselves (unbiased for mixtures),
    ``argmax`` the most responsible component, ``sample`` a draw from the
    responsibilities.
    """
    gamma = responsibilities(prior, z)
    if mode == "soft":
        return gamma
    if mode == "argmax":
        return np.eye(prior.n_components)[np.argmax(gamma, axis=-1)]
    if mode == "sample":
        if rng is None:
            raise ValueError("sampled attribution needs an rng")
        u = rng.random(gamma.shape[:-1])[..., None]
        idx = np.sum(np.cumsum(gamma, axis=-1) < u, axis=-1)
        idx = np.minimum(idx, prior.n_components - 1)
        return np.eye(prior.n_components)[idx]
    raise ValueError(f"unknown attribution mode {mode!r}")


def gdreg_prior_grad(samples: ImportanceSamples, weights: WeightSet, prior: GaussianMixture,
                     attribution: str = "soft", rng=None):
    """Generalized DREG gradient for the prior's means and stds.

    Each z_k is pulled back through the attributed component's location-scale
    map, eps~ = (z_k - mu_c) / sigma_c, so d T / d mu_c = 1 and
    d T / d sigma_c = eps~. Mixture weights have no reparameterization and get
    the direct term sum_k w~_k d log p(z_k) / d log pi.

    Returns per-item ``(dlogw, dmeans, dstds)`` with shapes ``(..., C)``,
    ``(..., C, L)``, ``(..., C, L)``.
    """
    w = weights.weights[..., None]
    coef = w * samples.grad_lik - w * w * samples.grad_log_weight()      # (..., K, L)
    attr = attribution_weights(prior, samples.z, attribution, rng)        # (..., K, C)
    eps_t = (samples.z[..., None, :] - prior.means) / prior.stds          # (..., K, C, L)
    weighted = attr[..., None] * coef[..., None, :]
    dmeans = -np.sum(weighted, axis=-3)
    dstds = -np.sum(weighted * eps_t, axis=-3)
    gamma = responsibilities(prior, samples.z)
    dlogw = -np.sum(weights.weights[..., None] * gamma, axis=-2)
    return dlogw, dmeans, dstds


def naive_prior_grad(samples: ImportanceSamples, weights: WeightSet, prior: GaussianMixture):
    """-sum_k w~_k grad_theta log p_theta(z_k): the score of the prior itself."""
    _, dlogw, dmeans, dstds = log_density_grads(prior, samples.z)
    w = weights.weights
    return (-np.sum(w[..., None] * dlogw, axis=-2),
            -np.sum(w[..., None, None] * dmeans, axis=-3),
            -np.sum(w[..., None, None] * dstds, axis=-3))


def naive_score_grad(samples: ImportanceSamples, weights: WeightSet, target: str,
                     prior: Optional[GaussianMixture] = None):
    """The baseline estimators DREG/GDREG are compared against."""
    if target == "encoder":
        return naive_encoder_grad(samples, weights)
    if target == "prior":
        if prior is None:
            raise ValueError("prior target needs the mixture")
        return naive_prior_grad(samples, weights, prior)
    raise ValueError(f"unknown target {target!r}")
