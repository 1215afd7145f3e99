"""One side (rows or columns) of the co-clustering model.

The encoder emits ``(mu', sigma)``. Reconstructions decode
``z = f * mu' + sigma * eps`` while the KL path uses the unscaled
``z' = mu' + sigma * eps`` with the same noise, so the scale vector ``f``
never touches the KL term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import estimators as est
from .errors import DataError, DimensionError, NumericalError
from .gmm import (GaussianMixture, MixturePrior, log_density, log_density_grads,
                  responsibilities)
from .nn import MlpParams, Trace, init_mlp, mlp_backward, mlp_forward, sigmoid, softplus

LOG_2PI = np.log(2.0 * np.pi)
SIGMA_FLOOR = 1e-6
LIKELIHOODS = {"gaussian": "gaussian", "gaussian_unit_variance": "gaussian",
               "bernoulli": "bernoulli"}


def canonical_likelihood(name: str) -> str:
    try:
        return LIKELIHOODS[name]
    except KeyError:
        raise ValueError(f"unknown likelihood {name!r}") from None


@dataclass
class SideVae:
    side: str
    encoder: MlpParams
    decoder: MlpParams
    prior: MixturePrior
    scale: np.ndarray
    likelihood: str = "gaussian"

    def __post_init__(self):
        self.likelihood = canonical_likelihood(self.likelihood)
        L = self.decoder.n_in
        if self.encoder.n_out != 2 * L:
            raise DimensionError(f"encoder emits {self.encoder.n_out} values, need 2 x {L}")
        if self.prior.means.shape[1] != L:
            raise DimensionError("prior dimension differs from decoder input dimension")
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.scale.shape != (L,) or np.any(self.scale < 1):
            raise ValueError("scale vector must have one entry >= 1 per latent dimension")

    @property
    def latent_dim(self) -> int:
        return self.decoder.n_in

    @property
    def input_dim(self) -> int:
        return self.encoder.n_in

    @property
    def n_clusters(self) -> int:
        return self.prior.logits.size

    def parameters(self, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
        prefix = self.side if prefix is None else prefix
        out = self.encoder.parameters(f"{prefix}.encoder")
        out.update(self.decoder.parameters(f"{prefix}.decoder"))
        out.update(self.prior.parameters(f"{prefix}.prior"))
        return out

    def network_parameters(self, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
        prefix = self.side if prefix is None else prefix
        out = self.encoder.parameters(f"{prefix}.encoder")
        out.update(self.decoder.parameters(f"{prefix}.decoder"))
        return out

    def squared_norm(self) -> float:
        return self.encoder.squared_norm() + self.decoder.squared_norm()


def build_side_vae(side: str, input_dim: int, latent_dim: int, n_clusters: int, rng,
                   hidden=(64,), likelihood: str = "gaussian") -> SideVae:
    hidden = tuple(hidden)
    enc = init_mlp((input_dim, *hidden, 2 * latent_dim),
                   ("tanh",) * len(hidden) + ("identity",), rng)
    dec = init_mlp((latent_dim, *hidden, input_dim),
                   ("tanh",) * len(hidden) + ("identity",), rng)
    means = rng.standard_normal((n_clusters, latent_dim)) if n_clusters > 1 \
        else np.zeros((1, latent_dim))
    prior = MixturePrior.from_mixture(GaussianMixture(
        np.full(n_clusters, 1.0 / n_clusters), means, np.ones((n_clusters, latent_dim))))
    return SideVae(side, enc, dec, prior, np.ones(latent_dim), likelihood)


@dataclass
class PosteriorParams:
    mu_raw: np.ndarray
    mu_scaled: np.ndarray
    sigma: np.ndarray


@dataclass
class EncoderPass:
    trace: Trace
    mu: np.ndarray
    s_raw: np.ndarray
    sigma: np.ndarray


def encoder_pass(vae: SideVae, x) -> EncoderPass:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != vae.input_dim:
        raise DimensionError(
            f"{vae.side} encoder expects length {vae.input_dim}, got {x.shape[-1]}")
    out, trace = mlp_forward(vae.encoder, x)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite {vae.side} encoder activations")
    L = vae.latent_dim
    s_raw = out[..., L:]
    return EncoderPass(trace, out[..., :L], s_raw, softplus(s_raw) + SIGMA_FLOOR)


def encoder_backward(vae: SideVae, enc: EncoderPass, dmu, dsigma, prefix=None):
    """Chain loss gradients w.r.t. (mu', sigma) into encoder parameters."""
    dout = np.concatenate([dmu, dsigma * sigmoid(enc.s_raw)], axis=-1)
    grads, _ = mlp_backward(vae.encoder, enc.trace, dout)
    return grads.parameters(f"{vae.side if prefix is None else prefix}.encoder")


def encode(vae: SideVae, x) -> PosteriorParams:
    enc = encoder_pass(vae, x)
    return PosteriorParams(enc.mu, vae.scale * enc.mu, enc.sigma)


def log_likelihood_terms(kind: str, x, out, mask=None):
    """Per-entry log-likelihood of ``x`` given decoder pre-activations ``out``
    and its derivative w.r.t. ``out``. Masked-out entries contribute zero."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "gaussian":
        ll = -0.5 * (x - out) ** 2 - 0.5 * LOG_2PI
        d = x - out
    else:
        obs = x if mask is None else np.where(mask, x, 0.5)
        if np.any((obs < 0) | (obs > 1)):
            raise DataError("bernoulli likelihood needs data in [0, 1]")
        ll = x * out - softplus(out)
        d = x - sigmoid(out)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        ll = np.where(m > 0, ll, 0.0)
        d = d * m
    return ll, d


def decode_mean(kind: str, out):
    return sigmoid(out) if kind == "bernoulli" else out


def reconstruction_log_likelihood(vae: SideVae, x, z, mask=None) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != vae.latent_dim:
        raise DimensionError(f"latent has {z.shape[-1]} dims, expected {vae.latent_dim}")
    out, _ = mlp_forward(vae.decoder, z)
    ll, _ = log_likelihood_terms(vae.likelihood, x, out, mask)
    return np.sum(ll, axis=-1)


@dataclass
class SideForward:
    x: np.ndarray
    mask: Optional[np.ndarray]
    enc: EncoderPass
    eps: np.ndarray        # (B, K, L)
    z: np.ndarray          # reconstruction path, (B, K, L)
    z_kl: np.ndarray       # KL path, (B, K, L)
    dec_trace: Trace
    dec_out: np.ndarray    # (B, K, D)
    log_lik: np.ndarray    # (B, K)
    log_prior: np.ndarray  # (B, K)
    log_q: np.ndarray      # (B, K)

    @property
    def log_weights(self):
        return self.log_prior + self.log_lik - self.log_q

    @property
    def kl(self):
        return self.log_q - self.log_prior


def side_forward(vae: SideVae, x, eps, mask=None) -> SideForward:
    """Frozen-noise forward pass for a batch ``x`` (B, D) and noise (B, K, L)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.asarray(eps, dtype=np.float64)
    B = x.shape[0]
    if eps.ndim == 2:
        eps = eps[None]
    if eps.shape[0] != B or eps.shape[-1] != vae.latent_dim:
        raise DimensionError(f"noise shape {eps.shape} does not match batch {B}")
    if mask is not None:
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    K, L = eps.shape[1], vae.latent_dim
    enc = encoder_pass(vae, x)
    mu, sigma = enc.mu[:, None, :], enc.sigma[:, None, :]
    z = vae.scale * mu + sigma * eps
    z_kl = mu + sigma * eps
    dec_out, dec_trace = mlp_forward(vae.decoder, z.reshape(B * K, L))
    dec_out = dec_out.reshape(B, K, -1)
    m = None if mask is None else mask[:, None, :]
    ll, _ = log_likelihood_terms(vae.likelihood, x[:, None, :], dec_out, m)
    log_lik = ll.sum(axis=-1)
    log_prior = log_density(vae.prior.mixture, z_kl)
    log_q = np.sum(-0.5 * eps ** 2 - np.log(sigma) - 0.5 * LOG_2PI, axis=-1)
    return SideForward(x, mask, enc, eps, z, z_kl, dec_trace, dec_out, log_lik, log_prior, log_q)


@dataclass
class ElboTerms:
    loss: np.ndarray        # Monte-Carlo -recon + KL
    recon: np.ndarray       # mean over samples of log p(x | z_k)
    kl: np.ndarray          # mean over samples of log q(z'_k) - log p(z'_k)
    log_weights: np.ndarray
    bound_loss: np.ndarray  # -log(1/K sum_k w_k)
    forward: SideForward


def elbo_terms(fwd: SideForward, squeeze=False) -> ElboTerms:
    recon = fwd.log_lik.mean(axis=-1)
    kl = fwd.kl.mean(axis=-1)
    lw = fwd.log_weights
    bound = est.iwae_bound_loss(lw)
    loss = kl - recon
    if not np.all(np.isfinite(loss)) or not np.all(np.isfinite(bound)):
        raise NumericalError("non-finite negative ELBO")
    if squeeze:
        return ElboTerms(loss[0], recon[0], kl[0], lw[0], bound[0], fwd)
    return ElboTerms(loss, recon, kl, lw, bound, fwd)


def negative_elbo(vae: SideVae, x, n_samples: int, rng, mask=None) -> ElboTerms:
    if n_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    eps = rng.standard_normal((xb.shape[0], n_samples, vae.latent_dim))
    return elbo_terms(side_forward(vae, xb, eps, mask), squeeze=single)


def importance_samples(vae: SideVae, fwd: SideForward):
    """Per-sample log terms and z-gradients, plus the decoder's pieces."""
    _, dll = log_likelihood_terms(vae.likelihood, fwd.x[:, None, :], fwd.dec_out,
                                  None if fwd.mask is None else fwd.mask[:, None, :])
    gz_prior, _, _, _ = log_density_grads(vae.prior.mixture, fwd.z_kl)
    return dll, gz_prior


def side_gradients(vae: SideVae, fwd: SideForward, *, estimator: str = "dreg",
                   attribution: str = "soft", rng=None, weight: float = 1.0,
                   prefix: Optional[str] = None):
    """Gradients of ``weight * sum_b bound_loss_b`` for every side parameter.

    ``estimator="naive"`` gives the exact frozen-noise gradient;
    ``"dreg"`` uses DREG for the encoder and GDREG for the prior.
    """
    prefix = vae.side if prefix is None else prefix
    B, K, L = fwd.eps.shape
    ws = est.normalize_weights(fwd.log_weights)
    dll, gz_prior = importance_samples(vae, fwd)
    dec_grads, gz_lik = est.iwae_decoder_grad(ws, vae.decoder, fwd.dec_trace,
                                              dll.reshape(B * K, -1))
    gz_lik = gz_lik.reshape(B, K, L)
    samples = est.ImportanceSamples(fwd.z_kl, fwd.eps, fwd.enc.sigma[:, None, :],
                                    fwd.log_prior, fwd.log_lik, fwd.log_q, gz_lik, gz_prior)
    mix = vae.prior.mixture
    if estimator == "dreg":
        dmu, dsigma = est.dreg_encoder_grad(samples, ws)
        dlogw, dmeans, dstds = est.gdreg_prior_grad(samples, ws, mix, attribution, rng)
    elif estimator == "naive":
        dmu, dsigma = est.naive_encoder_grad(samples, ws)
        dlogw, dmeans, dstds = est.naive_prior_grad(samples, ws, mix)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    # reconstruction reads f * mu', i.e. an extra (f - 1) * mu' beyond z'
    dmu = dmu - (vae.scale - 1.0) * np.sum(ws.weights[..., None] * gz_lik, axis=1)

    grads = encoder_backward(vae, fwd.enc, dmu, dsigma, prefix)
    grads.update(dec_grads.parameters(f"{prefix}.decoder"))
    grads.update(vae.prior.chain(f"{prefix}.prior", dlogw.sum(axis=0), dmeans.sum(axis=0),
                                 dstds.sum(axis=0), weights=mix.weights))
    loss = float(np.sum(est.iwae_bound_loss(fwd.log_weights)))
    if weight != 1.0:
        grads = {k: weight * v for k, v in grads.items()}
    return weight * loss, grads


def update_scale(vae: SideVae, batch, tau: float = 1.0, f_max: float = 100.0) -> np.ndarray:
    """Per-dimension f = clip(tau / (std of mu' over the batch + 1e-8), 1, f_max)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] < 2:
        raise ValueError("scale update needs at least two items")
    mu = encoder_pass(vae, batch).mu
    spread = mu.std(axis=0)
    return np.clip(tau / (spread + 1e-8), 1.0, f_max)


def cluster_assign(vae: SideVae, x, *, sample: bool = False, rng=None) -> np.ndarray:
    """Soft memberships from the prior's responsibilities at the unscaled mean
    (or at a posterior draw when ``sample`` is set)."""
    enc = encoder_pass(vae, x)
    z = enc.mu
    if sample:
        z = enc.mu + enc.sigma * rng.standard_normal(enc.mu.shape)
    return responsibilities(vae.prior.mixture, z)
