"""Cell-level latent z_rc conditioned on the row and column latents.

For a cell (i, j) with K samples: z_r,k and z_c,k come from the side
posteriors along their reconstruction paths, the joint encoder maps
concat(z_r,k, z_c,k) to q(z_rc | .) = N(mu_rc,k, sigma_rc,k^2) and the joint
decoder reads concat(z_rc,k, z_r,k, z_c,k) to predict X_ij. The discrete
component is marginalised: KL terms use the full mixture density.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import estimators as est
from .errors import DimensionError, NumericalError
from .gmm import GaussianMixture, MixturePrior, log_density, log_density_grads, responsibilities
from .nn import MlpParams, Trace, init_mlp, mlp_backward, mlp_forward, sigmoid, softplus
from .side import (SIGMA_FLOOR, EncoderPass, SideVae, canonical_likelihood, decode_mean,
                   encoder_backward, encoder_pass, log_likelihood_terms)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class JointVae:
    encoder: MlpParams
    decoder: MlpParams
    prior: MixturePrior
    row_dim: int
    col_dim: int
    likelihood: str = "gaussian"

    def __post_init__(self):
        self.likelihood = canonical_likelihood(self.likelihood)
        if self.encoder.n_in != self.row_dim + self.col_dim:
            raise DimensionError("joint encoder input must be row latent + column latent")
        if self.decoder.n_out != 1:
            raise DimensionError("joint decoder must emit a single cell value")
        if self.decoder.n_in != self.latent_dim + self.row_dim + self.col_dim:
            raise DimensionError("joint decoder input must be z_rc + z_r + z_c")

    @property
    def latent_dim(self) -> int:
        return self.encoder.n_out // 2

    @property
    def n_clusters(self) -> int:
        return self.prior.logits.size

    def parameters(self, prefix: str = "joint"):
        out = self.encoder.parameters(f"{prefix}.encoder")
        out.update(self.decoder.parameters(f"{prefix}.decoder"))
        out.update(self.prior.parameters(f"{prefix}.prior"))
        return out


def build_joint_vae(row_dim: int, col_dim: int, latent_dim: int, n_clusters: int, rng,
                    hidden=(32,), likelihood: str = "gaussian") -> JointVae:
    hidden = tuple(hidden)
    acts = ("tanh",) * len(hidden) + ("identity",)
    enc = init_mlp((row_dim + col_dim, *hidden, 2 * latent_dim), acts, rng)
    dec = init_mlp((latent_dim + row_dim + col_dim, *hidden, 1), acts, rng)
    means = rng.standard_normal((n_clusters, latent_dim)) if n_clusters > 1 \
        else np.zeros((1, latent_dim))
    prior = MixturePrior.from_mixture(GaussianMixture(
        np.full(n_clusters, 1.0 / n_clusters), means, np.ones((n_clusters, latent_dim))))
    return JointVae(enc, dec, prior, row_dim, col_dim, likelihood)


def _joint_encoder_pass(jv: JointVae, z_r, z_c):
    z_r = np.asarray(z_r, dtype=np.float64)
    z_c = np.asarray(z_c, dtype=np.float64)
    if z_r.shape[-1] != jv.row_dim or z_c.shape[-1] != jv.col_dim:
        raise DimensionError(
            f"joint encoder expects latents of size ({jv.row_dim}, {jv.col_dim}), "
            f"got ({z_r.shape[-1]}, {z_c.shape[-1]})")
    out, trace = mlp_forward(jv.encoder, np.concatenate([z_r, z_c], axis=-1))
    L = jv.latent_dim
    s_raw = out[..., L:]
    return EncoderPass(trace, out[..., :L], s_raw, softplus(s_raw) + SIGMA_FLOOR)


def joint_encode(jv: JointVae, z_r, z_c):
    enc = _joint_encoder_pass(jv, z_r, z_c)
    return enc.mu, enc.sigma


def joint_decode(jv: JointVae, z_rc, z_r, z_c):
    out, _ = mlp_forward(jv.decoder, np.concatenate([z_rc, z_r, z_c], axis=-1))
    return decode_mean(jv.likelihood, out[..., 0])


def joint_responsibilities(jv: JointVae, z_rc) -> np.ndarray:
    return responsibilities(jv.prior.mixture, z_rc)


@dataclass
class CellBatch:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if not (self.rows.shape == self.cols.shape == self.values.shape == self.present.shape):
            raise DimensionError("cell batch fields must have equal length")
        if not np.all(np.isfinite(self.values[self.present])):
            raise ValueError("present cells must have finite values")

    def __len__(self):
        return self.rows.size


@dataclass
class JointForward:
    row_enc: EncoderPass
    col_enc: EncoderPass
    eps_r: np.ndarray
    eps_c: np.ndarray
    eta: np.ndarray
    z_r: np.ndarray
    z_c: np.ndarray
    enc: EncoderPass       # joint encoder, rows are (cell, sample)
    z_rc: np.ndarray       # (C, K, Lrc)
    dec_trace: Trace
    dec_out: np.ndarray    # (C, K)
    values: np.ndarray
    present: np.ndarray
    log_lik: np.ndarray
    log_prior: np.ndarray
    log_q: np.ndarray

    @property
    def log_weights(self):
        return self.log_prior + self.log_lik - self.log_q

    @property
    def kl(self):
        return self.log_q - self.log_prior


def joint_forward(jv: JointVae, row_vae: SideVae, col_vae: SideVae, x_rows, x_cols,
                  values, present, eps_r, eps_c, eta) -> JointForward:
    """Frozen-noise pass for C cells: ``x_rows`` (C, d) holds each cell's row
    vector, ``x_cols`` (C, n) its column vector, noises are (C, K, .)."""
    values = np.asarray(values, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    C, K = eta.shape[:2]
    row_enc = encoder_pass(row_vae, x_rows)
    col_enc = encoder_pass(col_vae, x_cols)
    z_r = row_vae.scale * row_enc.mu[:, None, :] + row_enc.sigma[:, None, :] * eps_r
    z_c = col_vae.scale * col_enc.mu[:, None, :] + col_enc.sigma[:, None, :] * eps_c
    enc = _joint_encoder_pass(jv, z_r, z_c)
    if not np.all(np.isfinite(enc.mu)):
        raise NumericalError("non-finite joint encoder activations")
    z_rc = enc.mu + enc.sigma * eta
    dec_out, dec_trace = mlp_forward(
        jv.decoder, np.concatenate([z_rc, z_r, z_c], axis=-1).reshape(C * K, -1))
    dec_out = dec_out.reshape(C, K)
    pres = np.broadcast_to(present[:, None], (C, K))
    ll, _ = log_likelihood_terms(jv.likelihood, np.where(present, values, 0.0)[:, None],
                                 dec_out, pres)
    log_prior = log_density(jv.prior.mixture, z_rc)
    log_q = np.sum(-0.5 * eta ** 2 - np.log(enc.sigma) - 0.5 * LOG_2PI, axis=-1)
    return JointForward(row_enc, col_enc, eps_r, eps_c, eta, z_r, z_c, enc, z_rc, dec_trace,
                        dec_out, values, present, ll, log_prior, log_q)


def draw_noise(jv: JointVae, row_vae: SideVae, col_vae: SideVae, n_cells: int, K: int, rng):
    return (rng.standard_normal((n_cells, K, row_vae.latent_dim)),
            rng.standard_normal((n_cells, K, col_vae.latent_dim)),
            rng.standard_normal((n_cells, K, jv.latent_dim)))


def joint_negative_elbo(jv: JointVae, row_vae: SideVae, col_vae: SideVae, x_rows, x_cols,
                        values, present, K: int, rng):
    """Monte-Carlo -E[log p(X_ij | .)] + KL per cell, plus the forward pass."""
    if K < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    x_rows = np.atleast_2d(x_rows)
    x_cols = np.atleast_2d(x_cols)
    eps_r, eps_c, eta = draw_noise(jv, row_vae, col_vae, x_rows.shape[0], K, rng)
    fwd = joint_forward(jv, row_vae, col_vae, x_rows, x_cols, np.atleast_1d(values),
                        np.atleast_1d(present), eps_r, eps_c, eta)
    loss = fwd.kl.mean(axis=1) - fwd.log_lik.mean(axis=1)
    if not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite joint negative ELBO")
    return loss, fwd


def latent_backward(jv: JointVae, row_vae: SideVae, col_vae: SideVae, fwd: JointForward,
                    dmu_rc, dsigma_rc, dz_r=None, dz_c=None):
    """Chain loss gradients on (mu_rc, sigma_rc) per (cell, sample), plus any
    direct gradients on z_r / z_c, into joint and side encoder parameters."""
    C, K, L = fwd.z_rc.shape
    dout = np.concatenate([dmu_rc, dsigma_rc * sigmoid(fwd.enc.s_raw)], axis=-1)
    enc_grads, dinput = mlp_backward(jv.encoder, fwd.enc.trace, dout)
    dzr = dinput[..., :jv.row_dim]
    dzc = dinput[..., jv.row_dim:]
    if dz_r is not None:
        dzr = dzr + dz_r
    if dz_c is not None:
        dzc = dzc + dz_c
    grads = enc_grads.parameters("joint.encoder")
    grads.update(encoder_backward(
        row_vae, fwd.row_enc, np.sum(row_vae.scale * dzr, axis=1),
        np.sum(fwd.eps_r * dzr, axis=1), "row"))
    col_grads = encoder_backward(
        col_vae, fwd.col_enc, np.sum(col_vae.scale * dzc, axis=1),
        np.sum(fwd.eps_c * dzc, axis=1), "column")
    for k, v in col_grads.items():
        grads[k] = grads[k] + v if k in grads else v
    return grads


def joint_gradients(jv: JointVae, row_vae: SideVae, col_vae: SideVae, fwd: JointForward, *,
                    estimator: str = "dreg", attribution: str = "soft", rng=None,
                    weight: float = 1.0):
    """Gradients of ``weight * sum_cells bound_loss`` w.r.t. joint parameters
    and, through z_r and z_c, the row and column encoders."""
    C, K, L = fwd.z_rc.shape
    ws = est.normalize_weights(fwd.log_weights)
    pres = np.broadcast_to(fwd.present[:, None], (C, K))
    _, dll = log_likelihood_terms(jv.likelihood, np.where(fwd.present, fwd.values, 0.0)[:, None],
                                  fwd.dec_out, pres)
    dec_grads, g_in = est.iwae_decoder_grad(ws, jv.decoder, fwd.dec_trace, dll.reshape(C * K, 1))
    g_in = g_in.reshape(C, K, -1)
    g_rc = g_in[..., :L]
    g_r = g_in[..., L:L + jv.row_dim]
    g_c = g_in[..., L + jv.row_dim:]
    mix = jv.prior.mixture
    gz_prior, _, _, _ = log_density_grads(mix, fwd.z_rc)
    samples = est.ImportanceSamples(fwd.z_rc, fwd.eta, fwd.enc.sigma, fwd.log_prior,
                                    fwd.log_lik, fwd.log_q, g_rc, gz_prior)
    if estimator == "dreg":
        dmu, dsigma = est.dreg_encoder_grad(samples, ws, reduce=False)
        dlogw, dmeans, dstds = est.gdreg_prior_grad(samples, ws, mix, attribution, rng)
    elif estimator == "naive":
        dmu, dsigma = est.naive_encoder_grad(samples, ws, reduce=False)
        dlogw, dmeans, dstds = est.naive_prior_grad(samples, ws, mix)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    w = ws.weights[..., None]
    grads = latent_backward(jv, row_vae, col_vae, fwd, dmu, dsigma, -w * g_r, -w * g_c)
    grads.update(dec_grads.parameters("joint.decoder"))
    grads.update(jv.prior.chain("joint.prior", dlogw.sum(axis=0), dmeans.sum(axis=0),
                                dstds.sum(axis=0), weights=mix.weights))
    loss = float(np.sum(est.iwae_bound_loss(fwd.log_weights)))
    if weight != 1.0:
        grads = {k: weight * v for k, v in grads.items()}
    return weight * loss, grads
