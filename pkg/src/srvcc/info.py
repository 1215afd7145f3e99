"""Contrastive (InfoNCE) terms and the mutual-information cross-loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .gmm import component_log_joint, responsibilities
from .nn import MlpParams, init_mlp, logsumexp, mlp_backward, mlp_forward, softmax
from .side import SideVae, encoder_backward, encoder_pass

EPS_MI = 1e-10


@dataclass
class InfoNceCritic:
    """Positive critic f(x, z) = exp(h(x, z) / temperature).

    ``bilinear``: h(x, z) = (x @ proj) . z; ``mlp``: h = mlp([x, z]).
    """

    mode: str
    temperature: float
    proj: Optional[np.ndarray] = None
    mlp: Optional[MlpParams] = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mode == "bilinear" and self.proj is None:
            raise ValueError("bilinear critic needs a projection matrix")
        if self.mode == "mlp" and (self.mlp is None or self.mlp.n_out != 1):
            raise ValueError("mlp critic needs a scalar-output network")
        if self.mode not in ("bilinear", "mlp"):
            raise ValueError(f"unknown critic mode {self.mode!r}")

    def parameters(self, prefix: str):
        if self.mode == "bilinear":
            return {f"{prefix}.proj": self.proj}
        return self.mlp.parameters(prefix)


def build_critic(x_dim: int, z_dim: int, rng, mode: str = "bilinear",
                 temperature: float = 0.1, hidden=(32,)) -> InfoNceCritic:
    if mode == "bilinear":
        proj = rng.uniform(-1, 1, size=(x_dim, z_dim)) * np.sqrt(3.0 / x_dim) * 0.1
        return InfoNceCritic("bilinear", temperature, proj=proj)
    sizes = (x_dim + z_dim, *hidden, 1)
    acts = ("tanh",) * len(hidden) + ("identity",)
    return InfoNceCritic("mlp", temperature, mlp=init_mlp(sizes, acts, rng))


def critic_scores(critic: InfoNceCritic, x, z):
    """S[i, j] = h(x_j, z_i) / temperature, and a cache for the backward pass."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    K = x.shape[0]
    if z.shape[0] != K:
        raise DimensionError("x and z batches must pair up")
    if critic.mode == "bilinear":
        xp = x @ critic.proj
        return z @ xp.T / critic.temperature, (x, z, xp)
    pairs = np.concatenate([np.broadcast_to(x[None, :, :], (K, K, x.shape[1])),
                            np.broadcast_to(z[:, None, :], (K, K, z.shape[1]))], axis=-1)
    out, trace = mlp_forward(critic.mlp, pairs.reshape(K * K, -1))
    return out.reshape(K, K) / critic.temperature, (x, z, trace)


def info_nce(critic: InfoNceCritic, x, z) -> float:
    """c = sum_i log softmax_j(S[i, :])[i]; always <= 0."""
    if np.shape(np.atleast_2d(x))[0] < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    S, _ = critic_scores(critic, x, z)
    return float(np.sum(np.diag(S) - logsumexp(S, axis=1)))


def info_nce_grads(critic: InfoNceCritic, x, z, prefix: str, weight: float = 1.0):
    """Loss ``-weight * c`` with gradients for the critic and for z."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    K = x.shape[0]
    if K < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    S, cache = critic_scores(critic, x, z)
    c = float(np.sum(np.diag(S) - logsumexp(S, axis=1)))
    dS = -weight * (np.eye(K) - softmax(S, axis=1)) / critic.temperature  # d loss / d h
    if critic.mode == "bilinear":
        x, z, xp = cache
        dz = dS @ xp
        dproj = x.T @ (dS.T @ z)
        return -weight * c, {f"{prefix}.proj": dproj}, dz
    x, z, trace = cache
    grads, dinput = mlp_backward(critic.mlp, trace, dS.reshape(K * K, 1))
    dz = dinput.reshape(K, K, -1)[..., x.shape[1]:].sum(axis=1)
    return -weight * c, grads.parameters(prefix), dz


@dataclass
class JointPmf:
    table: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray


def _xlogy_ratio(p, q):
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz] / q[nz])
    return out


def mutual_information_of_pmf(P) -> float:
    P = np.asarray(P, dtype=np.float64)
    pr = P.sum(axis=1)
    pc = P.sum(axis=0)
    return float(np.sum(_xlogy_ratio(P, np.outer(pr, pc))))


def data_pmf(values, mask=None) -> np.ndarray:
    """p(i, j) proportional to X - min(X) over observed cells (zero elsewhere).

    An all-equal matrix has no mass; the uniform pmf over observed cells is
    returned so downstream MI is exactly zero.
    """
    X = np.asarray(values, dtype=np.float64)
    obs = np.ones_like(X, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    shifted = np.where(obs, X - np.min(X[obs]), 0.0)
    total = shifted.sum()
    if total <= 0:
        return obs / obs.sum()
    return shifted / total


def uniform_pmf(shape) -> np.ndarray:
    n, d = shape
    return np.full((n, d), 1.0 / (n * d))


def empirical_mutual_information(values, mask=None) -> float:
    return mutual_information_of_pmf(data_pmf(values, mask))


def _check_simplex_rows(g, name):
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if np.any(g < -1e-12) or np.any(np.abs(g.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError(f"{name} rows must be probability vectors")
    return g


def coclustered_mutual_information(gamma_r, gamma_c, base_pmf):
    """I(X^; Y^) for p(s, t) = sum_ij p(i, j) gamma_r[i, s] gamma_c[j, t]."""
    gr = _check_simplex_rows(gamma_r, "row membership")
    gc = _check_simplex_rows(gamma_c, "column membership")
    P = np.asarray(base_pmf, dtype=np.float64)
    if P.shape != (gr.shape[0], gc.shape[0]):
        raise DimensionError(f"pmf shape {P.shape} != ({gr.shape[0]}, {gc.shape[0]})")
    table = gr.T @ P @ gc
    pmf = JointPmf(table, table.sum(axis=1), table.sum(axis=0))
    return mutual_information_of_pmf(table), pmf


def cross_loss(i_hat: float, i_orig: float, eps_mi: float = EPS_MI) -> float:
    """1 - I(X^; Y^) / I(X; Y), clamped to [0, 1]."""
    if i_orig <= eps_mi:
        warnings.warn("data carry no mutual information; cross-loss disabled", RuntimeWarning)
        return 0.0
    if i_hat > i_orig + 1e-9:
        raise ValueError(f"co-clustered MI {i_hat} exceeds data MI {i_orig}; "
                         "were different base pmfs used?")
    return float(np.clip(1.0 - i_hat / i_orig, 0.0, 1.0))


def _mi_grad_table(table):
    pr = table.sum(axis=1, keepdims=True)
    pc = table.sum(axis=0, keepdims=True)
    tiny = 1e-300
    return np.log(np.maximum(table, tiny)) - np.log(np.maximum(pr, tiny)) \
        - np.log(np.maximum(pc, tiny)) - 1.0


def _responsibility_backward(vae: SideVae, mu, dgamma, prefix):
    """Chain d loss / d gamma through gamma = softmax_c(log pi_c + log N(mu; .))."""
    mix = vae.prior.mixture
    lj = component_log_joint(mix, mu)
    gamma = np.exp(lj - logsumexp(lj, axis=-1, keepdims=True))
    dl = gamma * (dgamma - np.sum(gamma * dgamma, axis=-1, keepdims=True))  # d / d lj
    diff = mu[:, None, :] - mix.means
    inv_var = 1.0 / mix.stds ** 2
    dmu = -np.sum(dl[..., None] * diff * inv_var, axis=1)
    dmeans = np.sum(dl[..., None] * diff * inv_var, axis=0)
    dstds = np.sum(dl[..., None] * (diff ** 2 * inv_var / mix.stds - 1.0 / mix.stds), axis=0)
    grads = vae.prior.chain(f"{prefix}.prior", dl.sum(axis=0), dmeans, dstds,
                            weights=mix.weights)
    return dmu, grads


def cross_loss_gradients(row_vae: SideVae, col_vae: SideVae, x_rows, x_cols, base_pmf,
                         i_orig: Optional[float] = None, weight: float = 1.0):
    """Value of ``weight * J3`` and its exact gradient w.r.t. both encoders and
    priors, with memberships taken at the unscaled posterior means."""
    P = np.asarray(base_pmf, dtype=np.float64)
    if i_orig is None:
        i_orig = mutual_information_of_pmf(P)
    renc = encoder_pass(row_vae, x_rows)
    cenc = encoder_pass(col_vae, x_cols)
    gr = responsibilities(row_vae.prior.mixture, renc.mu)
    gc = responsibilities(col_vae.prior.mixture, cenc.mu)
    i_hat, pmf = coclustered_mutual_information(gr, gc, P)
    value = cross_loss(i_hat, i_orig)
    raw = 1.0 - i_hat / i_orig if i_orig > EPS_MI else 0.0
    if i_orig <= EPS_MI or raw < 0.0 or raw > 1.0:
        return weight * value, {}
    G = _mi_grad_table(pmf.table) * (-weight / i_orig)
    d_gr = (P @ gc) @ G.T
    d_gc = (P.T @ gr) @ G
    dmu_r, grads = _responsibility_backward(row_vae, renc.mu, d_gr, row_vae.side)
    dmu_c, cgrads = _responsibility_backward(col_vae, cenc.mu, d_gc, col_vae.side)
    grads.update(cgrads)
    grads.update(encoder_backward(row_vae, renc, dmu_r, np.zeros_like(dmu_r)))
    grads.update(encoder_backward(col_vae, cenc, dmu_c, np.zeros_like(dmu_c)))
    return weight * value, grads
