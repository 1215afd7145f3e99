"""Diagonal Gaussian mixtures used as latent priors.

``GaussianMixture`` is the plain mathematical object (weights, means, stds).
``MixturePrior`` is its trainable form: unconstrained logits, means and raw
stds mapped through ``softplus(raw) + STD_FLOOR``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import DimensionError, NumericalError
from .nn import logsumexp, sigmoid, softplus

LOG_2PI = np.log(2.0 * np.pi)
STD_FLOOR = 1e-4


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray    # (K, L)
    stds: np.ndarray     # (K, L)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=np.float64))
        K = self.weights.size
        if self.means.shape[0] != K or self.stds.shape != self.means.shape:
            raise DimensionError(
                f"mixture shapes disagree: weights {self.weights.shape}, "
                f"means {self.means.shape}, stds {self.stds.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(self.stds <= 0):
            raise ValueError("mixture stds must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass
class MixtureSample:
    z: np.ndarray
    component: int
    epsilon: np.ndarray


def _check_dim(gmm, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != gmm.dim:
        raise DimensionError(f"latent dimension {z.shape[-1]} != mixture dimension {gmm.dim}")
    return z


def component_log_joint(gmm: GaussianMixture, z) -> np.ndarray:
    """log pi_k + log N(z; mu_k, sigma_k) for every component, shape (..., K)."""
    z = _check_dim(gmm, z)
    diff = (z[..., None, :] - gmm.means) / gmm.stds
    log_norm = -0.5 * np.sum(diff * diff, axis=-1) - np.sum(np.log(gmm.stds), axis=-1) \
        - 0.5 * gmm.dim * LOG_2PI
    return gmm.log_weights + log_norm


def log_density(gmm: GaussianMixture, z) -> np.ndarray:
    return logsumexp(component_log_joint(gmm, z), axis=-1)


def responsibilities(gmm: GaussianMixture, z) -> np.ndarray:
    lj = component_log_joint(gmm, z)
    top = np.max(lj, axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise NumericalError("every component has zero density at some point")
    w = np.exp(lj - top)
    return w / w.sum(axis=-1, keepdims=True)


def sample(gmm: GaussianMixture, rng) -> MixtureSample:
    c = int(rng.choice(gmm.n_components, p=gmm.weights))
    eps = rng.standard_normal(gmm.dim)
    return MixtureSample(gmm.means[c] + gmm.stds[c] * eps, c, eps)


def inverse_reparam(gmm: GaussianMixture, z, component) -> np.ndarray:
    z = _check_dim(gmm, z)
    return (z - gmm.means[component]) / gmm.stds[component]


def log_density_grads(gmm: GaussianMixture, z):
    """Gradients of log p(z) w.r.t. z, the log-weights, means and stds.

    Returns ``(dz, dlogw, dmeans, dstds)`` with shapes ``(..., L)``,
    ``(..., K)``, ``(..., K, L)`` and ``(..., K, L)``; nothing is summed.
    """
    z = _check_dim(gmm, z)
    gamma = responsibilities(gmm, z)
    diff = z[..., None, :] - gmm.means
    inv_var = 1.0 / gmm.stds ** 2
    dmeans = gamma[..., None] * diff * inv_var
    dstds = gamma[..., None] * (diff * diff * inv_var / gmm.stds - 1.0 / gmm.stds)
    dz = -np.sum(dmeans, axis=-2)
    return dz, gamma, dmeans, dstds


def fit_em(points, K: int, seed: int = 0, *, max_iter: int = 200, tol: float = 1e-8,
           n_init: int = 3, std_floor: float = STD_FLOOR, return_history: bool = False):
    """Diagonal-covariance EM with k-means++ seeding; best of ``n_init`` runs.

    A component that loses all its mass is re-seeded at the point that the
    current mixture explains worst.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, L = X.shape
    if np.unique(X, axis=0).shape[0] < K:
        raise ValueError(f"need at least {K} distinct points to fit {K} components")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        gmm, history, reseeds = _em_run(X, K, rng, max_iter, tol, std_floor)
        if best is None or history[-1] > best[1][-1]:
            best = (gmm, history, reseeds)
    gmm, history, reseeds = best
    if return_history:
        return gmm, history, reseeds
    return gmm


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def _em_run(X, K, rng, max_iter, tol, std_floor):
    n, L = X.shape
    spread = np.maximum(X.std(axis=0), std_floor)
    gmm = GaussianMixture(np.full(K, 1.0 / K), _kmeanspp(X, K, rng),
                          np.tile(spread, (K, 1)))
    history = []
    reseeds = 0
    for _ in range(max_iter):
        lj = component_log_joint(gmm, X)
        ll = logsumexp(lj, axis=1)
        history.append(float(ll.sum()))
        if len(history) > 1 and history[-1] - history[-2] < tol * max(1.0, abs(history[-2])):
            break
        gamma = np.exp(lj - ll[:, None])
        nk = gamma.sum(axis=0)
        means = gmm.means.copy()
        stds = gmm.stds.copy()
        for k in range(K):
            if nk[k] < 1e-10:
                worst = int(np.argmin(ll))
                means[k] = X[worst]
                stds[k] = spread
                nk[k] = 1.0
                reseeds += 1
                continue
            means[k] = gamma[:, k] @ X / nk[k]
            var = gamma[:, k] @ (X - means[k]) ** 2 / nk[k]
            stds[k] = np.maximum(np.sqrt(var), std_floor)
        weights = nk / nk.sum()
        gmm = GaussianMixture(weights, means, stds)
    return gmm, history, reseeds


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class MixturePrior:
    """Trainable mixture: weights = softmax(logits), stds = softplus(raw) + floor."""

    logits: np.ndarray
    means: np.ndarray
    std_raw: np.ndarray

    @classmethod
    def from_mixture(cls, gmm: GaussianMixture) -> "MixturePrior":
        with np.errstate(divide="ignore"):
            logits = np.log(np.maximum(gmm.weights, 1e-300))
        raw = inverse_softplus(np.maximum(gmm.stds - STD_FLOOR, 1e-12))
        return cls(logits - logits.max(), gmm.means.copy(), raw)

    @classmethod
    def standard_normal(cls, dim: int) -> "MixturePrior":
        return cls.from_mixture(GaussianMixture([1.0], np.zeros((1, dim)), np.ones((1, dim))))

    @property
    def mixture(self) -> GaussianMixture:
        w = np.exp(self.logits - logsumexp(self.logits))
        w = w / w.sum()
        return GaussianMixture(w, self.means, softplus(self.std_raw) + STD_FLOOR)

    def parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.logits": self.logits, f"{prefix}.means": self.means,
                f"{prefix}.std_raw": self.std_raw}

    def chain(self, prefix: str, dlogw=None, dmeans=None, dstds=None,
              weights: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Map gradients w.r.t. (log-weights, means, stds) to raw parameters.

        ``dlogw`` is the gradient w.r.t. log pi_k treated as free coordinates;
        the softmax chain rule is applied here.
        """
        out = {}
        if dlogw is not None:
            pi = self.mixture.weights if weights is None else weights
            out[f"{prefix}.logits"] = dlogw - pi * np.sum(dlogw)
        if dmeans is not None:
            out[f"{prefix}.means"] = dmeans
        if dstds is not None:
            out[f"{prefix}.std_raw"] = dstds * sigmoid(self.std_raw)
        return out

    def copy(self) -> "MixturePrior":
        return MixturePrior(self.logits.copy(), self.means.copy(), self.std_raw.copy())
