"""Training loop: pretraining, mixture initialization, per-epoch scale updates,
the row / column / cell mini-batch loops and the cross-loss step."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import info
from .errors import ConfigError, DimensionError, NumericalError
from .gmm import GaussianMixture, MixturePrior, fit_em, responsibilities
from .joint import (JointVae, build_joint_vae, draw_noise, joint_decode, joint_encode,
                    joint_forward, joint_gradients, joint_responsibilities, latent_backward)
from .estimators import iwae_bound_loss
from .export import feature_only_row_embedding
from .nn import OptimizerState, adam_step, add_grads, mlp_forward
from .side import (SideVae, build_side_vae, cluster_assign, decode_mean, encode,
                   encoder_backward, side_forward, side_gradients, update_scale)

log = logging.getLogger(__name__)

MODES = ("two_stage", "simple_cascade", "feature_only")
MI_BASES = ("data", "uniform")


@dataclass
class TrainConfig:
    g: int = 2
    m: int = 2
    M: Optional[int] = None
    row_latent: int = 10
    col_latent: int = 10
    joint_latent: int = 4
    row_hidden: Tuple[int, ...] = (64,)
    col_hidden: Tuple[int, ...] = (64,)
    joint_hidden: Tuple[int, ...] = (32,)
    lambda1: float = 1e-4
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1e-4
    lambda5: float = 1.0
    lambda6: float = 0.1
    lambda7: float = 1.0
    lambda8: float = 0.1
    lambda9: float = 1.0
    K: int = 5
    row_batch: int = 32
    col_batch: int = 32
    cell_batch: int = 256
    cells_per_epoch: int = 1024
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 60
    pretrain_epochs: int = 20
    early_stopping: bool = True
    min_epochs: int = 20
    patience: int = 10
    stop_tol: float = 1e-4
    tau: float = 1.0
    f_max: float = 100.0
    mode: str = "two_stage"
    dreg: bool = True
    attribution: str = "soft"
    seed: int = 0
    row_likelihood: str = "gaussian"
    col_likelihood: str = "gaussian"
    joint_likelihood: str = "gaussian"
    standardize: bool = True
    mi_base: str = "data"
    mi_subsample_rows: int = 512
    mi_subsample_cols: int = 512
    critic: str = "bilinear"
    temperature: float = 0.1
    em_std_floor: float = 1e-2
    em_cells: int = 2000
    result_cells: int = 1000
    holdout: float = 0.0

    def __post_init__(self):
        for name in ("row_hidden", "col_hidden", "joint_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if self.M is None:
            self.M = self.g * self.m
        for name in ("g", "m", "M", "row_latent", "col_latent", "joint_latent", "K",
                     "row_batch", "col_batch", "cell_batch", "cells_per_epoch",
                     "mi_subsample_rows", "mi_subsample_cols", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for k in range(1, 10):
            if self.lam(k) < 0:
                raise ConfigError(f"lambda{k} must be nonnegative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mi_base not in MI_BASES:
            raise ConfigError(f"mi_base must be one of {MI_BASES}")
        if self.attribution not in ("soft", "argmax", "sample"):
            raise ConfigError(f"unknown attribution {self.attribution!r}")
        if self.critic not in ("bilinear", "mlp"):
            raise ConfigError(f"unknown critic {self.critic!r}")
        if self.lr <= 0 or self.temperature <= 0 or self.tau <= 0:
            raise ConfigError("lr, temperature and tau must be positive")
        if self.f_max < 1:
            raise ConfigError("f_max must be >= 1")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout must lie in [0, 1)")

    def lam(self, k: int) -> float:
        return float(getattr(self, f"lambda{k}"))

    @property
    def lambdas(self) -> Tuple[float, ...]:
        return tuple(self.lam(k) for k in range(1, 10))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("row_hidden", "col_hidden", "joint_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PARTS = ("reg_row", "J_row", "c_row", "reg_col", "J_col", "c_col", "J_joint", "c_joint", "J_MI")
# sign with which each raw part enters the objective (contrastive terms are maximised)
SIGNS = (1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0)


@dataclass
class LossBreakdown:
    """Raw objective parts, the weights they were combined with and the total
    as accumulated by the gradient routines."""

    lambdas: Tuple[float, ...]
    reg_row: float = 0.0
    J_row: float = 0.0
    c_row: float = 0.0
    reg_col: float = 0.0
    J_col: float = 0.0
    c_col: float = 0.0
    J_joint: float = 0.0
    c_joint: float = 0.0
    J_MI: float = 0.0
    J_total: float = 0.0

    def parts(self) -> Tuple[float, ...]:
        return tuple(getattr(self, p) for p in PARTS)

    def weighted_sum(self) -> float:
        return float(sum(l * s * v for l, s, v in zip(self.lambdas, SIGNS, self.parts())))

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        out = LossBreakdown(self.lambdas)
        for p in PARTS + ("J_total",):
            setattr(out, p, getattr(self, p) + getattr(other, p))
        return out

    def as_dict(self) -> dict:
        return {p: getattr(self, p) for p in PARTS + ("J_total",)}


def aggregate(steps: List[LossBreakdown], lambdas) -> LossBreakdown:
    out = LossBreakdown(tuple(lambdas))
    for s in steps:
        out = out + s
    return out


@dataclass
class Models:
    row: Optional[SideVae]
    col: SideVae
    joint: Optional[JointVae] = None
    row_critic: Optional[info.InfoNceCritic] = None
    col_critic: Optional[info.InfoNceCritic] = None
    joint_critic: Optional[info.InfoNceCritic] = None

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        if self.row is not None:
            out.update(self.row.parameters("row"))
        out.update(self.col.parameters("column"))
        if self.joint is not None:
            out.update(self.joint.parameters("joint"))
        for name, critic in (("row", self.row_critic), ("column", self.col_critic),
                             ("joint", self.joint_critic)):
            if critic is not None:
                out.update(critic.parameters(f"critic.{name}"))
        return out

    def copy(self) -> "Models":
        return copy.deepcopy(self)


@dataclass
class TrainData:
    """Matrix as the networks see it: standardized, missing entries filled."""

    values: np.ndarray        # n x d, filled
    mask: np.ndarray          # training mask
    offset: float
    scale: float
    base_pmf: np.ndarray
    i_orig: float

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    def to_original(self, v):
        return np.asarray(v) * self.scale + self.offset


def network_inputs(values, mask, offset: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Standardized matrix with missing entries set to the observed mean."""
    X = np.asarray(values, dtype=np.float64)
    fill = X[mask].mean() if mask.any() else offset
    return np.where(mask, (X - offset) / scale, (fill - offset) / scale)


def prepare_data(values, mask, config: TrainConfig) -> TrainData:
    X = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if X.ndim != 2 or X.shape != mask.shape:
        raise DimensionError("values and mask must be equally shaped 2-D arrays")
    if not mask.any():
        raise ValueError("matrix has no observed entries")
    obs = X[mask]
    if not np.all(np.isfinite(obs)):
        raise ValueError("observed entries must be finite")
    offset, scale = 0.0, 1.0
    gaussian = "bernoulli" not in (config.row_likelihood, config.col_likelihood,
                                   config.joint_likelihood)
    if config.standardize and gaussian:
        offset = float(obs.mean())
        scale = float(obs.std()) or 1.0
    filled = network_inputs(X, mask, offset, scale)
    if config.mi_base == "uniform":
        pmf = info.uniform_pmf(X.shape)
    else:
        pmf = info.data_pmf(np.where(mask, X, 0.0), mask)
    return TrainData(filled, mask, offset, scale, pmf, info.mutual_information_of_pmf(pmf))


def build_models(n: int, d: int, config: TrainConfig, rng) -> Models:
    row = None
    if config.mode != "feature_only":
        row = build_side_vae("row", d, config.row_latent, config.g, rng,
                             config.row_hidden, config.row_likelihood)
    col = build_side_vae("column", n, config.col_latent, config.m, rng,
                         config.col_hidden, config.col_likelihood)
    models = Models(row, col)
    crit = lambda x_dim, z_dim: info.build_critic(x_dim, z_dim, rng, config.critic,
                                                  config.temperature)
    if row is not None:
        models.row_critic = crit(d, config.row_latent)
    models.col_critic = crit(n, config.col_latent)
    if config.mode == "two_stage":
        models.joint = build_joint_vae(config.row_latent, config.col_latent,
                                       config.joint_latent, config.M, rng,
                                       config.joint_hidden, config.joint_likelihood)
        models.joint_critic = crit(1, config.joint_latent)
    return models


def _apply(models: Models, grads: Dict[str, np.ndarray], opt: OptimizerState) -> OptimizerState:
    params = models.parameters()
    new_params, opt = adam_step(params, grads, opt)
    for k in grads:
        params[k][...] = new_params[k]
    return opt


def _batches(n: int, size: int, rng) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[s:s + size] for s in range(0, n, size)]


def _estimator(config):
    return "dreg" if config.dreg else "naive"


def _check_finite(name, value):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {name} term")


def side_step(vae: SideVae, critic, x, mask, n_total: int, config: TrainConfig, rng,
              lam_reg: float, lam_elbo: float, lam_nce: float, use_prior_grads=True):
    """Loss and gradients for one side mini-batch; returns (breakdown parts, grads)."""
    prefix = vae.side
    B = x.shape[0]
    eps = rng.standard_normal((B, config.K, vae.latent_dim))
    fwd = side_forward(vae, x, eps, mask)
    elbo_w, grads = side_gradients(vae, fwd, estimator=_estimator(config),
                                   attribution=config.attribution, rng=rng,
                                   weight=lam_elbo, prefix=prefix)
    J = float(np.sum(iwae_bound_loss(fwd.log_weights)))
    _check_finite(f"{prefix} ELBO", J)
    if not use_prior_grads:
        grads = {k: v for k, v in grads.items() if ".prior." not in k}
    frac = B / n_total
    reg = frac * vae.squared_norm()
    for k, v in vae.network_parameters(prefix).items():
        grads[k] = grads[k] + 2.0 * lam_reg * frac * v
    c = 0.0
    total = lam_reg * reg + elbo_w
    if critic is not None and B >= 2 and lam_nce > 0:
        nce_w, cgrads, dz = info.info_nce_grads(critic, x, fwd.z_kl[:, 0, :],
                                                f"critic.{prefix}", weight=lam_nce)
        c = -nce_w / lam_nce
        _check_finite(f"{prefix} contrastive", c)
        grads.update(cgrads)
        add_grads(grads, encoder_backward(vae, fwd.enc, dz, dz * fwd.eps[:, 0, :], prefix))
        total += nce_w
    return (reg, J, c, total), grads


def cell_step(models: Models, data: TrainData, rows, cols, config: TrainConfig, rng):
    jv, rv, cv = models.joint, models.row, models.col
    C = rows.size
    values = data.values[rows, cols]
    present = data.mask[rows, cols]
    eps_r, eps_c, eta = draw_noise(jv, rv, cv, C, config.K, rng)
    fwd = joint_forward(jv, rv, cv, data.values[rows], data.values[:, cols].T, values,
                        present, eps_r, eps_c, eta)
    lam7, lam8 = config.lam(7), config.lam(8)
    J_w, grads = joint_gradients(jv, rv, cv, fwd, estimator=_estimator(config),
                                 attribution=config.attribution, rng=rng, weight=lam7)
    J = float(np.sum(iwae_bound_loss(fwd.log_weights)))
    _check_finite("joint ELBO", J)
    c, total = 0.0, J_w
    if lam8 > 0 and C >= 2:
        nce_w, cgrads, dz = info.info_nce_grads(models.joint_critic, values[:, None],
                                                fwd.z_rc[:, 0, :], "critic.joint", weight=lam8)
        c = -nce_w / lam8
        _check_finite("joint contrastive", c)
        grads.update(cgrads)
        dmu = np.zeros_like(fwd.z_rc)
        dsig = np.zeros_like(fwd.z_rc)
        dmu[:, 0] = dz
        dsig[:, 0] = dz * fwd.eta[:, 0]
        add_grads(grads, latent_backward(jv, rv, cv, fwd, dmu, dsig))
        total += nce_w
    return (J, c, total), grads


def mi_step(models: Models, data: TrainData, config: TrainConfig, rng):
    n, d = data.n, data.d
    rows = np.sort(rng.choice(n, config.mi_subsample_rows, replace=False)) \
        if n > config.mi_subsample_rows else np.arange(n)
    cols = np.sort(rng.choice(d, config.mi_subsample_cols, replace=False)) \
        if d > config.mi_subsample_cols else np.arange(d)
    P = data.base_pmf[np.ix_(rows, cols)]
    if P.sum() <= 0:
        return 0.0, {}
    P = P / P.sum()
    i_orig = info.mutual_information_of_pmf(P)
    if i_orig <= info.EPS_MI:
        return 0.0, {}
    X = data.values
    val, grads = info.cross_loss_gradients(models.row, models.col, X[rows], X[:, cols].T, P,
                                           i_orig, weight=config.lam(9))
    return val / config.lam(9), grads


def _cell_sample(mask, count, rng):
    obs = np.flatnonzero(mask)
    if count >= obs.size:
        pick = rng.permutation(obs)
    else:
        pick = rng.choice(obs, count, replace=False)
    return np.unravel_index(pick, mask.shape)


def train_epoch(models: Models, data: TrainData, config: TrainConfig, rng,
                opt: OptimizerState, *, pretrain: bool = False):
    """One pass over rows, columns, sampled cells and the cross-loss.

    Returns ``(models, per-step LossBreakdown list, optimizer state)``; models
    are updated in place. ``pretrain`` restricts the pass to the side ELBOs
    with the priors held fixed.
    """
    lam = config.lambdas
    steps: List[LossBreakdown] = []
    if not pretrain:
        if models.row is not None:
            models.row.scale = update_scale(models.row, data.values, config.tau, config.f_max)
        models.col.scale = update_scale(models.col, data.values.T, config.tau, config.f_max)

    if models.row is not None:
        for idx in _batches(data.n, config.row_batch, rng):
            (reg, J, c, total), grads = side_step(
                models.row, None if pretrain else models.row_critic, data.values[idx],
                data.mask[idx], data.n, config, rng, lam[0], lam[1],
                0.0 if pretrain else lam[2], use_prior_grads=not pretrain)
            steps.append(LossBreakdown(lam, reg_row=reg, J_row=J, c_row=c, J_total=total))
            opt = _apply(models, grads, opt)

    for idx in _batches(data.d, config.col_batch, rng):
        (reg, J, c, total), grads = side_step(
            models.col, None if pretrain else models.col_critic, data.values[:, idx].T,
            data.mask[:, idx].T, data.d, config, rng, lam[3], lam[4],
            0.0 if pretrain else lam[5], use_prior_grads=not pretrain)
        steps.append(LossBreakdown(lam, reg_col=reg, J_col=J, c_col=c, J_total=total))
        opt = _apply(models, grads, opt)

    if pretrain or config.mode != "two_stage":
        return models, steps, opt

    if lam[6] > 0 or lam[7] > 0:
        rows, cols = _cell_sample(data.mask, config.cells_per_epoch, rng)
        for s in range(0, rows.size, config.cell_batch):
            r, c_ = rows[s:s + config.cell_batch], cols[s:s + config.cell_batch]
            (J, c, total), grads = cell_step(models, data, r, c_, config, rng)
            steps.append(LossBreakdown(lam, J_joint=J, c_joint=c, J_total=total))
            opt = _apply(models, grads, opt)

    if lam[8] > 0 and data.i_orig > info.EPS_MI:
        J3, grads = mi_step(models, data, config, rng)
        _check_finite("cross-loss", J3)
        steps.append(LossBreakdown(lam, J_MI=J3, J_total=lam[8] * J3))
        if grads:
            opt = _apply(models, grads, opt)
    return models, steps, opt


@dataclass
class Batches:
    rows: np.ndarray
    cols: np.ndarray
    cell_rows: np.ndarray
    cell_cols: np.ndarray


def total_loss(models: Models, data: TrainData, batches: Batches, config: TrainConfig,
               rng) -> LossBreakdown:
    """The full weighted objective on the given batches, without updating."""
    lam = config.lambdas
    out = LossBreakdown(lam)
    if models.row is not None:
        (_, out.J_row, out.c_row, _), _ = side_step(
            models.row, models.row_critic, data.values[batches.rows],
            data.mask[batches.rows], batches.rows.size, config, rng, 0.0, 1.0, 1.0)
        out.reg_row = models.row.squared_norm()
    (_, out.J_col, out.c_col, _), _ = side_step(
        models.col, models.col_critic, data.values[:, batches.cols].T,
        data.mask[:, batches.cols].T, batches.cols.size, config, rng, 0.0, 1.0, 1.0)
    out.reg_col = models.col.squared_norm()
    if models.joint is not None:
        (out.J_joint, out.c_joint, _), _ = cell_step(models, data, batches.cell_rows,
                                                     batches.cell_cols, config, rng)
        if data.i_orig > info.EPS_MI:
            out.J_MI = _mi_value(models, data)
    out.J_total = out.weighted_sum()
    for name, v in out.as_dict().items():
        _check_finite(name, v)
    return out


def _mi_value(models: Models, data: TrainData) -> float:
    gr = cluster_assign(models.row, data.values)
    gc = cluster_assign(models.col, data.values.T)
    i_hat, _ = info.coclustered_mutual_information(gr, gc, data.base_pmf)
    return info.cross_loss(i_hat, data.i_orig)


def _em_prior(mu, sigma, k, config, rng):
    """EM on posterior means, widened by the mean posterior variance so each
    component covers the aggregate posterior rather than just the means."""
    gmm, _, r = fit_em(mu, k, seed=int(rng.integers(2 ** 31)),
                       std_floor=config.em_std_floor, return_history=True)
    stds = np.sqrt(gmm.stds ** 2 + np.mean(sigma ** 2, axis=0))
    return MixturePrior.from_mixture(GaussianMixture(gmm.weights, gmm.means, stds)), r


def init_priors(models: Models, data: TrainData, config: TrainConfig, rng) -> int:
    """Fit each mixture prior by EM on the current posteriors; returns the
    number of component re-seeds EM needed."""
    reseeds = 0
    sides = [(models.row, data.values, config.g), (models.col, data.values.T, config.m)]
    for vae, x, k in sides:
        if vae is None:
            continue
        post = encode(vae, x)
        vae.prior, r = _em_prior(post.mu_raw, post.sigma, k, config, rng)
        reseeds += r
    if models.joint is not None:
        rows, cols = _cell_sample(data.mask, config.em_cells, rng)
        zr = models.row.scale * encode(models.row, data.values[rows]).mu_raw
        zc = models.col.scale * encode(models.col, data.values[:, cols].T).mu_raw
        mu_rc, sigma_rc = joint_encode(models.joint, zr, zc)
        models.joint.prior, r = _em_prior(mu_rc, sigma_rc, config.M, config, rng)
        reseeds += r
    if reseeds:
        log.warning("EM re-seeded %d empty components during prior initialization", reseeds)
    return reseeds


def pretrain(models: Models, data: TrainData, config: TrainConfig, rng,
             opt: OptimizerState):
    """Side-only warm-up under a standard-normal prior, then EM initialization.

    Returns ``(models, per-epoch pretraining losses, optimizer state, reseeds)``.
    """
    for vae in (models.row, models.col):
        if vae is not None:
            vae.prior = MixturePrior.standard_normal(vae.latent_dim)
    losses = []
    for _ in range(config.pretrain_epochs):
        models, steps, opt = train_epoch(models, data, config, rng, opt, pretrain=True)
        losses.append(aggregate(steps, config.lambdas).J_total)
    reseeds = init_priors(models, data, config, rng)
    return models, losses, opt, reseeds


@dataclass
class CoClusterResult:
    gamma_r: np.ndarray
    gamma_c: np.ndarray
    cell_index: np.ndarray      # (C, 2) row / column of each evaluated cell
    gamma_rc: np.ndarray        # (C, M)
    row_labels: np.ndarray
    col_labels: np.ndarray
    history: List[LossBreakdown]
    pretrain_history: List[float]
    holdout_rmse: List[float]
    epochs_run: int
    models: Models
    config: TrainConfig
    data: TrainData
    optimizer: Optional[OptimizerState] = None
    row_mixture: Optional[object] = None
    reseeds: int = 0
    rng_state: Optional[dict] = None


def predict_cells(models: Models, data: TrainData, rows, cols) -> np.ndarray:
    """Reconstruction of cells (rows[k], cols[k]) in the original units."""
    if models.joint is not None:
        zr = models.row.scale * encode(models.row, data.values[rows]).mu_raw
        zc = models.col.scale * encode(models.col, data.values[:, cols].T).mu_raw
        mu_rc, _ = joint_encode(models.joint, zr, zc)
        return data.to_original(joint_decode(models.joint, mu_rc, zr, zc))
    if models.row is not None:
        vae, x, idx, pick = models.row, data.values[rows], cols, np.arange(len(rows))
    else:
        vae, x, idx, pick = models.col, data.values[:, cols].T, rows, np.arange(len(cols))
    out, _ = mlp_forward(vae.decoder, vae.scale * encode(vae, x).mu_raw)
    return data.to_original(decode_mean(vae.likelihood, out[pick, idx]))


def _feature_only_rows(models: Models, data: TrainData, config: TrainConfig, rng):
    """Rows as mask-averaged column embeddings, clustered by EM."""
    feats = feature_only_row_embedding(models.col, data.values, data.mask,
                                       GaussianMixture([1.0], np.zeros((1, config.col_latent)),
                                                       np.ones((1, config.col_latent)))).coords
    gmm = fit_em(feats, config.g, seed=int(rng.integers(2 ** 31)),
                 std_floor=config.em_std_floor)
    return responsibilities(gmm, feats), gmm


def _should_stop(totals: List[float], config: TrainConfig) -> bool:
    t = len(totals)
    if not config.early_stopping or t < max(config.min_epochs, config.patience + 1):
        return False
    old, new = totals[-1 - config.patience], totals[-1]
    return (old - new) / max(abs(old), 1e-12) < config.stop_tol


def fit(values, mask=None, config: Optional[TrainConfig] = None,
        on_epoch=None) -> CoClusterResult:
    """Train the co-clustering model on an n x d matrix.

    ``on_epoch(epoch, breakdown, models)`` is called after every main epoch.
    A non-finite loss raises ``NumericalError`` with ``last_good`` set to the
    models at the start of the failing epoch.
    """
    config = TrainConfig() if config is None else config
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise DimensionError("need a nonempty 2-D matrix")
    mask = np.isfinite(values) if mask is None else np.asarray(mask, dtype=bool) & np.isfinite(values)
    n, d = values.shape
    if config.g > n or config.m > d:
        raise ConfigError(f"need g <= n and m <= d, got g={config.g}, m={config.m} "
                          f"for a {n} x {d} matrix")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, train_rng, hold_rng, out_rng = (np.random.default_rng(s) for s in seeds)

    held = np.zeros_like(mask)
    if config.holdout > 0:
        obs = np.flatnonzero(mask)
        pick = hold_rng.choice(obs, int(round(config.holdout * obs.size)), replace=False)
        held.flat[pick] = True
    train_mask = mask & ~held
    data = prepare_data(np.where(mask, values, 0.0), train_mask, config)
    models = build_models(n, d, config, init_rng)
    opt = OptimizerState(config.lr, config.beta1, config.beta2, config.adam_eps)

    models, pre_hist, opt, reseeds = pretrain(models, data, config, train_rng, opt)
    history: List[LossBreakdown] = []
    holdout_rmse: List[float] = []
    hr, hc = np.nonzero(held)
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        last_good = models.copy()
        try:
            models, steps, opt = train_epoch(models, data, config, train_rng, opt)
        except NumericalError as err:
            err.last_good = last_good
            raise
        agg = aggregate(steps, config.lambdas)
        history.append(agg)
        if hr.size:
            pred = predict_cells(models, data, hr, hc)
            holdout_rmse.append(float(np.sqrt(np.mean((pred - values[hr, hc]) ** 2))))
        if on_epoch is not None:
            on_epoch(epoch, agg, models)
        if _should_stop([h.J_total for h in history], config):
            log.info("early stop at epoch %d", epoch)
            break

    row_mix = None
    if models.row is not None:
        gamma_r = cluster_assign(models.row, data.values)
    else:
        gamma_r, row_mix = _feature_only_rows(models, data, config, out_rng)
    gamma_c = cluster_assign(models.col, data.values.T)
    if models.joint is not None:
        rows, cols = _cell_sample(train_mask, config.result_cells, out_rng)
        zr = models.row.scale * encode(models.row, data.values[rows]).mu_raw
        zc = models.col.scale * encode(models.col, data.values[:, cols].T).mu_raw
        mu_rc, _ = joint_encode(models.joint, zr, zc)
        cell_index = np.stack([rows, cols], axis=1)
        gamma_rc = joint_responsibilities(models.joint, mu_rc)
    else:
        cell_index = np.zeros((0, 2), dtype=np.int64)
        gamma_rc = np.zeros((0, config.M))
    return CoClusterResult(gamma_r, gamma_c, cell_index, gamma_rc,
                           np.argmax(gamma_r, axis=1), np.argmax(gamma_c, axis=1),
                           history, pre_hist, holdout_rmse, epoch, models, config, data,
                           opt, row_mix, reseeds, train_rng.bit_generator.state)
