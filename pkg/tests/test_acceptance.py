"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line."""
import functools
import itertools
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from srvcc import trainer
from srvcc.data import SyntheticSpec, synth_checkerboard
from srvcc.gmm import GaussianMixture, MixturePrior
from srvcc.info import (coclustered_mutual_information, data_pmf,
                        empirical_mutual_information, mutual_information_of_pmf)
from srvcc.metrics import accuracy_hungarian, nmi
from srvcc.info import build_critic
from srvcc.side import build_side_vae, encode, side_forward
from srvcc.trainer import (TrainConfig, build_models, cell_step, fit, mi_step, prepare_data,
                           side_step)

from conftest import fd_rel_error
from test_info import brute_mi, brute_table, random_simplex
from toy import overlap, toy_estimates, single


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


# 1. gradient correctness ---------------------------------------------------

def _fd_case(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 5))
    config = TrainConfig(g=2, m=2, M=2, row_latent=2, col_latent=2, joint_latent=2,
                         row_hidden=(3,), col_hidden=(3,), joint_hidden=(3,), K=K, dreg=False,
                         critic="mlp" if seed % 2 else "bilinear", temperature=0.5)
    n = d = 4
    X = rng.standard_normal((n, d))
    mask = rng.random((n, d)) > 0.2
    mask[np.arange(n), rng.integers(0, d, n)] = True
    data = prepare_data(np.where(mask, X, 0.0), mask, config)
    models = build_models(n, d, config, rng)
    critic = lambda x_dim: build_critic(x_dim, 2, rng, config.critic, 0.5, hidden=(3,))
    models.row_critic, models.col_critic, models.joint_critic = critic(d), critic(n), critic(1)
    for vae, x in ((models.row, data.values), (models.col, data.values.T)):
        # components sit on two posterior means so memberships carry information
        mu = encode(vae, x).mu_raw
        w = rng.random(2) + 0.2
        vae.prior = MixturePrior.from_mixture(GaussianMixture(
            w / w.sum(), mu[rng.choice(len(mu), 2, replace=False)],
            np.tile(mu.std(0) + 0.05, (2, 1)) * rng.uniform(0.7, 1.3, (2, 2))))
        vae.scale = rng.uniform(1.0, 3.0, 2)
    return config, data, models


def _term(name, config, data, models):
    side = {"row": (models.row, models.row_critic, data.values, data.mask),
            "column": (models.col, models.col_critic, data.values.T, data.mask.T)}
    kind, _, what = name.partition(" ")
    if kind in side:
        vae, critic, x, mask = side[kind]
        lam = {"ELBO": (0.0, 1.0, 0.0), "InfoNCE": (0.0, 0.0, 1.0),
               "regularizer": (1.0, 0.0, 0.0)}[what]
        return lambda r: side_step(vae, critic, x, mask, x.shape[0] + 3, config, r, *lam)
    if kind == "joint":
        lam7, lam8 = (1.0, 0.0) if what == "ELBO" else (0.0, 1.0)
        cfg = TrainConfig(**{**config.to_dict(), "lambda7": lam7, "lambda8": lam8})
        cr, cc = np.nonzero(data.mask)
        return lambda r: cell_step(models, data, cr, cc, cfg, r)
    return lambda r: mi_step(models, data, config, r)


TERMS = ("row ELBO", "row InfoNCE", "row regularizer", "column ELBO", "column InfoNCE",
         "column regularizer", "joint ELBO", "joint InfoNCE", "cross-loss J3")


def _total(out):
    head = out[0]
    return head[-1] if isinstance(head, tuple) else head


def test_criterion_1_gradients_match_finite_differences(report):
    start = time.time()
    worst = {t: 0.0 for t in TERMS}
    for seed in range(50):
        config, data, models = _fd_case(seed)
        params = models.parameters()
        for name in TERMS:
            step = _term(name, config, data, models)
            noise_seed = 1000 + seed
            _, grads = step(np.random.default_rng(noise_seed))
            if not grads:
                continue
            loss = lambda: float(_total(step(np.random.default_rng(noise_seed))))
            err = fd_rel_error(loss, params, grads, sorted(grads))
            worst[name] = max(worst[name], err)
    elapsed = time.time() - start
    ok = max(worst.values()) <= 1e-5 and elapsed <= 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"50 seeds, worst relative error: {detail}; {elapsed:.0f}s")


# 2. estimator unbiasedness and variance ------------------------------------

def test_criterion_2_estimators_unbiased_and_lower_variance(report):
    start = time.time()
    rng = np.random.default_rng(0)
    enc_var = prior_var = overlaps = 0
    for _ in range(20):
        mu = rng.normal()
        x = mu + rng.normal() * np.sqrt(2.0)
        K = int(rng.integers(2, 9))
        m = (x + mu) / 2 + rng.normal(0, 0.25)
        d, n, g, gn, _ = toy_estimates(m, np.sqrt(2 / 3), single(mu, 1.0), x, K, 100_000, rng)
        enc_var += bool(np.all(d.var(0) <= n.var(0)))
        prior_var += bool(np.all(g.var(0) <= gn.var(0)))
        overlaps += overlap(d, n) + overlap(g, gn)
    elapsed = time.time() - start
    ok = overlaps == 40 and enc_var >= 18 and prior_var >= 18 and elapsed <= 300
    report(2, ok, f"mean overlaps {overlaps}/40, DREG var <= naive {enc_var}/20, "
                  f"GDREG var <= naive {prior_var}/20; {elapsed:.0f}s")


# 3. scale trick -------------------------------------------------------------

def test_criterion_3_kl_ignores_scale(report):
    same_kl = changed = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vae = build_side_vae("row", 4, 3, 3, rng, hidden=(5,))
        x = rng.standard_normal((6, 4))
        eps = rng.standard_normal((6, 4, 3))
        base = side_forward(vae, x, eps)
        vae.scale = rng.uniform(1.5, 50.0, 3)
        scaled = side_forward(vae, x, eps)
        same_kl += bool(np.array_equal(base.kl, scaled.kl))
        changed += bool(np.all(base.log_lik != scaled.log_lik))
    report(3, same_kl == 20 and changed == 20,
           f"KL bit-identical {same_kl}/20, reconstruction changed {changed}/20")


# 4. mutual information ------------------------------------------------------

def test_criterion_4_mutual_information(report):
    rng = np.random.default_rng(0)
    oracle_err = 0.0
    for _ in range(20):
        P = rng.random((6, 5))
        P /= P.sum()
        gr, gc = random_simplex(rng, 6, 3), random_simplex(rng, 5, 2)
        i_hat, pmf = coclustered_mutual_information(gr, gc, P)
        T = brute_table(gr, gc, P)
        oracle_err = max(oracle_err, abs(i_hat - brute_mi(T)), np.abs(pmf.table - T).max())
    dpi_gap = -np.inf
    for _ in range(1000):
        X = rng.random((6, 5)) ** 2
        P = data_pmf(X)
        g, m = rng.integers(1, 5, 2)
        i_hat, _ = coclustered_mutual_information(random_simplex(rng, 6, g),
                                                  random_simplex(rng, 5, m), P)
        dpi_gap = max(dpi_gap, i_hat - mutual_information_of_pmf(P))
    u, v = rng.random(5) + 0.1, rng.random(7) + 0.1
    rank1_pos = abs(mutual_information_of_pmf(np.outer(u, v) / np.outer(u, v).sum()))
    u[0] = 0.0
    rank1_data = abs(empirical_mutual_information(np.outer(u, v)))
    ident = abs(empirical_mutual_information(np.eye(2)) - math.log(2))
    ok = oracle_err <= 1e-12 and dpi_gap <= 1e-9 and max(rank1_pos, rank1_data) <= 1e-12 \
        and ident <= 1e-12
    report(4, ok, f"oracle error {oracle_err:.1e}, max DPI gap {dpi_gap:.1e} over 1000, "
                  f"rank-1 MI {max(rank1_pos, rank1_data):.1e}, identity error {ident:.1e}")


# 5 and 6. synthetic recovery and ablations ----------------------------------

SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def _run(noise, missing, seed, **kw):
    mat, rl, cl = synth_checkerboard(SyntheticSpec(200, 100, 4, 3, noise_level=noise,
                                                   missing_fraction=missing, seed=seed))
    with threadpool_limits(1):
        res = fit(mat.masked_values(), mat.mask, TrainConfig(g=4, m=3, seed=seed, **kw))
    return accuracy_hungarian(res.row_labels, rl), accuracy_hungarian(res.col_labels, cl)


def _median(noise, missing, **kw):
    accs = np.array([_run(noise, missing, s, **kw) for s in SEEDS])
    return np.median(accs[:, 0]), np.median(accs[:, 1]), accs


def test_criterion_5_checkerboard_recovery(report):
    start = time.time()
    r3, c3, a3 = _median(0.3, 0.0)
    r7, _, a7 = _median(0.7, 0.3)
    elapsed = time.time() - start
    ok = r3 >= 0.95 and c3 >= 0.95 and r7 >= 0.70 and elapsed <= 600
    report(5, ok, f"noise 0.3: median row ACC {r3:.3f}, column ACC {c3:.3f}; "
                  f"noise 0.7 + 30% missing: median row ACC {r7:.3f} "
                  f"(per seed {np.round(a7[:, 0], 3).tolist()}); {elapsed:.0f}s")


def test_criterion_6_ablation_ordering(report):
    full = _median(0.3, 0.0)
    cascade = _median(0.3, 0.0, mode="simple_cascade")
    feature = _median(0.3, 0.0, mode="feature_only")
    plain = _median(0.3, 0.0, dreg=False)
    ok = all(full[k] >= cascade[k] and full[k] >= feature[k] and full[k] >= plain[k]
             for k in (0, 1))
    fmt = lambda r: f"{r[0]:.3f}/{r[1]:.3f}"
    report(6, ok, f"median row/column ACC: two_stage {fmt(full)}, simple_cascade "
                  f"{fmt(cascade)}, feature_only {fmt(feature)}, two_stage without DREG "
                  f"{fmt(plain)}")


# 7. training sanity ---------------------------------------------------------

def test_criterion_7_training_sanity(report, monkeypatch):
    mat, _, _ = synth_checkerboard(SyntheticSpec(200, 100, 4, 3, noise_level=0.3, seed=0))
    config = TrainConfig(g=4, m=3, seed=0, pretrain_epochs=0, max_epochs=30,
                         early_stopping=False)
    steps = []
    real_epoch = trainer.train_epoch

    def recording(*args, **kwargs):
        out = real_epoch(*args, **kwargs)
        steps.extend(out[1])
        return out

    monkeypatch.setattr(trainer, "train_epoch", recording)
    with threadpool_limits(1):
        a = fit(mat.masked_values(), mat.mask, config)
        b = fit(mat.masked_values(), mat.mask, config)
    first, last = a.history[0].J_total, a.history[29].J_total
    gap = max(abs(s.J_total - s.weighted_sum()) for s in steps + a.history)
    same = [h.as_dict() for h in a.history] == [h.as_dict() for h in b.history] \
        and np.array_equal(a.gamma_r, b.gamma_r) and np.array_equal(a.gamma_c, b.gamma_c) \
        and all(np.array_equal(u, v) for u, v in zip(a.models.parameters().values(),
                                                    b.models.parameters().values()))
    ok = last < 0.9 * first and gap <= 1e-10 and same
    report(7, ok, f"J_total epoch 1 {first:.1f} -> epoch 30 {last:.1f} "
                  f"(ratio {last / first:.3f}); additivity gap {gap:.1e} over "
                  f"{len(steps) // 2} steps per run; bit-reproducible {same}")


# 8. metrics -----------------------------------------------------------------

def _oracle_acc(pred, true):
    best = 0
    for perm in itertools.permutations(range(3)):
        best = max(best, sum(perm[p] == t for p, t in zip(pred, true)))
    return best / len(pred)


def _oracle_nmi(pred, true):
    n = len(pred)

    def entropy(labels):
        return -sum(c / n * math.log(c / n) for c in (labels.count(v) for v in set(labels)))

    hp, ht = entropy(list(pred)), entropy(list(true))
    if hp == 0 or ht == 0:
        return 0.0
    joint = {}
    for p, t in zip(pred, true):
        joint[p, t] = joint.get((p, t), 0) + 1
    mi = sum(c / n * math.log((c / n) / ((pred.count(p) / n) * (true.count(t) / n)))
             for (p, t), c in joint.items())
    return mi / ((hp + ht) / 2)


def _tables(total):
    """Every 3 x 3 contingency table with the given total, as a label pair."""
    for cut in itertools.combinations(range(total + 8), 8):
        counts = np.diff([-1, *cut, total + 8]) - 1
        pred = tuple(np.repeat(np.arange(9) // 3, counts).tolist())
        true = tuple(np.repeat(np.arange(9) % 3, counts).tolist())
        yield pred, true


def test_criterion_8_metrics_exhaustive(report):
    start = time.time()
    checked = worst = 0.0
    pairs = 0
    relabel_ok = True
    cases = itertools.chain(
        (pt for L in range(1, 6)
         for pt in itertools.product(itertools.product(range(3), repeat=L), repeat=2)),
        (pt for L in range(6, 9) for pt in _tables(L)))
    for pred, true in cases:
        pairs += 1
        acc, v = accuracy_hungarian(pred, true), nmi(pred, true)
        worst = max(worst, abs(acc - _oracle_acc(pred, true)), abs(v - _oracle_nmi(pred, true)))
    relabelled = 0
    for L in range(1, 9):
        for pred, true in _tables(L):
            acc, v = accuracy_hungarian(pred, true), nmi(pred, true)
            for perm in list(itertools.permutations(range(3)))[1:]:
                q = [perm[p] for p in pred]
                relabelled += 1
                if accuracy_hungarian(q, true) != acc or abs(nmi(q, true) - v) > 1e-12:
                    relabel_ok = False
    elapsed = time.time() - start
    ok = worst <= 1e-12 and relabel_ok
    report(8, ok, f"{pairs} label pairs (all pairs to length 5, every contingency table to "
                  f"length 8), max oracle error {worst:.1e}; {relabelled} relabelings "
                  f"invariant {relabel_ok}; {elapsed:.0f}s")
