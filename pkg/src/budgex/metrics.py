"""Evaluation and empirical verification of the statistical guarantees.

PEHE against ground truth, normalized AUUC on randomized held-out data,
deviation-bound coverage audits, martingale-CLT normality diagnostics, and
log-log budget scaling fits.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from ._rng import derive_seed, rng_for
from .estimator import (ConfidenceParams, beta_bound, default_sigma,
                        ellipsoid_radius, sandwich_from_arrays)
from .protocol import run_protocol


@dataclass(frozen=True)
class PeheResult:
    value: float
    n_eval: int


def pehe(predict_fn, env, eval_xs):
    """Root-mean-square CATE error over an evaluation sample from P_X."""
    eval_xs = np.atleast_2d(np.asarray(eval_xs, dtype=float))
    if len(eval_xs) == 0:
        raise ValueError("evaluation sample is empty")
    err = predict_fn(eval_xs) - env.true_cate_many(eval_xs)
    return PeheResult(value=float(np.sqrt(np.mean(err**2))), n_eval=len(eval_xs))


def pehe_exact_segments(predict_fn, env):
    """Exact marginal PEHE for segment environments (no sampling error)."""
    xs = env.marginal.support_points()
    probs = np.asarray(env.marginal.probs)
    err = predict_fn(xs) - env.true_cate_many(xs)
    return float(np.sqrt(np.sum(probs * err**2)))


# ---------------------------------------------------------------------------
# Uplift curve / normalized AUUC


@dataclass(frozen=True)
class UpliftCurve:
    gains: np.ndarray  # f(1..N)
    auuc_normalized: float


class ZeroGlobalLiftError(ValueError):
    """f(N) = 0: the normalized area is undefined."""


def uplift_curve(scores, ts, ys, ids=None):
    """Cumulative incremental gain at each rank, then the normalized area.

    Units are sorted by descending score (ties by ascending id). Ranks where
    either cumulative arm is empty contribute f(k) = 0.
    """
    scores = np.asarray(scores, dtype=float)
    ts = np.asarray(ts)
    ys = np.asarray(ys, dtype=float)
    n = len(scores)
    if n < 2:
        raise ValueError("need at least 2 units")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    t_sorted = ts[order]
    y_sorted = ys[order]
    nt = np.cumsum(t_sorted)
    nc = np.cumsum(1 - t_sorted)
    yt = np.cumsum(y_sorted * t_sorted)
    yc = np.cumsum(y_sorted * (1 - t_sorted))
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (yt / nt - yc / nc) * (nt + nc)
    f = np.where((nt == 0) | (nc == 0), 0.0, f)
    if f[-1] == 0.0:
        raise ZeroGlobalLiftError("global lift f(N) is zero; AUUC undefined")
    auuc = float(np.sum(f / abs(f[-1])) / n)
    return UpliftCurve(gains=f, auuc_normalized=auuc)


def randomized_eval_set(env, n, seed, p=0.5):
    """A fresh uniformly randomized holdout (x, t, y) for AUUC evaluation."""
    rng = rng_for(seed, 0x6576616C)
    xs = env.sample_x(n, rng)
    ts = (rng.random(n) < p).astype(int)
    ys = env.draw_outcomes(xs, ts, rng.random(n))
    return xs, ts, ys


# ---------------------------------------------------------------------------
# Replication harnesses


def _replicate(env, config, n_pool, r, master_seed):
    """One seeded protocol replication on a fresh pool."""
    seed_r = derive_seed(master_seed, 0x726570, r)
    pool_xs = env.sample_x(n_pool, rng_for(seed_r, 0x706F6F6C))
    cfg = replace(config, seed=seed_r)
    result = run_protocol(cfg, env, pool_xs=pool_xs)
    return result, pool_xs


@dataclass(frozen=True)
class BoundCheckResult:
    replications: int
    violations: int
    delta: float
    radii: np.ndarray
    betas: np.ndarray
    pehe_values: np.ndarray
    pehe_bounds: np.ndarray

    @property
    def rate(self):
        return self.violations / self.replications


def bound_violation_audit(env, config, n_pool, replications, delta,
                          sigma=None, norm_budget=None, master_seed=0):
    """Count replications where ||theta_hat - theta*||_V exceeds the width.

    Also records, per replication, the measured PEHE over the pool and the
    bound beta * sqrt(mean pool leverage) for the PEHE-bound check.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if config.estimator_lambda <= 0:
        raise ValueError("the coverage audit requires lambda > 0")
    if sigma is None:
        sigma = default_sigma(config.bounds)
    S = env.S if norm_budget is None else norm_budget
    params = ConfidenceParams(sigma=sigma, S=S, delta=delta,
                              lam=config.estimator_lambda)
    radii = np.empty(replications)
    betas = np.empty(replications)
    pehes = np.empty(replications)
    pbounds = np.empty(replications)
    for r in range(replications):
        result, pool_xs = _replicate(env, config, n_pool, r, master_seed)
        sol = result.solution
        radii[r] = ellipsoid_radius(sol, env.theta_star)
        betas[r] = beta_bound(params, sol.info)
        pool_phis = env.feature_map.apply_many(pool_xs)
        lev = np.einsum("ij,ij->i", pool_phis,
                        np.linalg.solve(sol.info.V, pool_phis.T).T)
        err = pool_phis @ sol.theta_hat - env.true_cate_many(pool_xs)
        pehes[r] = np.sqrt(np.mean(err**2))
        pbounds[r] = betas[r] * np.sqrt(max(np.mean(lev), 0.0))
    violations = int(np.sum(radii > betas))
    return BoundCheckResult(replications=replications, violations=violations,
                            delta=delta, radii=radii, betas=betas,
                            pehe_values=pehes, pehe_bounds=pbounds)


@dataclass(frozen=True)
class NormalityDiagnostic:
    z_scores: np.ndarray
    ks_statistic: float
    small_budget_warning: bool


def clt_diagnostic(env, config, n_pool, replications, x, master_seed=0):
    """Standardized errors sqrt(B)(tau_hat - tau)/se across replications."""
    phi = env.feature_map(np.atleast_1d(np.asarray(x, dtype=float)))
    if np.allclose(phi, 0.0):
        raise ValueError("phi(x) = 0: asymptotic variance degenerates")
    tau_x = env.true_cate(x)
    zs = np.empty(replications)
    for r in range(replications):
        result, _ = _replicate(env, config, n_pool, r, master_seed)
        phis = env.feature_map.apply_many(result.xs)
        yts = result.pseudo_outcomes()
        sw = sandwich_from_arrays(phis, yts, result.solution)
        se2 = float(phi @ sw.avar @ phi)
        b = len(result.ts)
        tau_hat = float(phi @ result.solution.theta_hat)
        zs[r] = np.sqrt(b) * (tau_hat - tau_x) / np.sqrt(se2)
    ks = float(stats.kstest(zs, "norm").statistic)
    small_b = len(result.ts) < 100 * env.feature_map.output_dim
    return NormalityDiagnostic(z_scores=zs, ks_statistic=ks,
                               small_budget_warning=small_b)


@dataclass(frozen=True)
class ScalingFit:
    budgets: np.ndarray
    mean_pehe: np.ndarray
    slope: float
    intercept: float


def scaling_fit(env, config, budget_grid, replications, n_pool=None,
                master_seed=0):
    """Mean PEHE per budget and the least-squares log-log slope."""
    budgets = np.asarray(sorted(budget_grid), dtype=int)
    if len(budgets) < 4 or np.any(np.diff(budgets) <= 0):
        raise ValueError("need a strictly increasing grid of >= 4 budgets")
    means = np.empty(len(budgets))
    for i, b in enumerate(budgets):
        cfg = replace(config, budget=int(b))
        pool = int(b) if n_pool is None else n_pool
        vals = np.empty(replications)
        for r in range(replications):
            result, pool_xs = _replicate(env, cfg, pool, r,
                                         derive_seed(master_seed, int(b)))
            predict = lambda xs: env.feature_map.apply_many(xs) @ result.solution.theta_hat
            vals[r] = pehe_exact_segments(predict, env) \
                if hasattr(env.marginal, "probs") \
                else pehe(predict, env, pool_xs).value
        means[i] = vals.mean()
    slope, intercept = np.polyfit(np.log(budgets), np.log(means), 1)
    return ScalingFit(budgets=budgets, mean_pehe=means,
                      slope=float(slope), intercept=float(intercept))
