"""Round-based budgeted experimentation loop.

Each round sizes a batch m_k = min(M, remaining budget), selects candidates
(acquisition score or uniform at random), randomizes treatment with a clipped
assignment policy, draws outcomes from the environment, and appends the new
quadruples to the chronological stream. Treatment and outcome draws use
dedicated per-unit streams keyed by (seed, unit id, purpose), so selection
order can never alter an individual unit's assignment.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import OUTCOME, TREATMENT, rng_for, unit_uniform
from .acquisition import (AcquisitionWeights, EnsembleSpec, fit_propensity,
                          score_pool, select_top_m)
from .core import PropensityBounds, RctRecord
from .estimator import (compute_alignment_weights, fit_ridge_arrays,
                        pseudo_outcome_values, RidgeSolution)

DEFAULT_BOUNDS = PropensityBounds(0.2, 0.8)


def clip_probability(raw, bounds):
    """Clip(z, f_min, f_max) = min(max(z, f_min), f_max)."""
    return np.minimum(np.maximum(raw, bounds.f_min), bounds.f_max)


def optimal_p(a, bm, bounds):
    """Variance-optimal assignment sqrt(A) / (sqrt(A) + sqrt(B)), clipped."""
    a = np.asarray(a, dtype=float)
    bm = np.asarray(bm, dtype=float)
    if np.any(a < 0) or np.any(bm < 0):
        raise ValueError("second moments must be nonnegative")
    denom = np.sqrt(a) + np.sqrt(bm)
    p = np.where(denom > 0, np.sqrt(a) / np.where(denom > 0, denom, 1.0), 0.5)
    return clip_probability(p, bounds)


@dataclass(frozen=True)
class ConstantPolicy:
    p: float = 0.5

    def raw(self, xs, phis, env):
        return np.full(len(phis), self.p)


@dataclass(frozen=True)
class AffinePolicy:
    weights: tuple
    bias: float = 0.5

    def raw(self, xs, phis, env):
        return self.bias + phis @ np.asarray(self.weights)


@dataclass(frozen=True)
class VarianceOptimalPolicy:
    """Uses the environment's conditional second moments (oracle policy)."""

    def raw(self, xs, phis, env):
        a, bm = env.second_moments(xs)
        denom = np.sqrt(a) + np.sqrt(bm)
        return np.where(denom > 0, np.sqrt(a) / np.where(denom > 0, denom, 1.0), 0.5)


@dataclass(frozen=True)
class ProtocolConfig:
    budget: int
    max_rounds: int = 1_000_000
    max_batch: int = 1_000_000
    bounds: PropensityBounds = DEFAULT_BOUNDS
    randomization: object = ConstantPolicy(0.5)
    strategy: str = "active"  # "active" | "random"
    weights: AcquisitionWeights = AcquisitionWeights()
    ensemble: EnsembleSpec = EnsembleSpec()
    estimator_lambda: float = 1.0
    mode: str = "theory"  # "theory" | "fusion"
    ensemble_includes_obs: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.max_rounds < 1 or self.max_batch < 1:
            raise ValueError("max_rounds and max_batch must be >= 1")
        if self.strategy not in ("active", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.mode not in ("theory", "fusion"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_rounds * self.max_batch < self.budget:
            raise ValueError("max_rounds * max_batch cannot cover the budget")


@dataclass
class RoundState:
    k: int
    sel_ids: list
    xs: list
    ts: list
    ys: list
    ps: list
    unqueried: np.ndarray  # boolean mask over pool units

    @property
    def n_records(self):
        return len(self.ts)


@dataclass
class ProtocolResult:
    solution: RidgeSolution
    xs: np.ndarray
    ts: np.ndarray
    ys: np.ndarray
    ps: np.ndarray
    unit_ids: np.ndarray
    breakdowns: list  # per-round lists of ScoreBreakdown (active strategy)
    batch_sizes: list

    @property
    def records(self):
        return [
            RctRecord(x=self.xs[i], t=int(self.ts[i]), y=float(self.ys[i]),
                      p=float(self.ps[i]), seq=i + 1)
            for i in range(len(self.ts))
        ]

    def pseudo_outcomes(self):
        return pseudo_outcome_values(self.ts, self.ys, self.ps)


def _assign_and_observe(env, config, ids, xs):
    """Randomize treatments and draw outcomes for a selected batch."""
    phis = env.feature_map.apply_many(xs)
    raw = config.randomization.raw(xs, phis, env)
    ps = clip_probability(raw, config.bounds)
    u_t = unit_uniform(config.seed, ids, TREATMENT)
    ts = (u_t < ps).astype(int)
    u_y = unit_uniform(config.seed, ids, OUTCOME)
    ys = env.draw_outcomes(xs, ts, u_y)
    return ts, ys, ps


def run_round(state, config, env, pool_xs, context):
    """Execute one selection/experimentation round, mutating state."""
    remaining = config.budget - state.n_records
    if remaining <= 0:
        return state, None
    candidates = np.flatnonzero(state.unqueried)
    if len(candidates) == 0:
        return state, None
    m_k = min(config.max_batch, remaining, len(candidates))

    breakdowns = None
    if config.strategy == "random":
        rng = rng_for(config.seed, 0x73656C, state.k)
        chosen = np.sort(rng.choice(candidates, size=m_k, replace=False))
    else:
        breakdowns = context.score_round(state)
        chosen = np.array(select_top_m(breakdowns, m_k))

    xs = pool_xs[chosen]
    ts, ys, ps = _assign_and_observe(env, config, chosen, xs)

    state.sel_ids.extend(int(i) for i in chosen)
    state.xs.extend(xs)
    state.ts.extend(int(t) for t in ts)
    state.ys.extend(float(y) for y in ys)
    state.ps.extend(float(p) for p in ps)
    state.unqueried[chosen] = False
    state.k += 1
    return state, breakdowns


class _ActiveContext:
    """Frozen OBS-side models plus per-round scoring for the active strategy."""

    def __init__(self, config, env, pool_units, obs_records):
        self.config = config
        self.env = env
        self.pool_units = pool_units
        self.fmap = env.feature_map
        self.obs_phis = (self.fmap.apply_many([r.x for r in obs_records])
                         if obs_records else np.zeros((0, self.fmap.output_dim)))
        self.propensity = (fit_propensity(obs_records, self.fmap)
                           if obs_records else None)

    def score_round(self, state):
        labeled = [
            RctRecord(x=state.xs[i], t=state.ts[i], y=state.ys[i],
                      p=state.ps[i], seq=i + 1)
            for i in range(state.n_records)
        ]
        units = [u for u in self.pool_units if state.unqueried[u.id]]
        return score_pool(units, self.fmap, labeled, self.obs_phis,
                          self.propensity, self.config.weights,
                          self.config.ensemble, round_seed=state.k)


def run_protocol(config, env, pool_units=None, obs_records=None, out_dir=None,
                 pool_xs=None):
    """Run the budget loop end to end and fit the final estimator.

    Pass either a list of PoolUnits or a raw (n, xdim) covariate array
    (pool_xs); the array form skips unit bookkeeping and only supports the
    random strategy.
    """
    obs_records = obs_records or []
    if config.mode == "fusion" and not obs_records:
        raise ValueError("fusion mode requires an observational log")
    if pool_units is None:
        if pool_xs is None:
            raise ValueError("provide pool_units or pool_xs")
        if config.strategy == "active":
            raise ValueError("the active strategy needs PoolUnits, not raw covariates")
        pool_xs = np.atleast_2d(np.asarray(pool_xs, dtype=float))
        pool_units = []
        n_pool = len(pool_xs)
    else:
        pool_xs = np.array([u.x for u in pool_units], dtype=float) if pool_units \
            else np.zeros((0, 1))
        n_pool = len(pool_units)

    state = RoundState(k=0, sel_ids=[], xs=[], ts=[], ys=[], ps=[],
                       unqueried=np.ones(n_pool, dtype=bool))
    context = _ActiveContext(config, env, pool_units, obs_records) \
        if config.strategy == "active" else None

    all_breakdowns = []
    batch_sizes = []
    while state.n_records < config.budget and state.k < config.max_rounds:
        before = state.n_records
        state, breakdowns = run_round(state, config, env, pool_xs, context)
        gained = state.n_records - before
        if gained == 0:
            break  # pool exhausted
        batch_sizes.append(gained)
        if breakdowns is not None:
            all_breakdowns.append(breakdowns)
            if out_dir is not None:
                _dump_scores(out_dir, len(batch_sizes), breakdowns,
                             set(state.sel_ids[before:]))

    for u in pool_units:
        if not state.unqueried[u.id]:
            u.queried = True

    xs = np.array(state.xs, dtype=float) if state.xs else np.zeros((0, pool_xs.shape[1]))
    ts = np.array(state.ts, dtype=int)
    ys = np.array(state.ys, dtype=float)
    ps = np.array(state.ps, dtype=float)

    fmap = env.feature_map
    phis = fmap.apply_many(xs) if len(xs) else np.zeros((0, fmap.output_dim))
    yts = pseudo_outcome_values(ts, ys, ps)
    if config.mode == "fusion":
        prop = context.propensity if context is not None \
            else fit_propensity(obs_records, fmap)
        records = [RctRecord(x=xs[i], t=int(ts[i]), y=float(ys[i]),
                             p=float(ps[i]), seq=i + 1) for i in range(len(ts))]
        aw = compute_alignment_weights(records, prop, fmap)
        weights = np.array([w.weight for w in aw])
        solution = fit_ridge_arrays(phis, yts, config.estimator_lambda, weights=weights)
    else:
        solution = fit_ridge_arrays(phis, yts, config.estimator_lambda)

    return ProtocolResult(solution=solution, xs=xs, ts=ts, ys=ys, ps=ps,
                          unit_ids=np.array(state.sel_ids, dtype=int),
                          breakdowns=all_breakdowns, batch_sizes=batch_sizes)


SCORE_COLUMNS = ["id", "v", "d", "o", "eta_v", "eta_d", "eta_o", "S", "selected"]


def _dump_scores(out_dir, round_index, breakdowns, selected_ids):
    path = os.path.join(out_dir, f"scores_round_{round_index}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for b in breakdowns:
            w.writerow([b.unit_id, repr(b.v), repr(b.d), repr(b.o), repr(b.eta_v),
                        repr(b.eta_d), repr(b.eta_o), repr(b.score),
                        1 if b.unit_id in selected_ids else 0])
