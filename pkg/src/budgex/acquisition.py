"""Acquisition scoring for pool-based active experimentation.

Three per-candidate signals -- bootstrap-ensemble prediction variance (v),
pool-vs-current domain discriminability (d), and historical overlap deficit
(o) -- are rank-normalized over the current pool and combined into a single
weighted score used for top-m selection.
"""

from dataclasses import dataclass, field

import numpy as np

from ._rng import rng_for
from .core import RctRecord
from .estimator import fit_ridge_arrays, pseudo_outcome_values


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


# ---------------------------------------------------------------------------
# Logistic heads (shared by domain classifier and propensity model)


def _train_logistic(phis, labels, lr, steps, sample_weight=None):
    """Full-batch gradient descent on (weighted) mean cross-entropy, zero init."""
    w = np.zeros(phis.shape[1])
    b = 0.0
    sw = np.ones(len(labels)) if sample_weight is None else np.asarray(sample_weight)
    sw = sw / sw.sum()
    for _ in range(steps):
        s = _sigmoid(phis @ w + b)
        g = (s - labels) * sw
        w -= lr * (phis.T @ g)
        b -= lr * g.sum()
    return w, b


@dataclass
class DomainClassifier:
    """Affine logistic head scoring membership in the target pool (label 1)."""

    weights: np.ndarray
    bias: float

    def score(self, phis):
        return _sigmoid(np.atleast_2d(phis) @ self.weights + self.bias)


@dataclass(frozen=True)
class DomainTrainConfig:
    learning_rate: float = 1e-3
    max_steps: int = 100


def train_domain_classifier(pool_phis, current_phis, config=DomainTrainConfig()):
    """Fit pool (label 1) vs current training sample (label 0)."""
    if len(pool_phis) == 0 or len(current_phis) == 0:
        raise ValueError("both classes must be nonempty")
    phis = np.vstack([pool_phis, current_phis])
    labels = np.concatenate([np.ones(len(pool_phis)), np.zeros(len(current_phis))])
    # Balance the classes so unequal pool/history sizes do not masquerade
    # as a distribution shift signal.
    sw = np.concatenate(
        [
            np.full(len(pool_phis), 0.5 / len(pool_phis)),
            np.full(len(current_phis), 0.5 / len(current_phis)),
        ]
    )
    w, b = _train_logistic(
        phis, labels, config.learning_rate, config.max_steps, sample_weight=sw
    )
    return DomainClassifier(weights=w, bias=b)


def domain_score(classifier, fmap, u):
    return float(classifier.score(fmap(u)[None, :])[0])


@dataclass
class PropensityModel:
    """e_obs head; must only ever be fitted on observational records."""

    weights: np.ndarray
    bias: float
    trained_on: str = "obs"

    def predict(self, phis):
        return _sigmoid(np.atleast_2d(phis) @ self.weights + self.bias)


def fit_propensity(obs_records, fmap, lr=1.0, steps=2000):
    """Fit e_obs on the historical log; randomized records are rejected."""
    if any(isinstance(r, RctRecord) or hasattr(r, "p") for r in obs_records):
        raise ValueError("propensity model must be trained on OBS records only")
    if not obs_records:
        raise ValueError("empty observational log")
    phis = fmap.apply_many([r.x for r in obs_records])
    labels = np.array([r.t for r in obs_records], dtype=float)
    w, b = _train_logistic(phis, labels, lr, steps)
    return PropensityModel(weights=w, bias=b, trained_on="obs")


def overlap_deficit(propensity, fmap, u):
    """o_u = 2 |e_obs(phi(u)) - 0.5|; near 1 where history was deterministic."""
    if propensity.trained_on != "obs":
        raise ValueError("overlap deficit requires an OBS-trained propensity model")
    e = float(propensity.predict(fmap(u)[None, :])[0])
    return 2.0 * abs(e - 0.5)


def overlap_deficit_many(propensity, phis):
    if propensity.trained_on != "obs":
        raise ValueError("overlap deficit requires an OBS-trained propensity model")
    return 2.0 * np.abs(propensity.predict(phis) - 0.5)


# ---------------------------------------------------------------------------
# Ensemble uncertainty


@dataclass(frozen=True)
class EnsembleSpec:
    n_members: int = 15
    resample_fraction: float = 0.8
    perturb_lambda: float = 0.0
    bootstrap: bool = True
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("need at least 2 ensemble members")
        if not (0.0 < self.resample_fraction <= 1.0):
            raise ValueError("resample_fraction must lie in (0, 1]")


def ensemble_variance(labeled_phis, labeled_yts, candidate_phis, spec):
    """Population variance of member CATE predictions per candidate.

    Members are ridge fits on bootstrap resamples of the labeled pseudo-
    outcome set. With no labeled data, every member predicts 0 (cold start).
    """
    n = len(labeled_phis)
    n_cand = len(candidate_phis)
    if n == 0:
        return np.zeros(n_cand)
    rng = rng_for(spec.seed, 0x656E73, n)
    preds = np.empty((spec.n_members, n_cand))
    m = max(1, int(round(spec.resample_fraction * n)))
    for j in range(spec.n_members):
        if spec.bootstrap:
            idx = rng.integers(0, n, size=m)
        else:
            idx = np.arange(n)
        lam_j = spec.lam
        if spec.perturb_lambda > 0:
            lam_j = spec.lam * np.exp(spec.perturb_lambda * rng.standard_normal())
        sol = fit_ridge_arrays(labeled_phis[idx], labeled_yts[idx], lam_j)
        preds[j] = candidate_phis @ sol.theta_hat
    return preds.var(axis=0)


# ---------------------------------------------------------------------------
# Rank normalization and composite score


def rank_normalize(values):
    """eta(a_u) = (1/n) * #{a_u' <= a_u}; ties share the <=-count rank."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        raise ValueError("cannot rank an empty pool")
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    # for each value, the number of entries <= it
    counts = np.searchsorted(sorted_v, v, side="right")
    return counts / len(v)


@dataclass(frozen=True)
class AcquisitionWeights:
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("weights must be nonnegative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one acquisition weight must be positive")


@dataclass(frozen=True)
class ScoreBreakdown:
    unit_id: int
    v: float
    d: float
    o: float
    eta_v: float
    eta_d: float
    eta_o: float
    score: float


def composite_scores(unit_ids, v, d, o, weights):
    """Rank-normalize the raw signals over the pool and combine."""
    eta_v = rank_normalize(v)
    eta_d = rank_normalize(d)
    eta_o = rank_normalize(o)
    s = weights.alpha * eta_v + weights.beta * eta_d + weights.gamma * eta_o
    return [
        ScoreBreakdown(unit_id=int(unit_ids[i]), v=float(v[i]), d=float(d[i]),
                       o=float(o[i]), eta_v=float(eta_v[i]), eta_d=float(eta_d[i]),
                       eta_o=float(eta_o[i]), score=float(s[i]))
        for i in range(len(unit_ids))
    ]


def select_top_m(breakdowns, m):
    """ids of the m highest scores; exact ties break by lowest unit id."""
    if m > len(breakdowns):
        raise ValueError(f"m = {m} exceeds remaining pool size {len(breakdowns)}")
    ranked = sorted(breakdowns, key=lambda b: (-b.score, b.unit_id))
    return [b.unit_id for b in ranked[:m]]


def score_pool(pool_units, fmap, labeled_records, obs_phis, propensity, weights,
               ensemble_spec, domain_config=DomainTrainConfig(), round_seed=0):
    """One round of scoring: train round models, score every unqueried unit."""
    candidates = [u for u in pool_units if not u.queried]
    if not candidates:
        return []
    cand_ids = np.array([u.id for u in candidates])
    cand_phis = fmap.apply_many([u.x for u in candidates])

    # v: bootstrap ensemble over the labeled randomized stream
    if labeled_records:
        lab_phis = fmap.apply_many([r.x for r in labeled_records])
        lab_yts = pseudo_outcome_values([r.t for r in labeled_records],
                                        [r.y for r in labeled_records],
                                        [r.p for r in labeled_records])
    else:
        lab_phis = np.zeros((0, fmap.output_dim))
        lab_yts = np.zeros(0)
    spec = EnsembleSpec(n_members=ensemble_spec.n_members,
                        resample_fraction=ensemble_spec.resample_fraction,
                        perturb_lambda=ensemble_spec.perturb_lambda,
                        bootstrap=ensemble_spec.bootstrap,
                        lam=ensemble_spec.lam,
                        seed=ensemble_spec.seed + round_seed)
    v = ensemble_variance(lab_phis, lab_yts, cand_phis, spec)

    # d: pool vs obs + rct, retrained from zero each round
    current_phis = obs_phis if not len(lab_phis) else (
        np.vstack([obs_phis, lab_phis]) if len(obs_phis) else lab_phis)
    if len(current_phis) == 0:
        d = np.full(len(candidates), 0.5)
    else:
        clf = train_domain_classifier(cand_phis, current_phis, domain_config)
        d = clf.score(cand_phis)

    # o: overlap deficit from the OBS-trained propensity head
    o = overlap_deficit_many(propensity, cand_phis) if propensity is not None \
        else np.zeros(len(candidates))

    return composite_scores(cand_ids, v, d, o, weights)
