"""Pseudo-outcome regression for adaptively collected randomized data.

The chronological stream (x_t, t_t, y_t, p_t) is converted to inverse
propensity pseudo-outcomes and fit by (weighted) ridge / OLS in a fixed
feature space, with the self-normalized confidence width and a sandwich
variance estimate for asymptotic intervals.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

MAX_CONDITION = 1e12
SOLVE_RTOL = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """lambda = 0 requested with a rank-deficient information matrix."""


@dataclass(frozen=True)
class PseudoOutcome:
    value: float
    source_seq: int


def pseudo_outcome(record):
    """Y~ = t y / p - (1 - t) y / (1 - p); an unbiased CATE label at x."""
    if not (0.0 < record.p < 1.0):
        raise ValueError(f"assignment probability {record.p} outside (0, 1)")
    if record.t == 1:
        value = record.y / record.p
    else:
        value = -record.y / (1.0 - record.p)
    return PseudoOutcome(value=value, source_seq=record.seq)


def pseudo_outcome_values(ts, ys, ps):
    """Vectorized pseudo-outcomes for arrays of (t, y, p)."""
    ts = np.asarray(ts)
    ys = np.asarray(ys, dtype=float)
    ps = np.asarray(ps, dtype=float)
    return np.where(ts == 1, ys / ps, -ys / (1.0 - ps))


class InfoMatrix:
    """V = lambda I + sum_t w_t phi_t phi_t^T with incremental rank-one updates."""

    def __init__(self, dim, lam):
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.lam = float(lam)
        self.V = lam * np.eye(dim)
        self.n = 0

    def update(self, phi, weight=1.0):
        self.V += weight * np.outer(phi, phi)
        self.n += 1

    @staticmethod
    def build(phis, lam, weights=None):
        dim = phis.shape[1]
        out = InfoMatrix(dim, lam)
        if len(phis):
            w = np.ones(len(phis)) if weights is None else np.asarray(weights, dtype=float)
            out.V = lam * np.eye(dim) + (phis * w[:, None]).T @ phis
        out.n = len(phis)
        return out

    def rebuild_check(self, phis, weights=None, atol=1e-8):
        """Exactness reconciliation against a from-scratch rebuild."""
        fresh = InfoMatrix.build(phis, self.lam, weights)
        return np.allclose(self.V, fresh.V, atol=atol)


@dataclass(frozen=True)
class RidgeSolution:
    theta_hat: np.ndarray
    info: InfoMatrix
    moment: np.ndarray

    @property
    def dim(self):
        return len(self.theta_hat)


@dataclass(frozen=True)
class ConfidenceParams:
    sigma: float
    S: float
    delta: float
    lam: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")


def default_sigma(bounds):
    """Sub-Gaussian scale 2 L_p implied by the propensity bounds."""
    return 2.0 * bounds.pseudo_outcome_bound


def _design_arrays(records, fmap):
    phis = fmap.apply_many([r.x for r in records]) if records else np.zeros((0, fmap.output_dim))
    yt = np.array([pseudo_outcome(r).value for r in records])
    return phis, yt


def fit_ridge_arrays(phis, yts, lam, weights=None):
    """Solve (lambda I + sum w phi phi^T) theta = sum w phi Y~."""
    dim = phis.shape[1]
    w = np.ones(len(phis)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    info = InfoMatrix.build(phis, lam, w if weights is not None else None)
    b = (phis * (w * yts)[:, None]).sum(axis=0) if len(phis) else np.zeros(dim)
    if lam == 0.0:
        cond = np.linalg.cond(info.V) if len(phis) else np.inf
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            rank = np.linalg.matrix_rank(info.V) if len(phis) else 0
            raise SingularDesignError(
                f"lambda = 0 with singular design: rank {rank} < {dim}"
            )
    theta = np.linalg.solve(info.V, b)
    resid = np.linalg.norm(info.V @ theta - b) / (1.0 + np.linalg.norm(b))
    if resid > SOLVE_RTOL:
        theta, *_ = np.linalg.lstsq(info.V, b, rcond=None)
    return RidgeSolution(theta_hat=theta, info=info, moment=b)


def fit_ridge(records, fmap, lam):
    """Ridge / OLS on the pseudo-outcome stream."""
    phis, yt = _design_arrays(records, fmap)
    return fit_ridge_arrays(phis, yt, lam)


def fit_weighted_ridge(records, weights, fmap, lam):
    """Per-record weighted variant; unit weights reduce to fit_ridge exactly."""
    if len(weights) != len(records):
        raise ValueError("weights length must match records")
    phis, yt = _design_arrays(records, fmap)
    return fit_ridge_arrays(phis, yt, lam, weights=np.asarray(weights, dtype=float))


def predict_cate(solution, fmap, x):
    return float(fmap(x) @ solution.theta_hat)


def predict_cate_many(solution, fmap, xs):
    return fmap.apply_many(xs) @ solution.theta_hat


# ---------------------------------------------------------------------------
# Counterfactual-alignment weights (fusion mode)

GOLD_WEIGHT = 1.0
SILVER_WEIGHT = 0.2


@dataclass(frozen=True)
class AlignmentWeight:
    gap: float
    weight: float


def compute_alignment_weights(records, propensity_model, fmap):
    """Gap |t - e_obs(phi(x))|; gold weight 1.0 iff the gap strictly exceeds 0.5."""
    phis = fmap.apply_many([r.x for r in records])
    e_hat = propensity_model.predict(phis)
    out = []
    for r, e in zip(records, e_hat):
        gap = abs(r.t - float(e))
        w = GOLD_WEIGHT if gap > 0.5 else SILVER_WEIGHT
        out.append(AlignmentWeight(gap=gap, weight=w))
    return out


# ---------------------------------------------------------------------------
# Finite-sample confidence machinery


def beta_bound(params, info):
    """sigma sqrt(2 log(det(V)^1/2 / (det(lambda I)^1/2 delta))) + sqrt(lambda) S."""
    if params.lam <= 0:
        raise ValueError("the determinant-ratio bound requires lambda > 0")
    dim = info.V.shape[0]
    sign, logdet = np.linalg.slogdet(info.V)
    if sign <= 0:
        raise np.linalg.LinAlgError("information matrix is not positive definite")
    log_ratio = 0.5 * logdet - 0.5 * dim * np.log(params.lam) - np.log(params.delta)
    return params.sigma * np.sqrt(2.0 * log_ratio) + np.sqrt(params.lam) * params.S


def confidence_width(solution, params, fmap, x):
    """Half-width beta * sqrt(phi^T V^-1 phi) of the pointwise CATE bound."""
    beta = beta_bound(params, solution.info)
    phi = fmap(x)
    lev = float(phi @ np.linalg.solve(solution.info.V, phi))
    return beta * np.sqrt(max(lev, 0.0))


def ellipsoid_radius(solution, theta_star):
    """||theta_hat - theta*||_V, the self-normalized deviation."""
    diff = solution.theta_hat - np.asarray(theta_star)
    return float(np.sqrt(diff @ solution.info.V @ diff))


@dataclass(frozen=True)
class SandwichEstimate:
    sigma_hat: np.ndarray
    omega_hat: np.ndarray
    avar: np.ndarray


def sandwich_variance(records, solution, fmap):
    """Plug-in Sigma^-1 Omega Sigma^-1 from the fitted residuals."""
    phis, yt = _design_arrays(records, fmap)
    return sandwich_from_arrays(phis, yt, solution)


def sandwich_from_arrays(phis, yts, solution):
    n = len(phis)
    dim = phis.shape[1]
    if n < dim:
        raise ValueError(f"need at least d = {dim} records, got {n}")
    sigma_hat = phis.T @ phis / n
    if np.linalg.cond(sigma_hat) > MAX_CONDITION:
        raise np.linalg.LinAlgError("normalized information matrix is singular")
    resid = yts - phis @ solution.theta_hat
    omega_hat = (phis * (resid**2)[:, None]).T @ phis / n
    sigma_inv = np.linalg.inv(sigma_hat)
    avar = sigma_inv @ omega_hat @ sigma_inv
    return SandwichEstimate(sigma_hat=sigma_hat, omega_hat=omega_hat, avar=avar)


def pointwise_ci(solution, sandwich, fmap, x, level, n):
    """tau_hat(x) +- z sqrt(phi^T avar phi / B)."""
    phi = fmap(x)
    center = float(phi @ solution.theta_hat)
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(max(float(phi @ sandwich.avar @ phi), 0.0) / n)
    return center - half, center + half


# ---------------------------------------------------------------------------
# Serialization (solution.json)


def solution_to_json(solution, lam):
    return {
        "theta_hat": list(map(float, solution.theta_hat)),
        "lambda": lam,
        "n": solution.info.n,
        "V": np.asarray(solution.info.V).ravel().tolist(),
    }


def solution_from_json(doc):
    theta = np.asarray(doc["theta_hat"], dtype=float)
    dim = len(theta)
    info = InfoMatrix(dim, doc["lambda"])
    info.V = np.asarray(doc["V"], dtype=float).reshape(dim, dim)
    info.n = doc["n"]
    return RidgeSolution(theta_hat=theta, info=info, moment=info.V @ theta)
