"""budgex: budgeted active experimentation for treatment effect estimation.

Simulates two-source causal worlds (biased observational logs plus an
unlabeled target pool), runs a round-based active RCT acquisition loop under
a query budget, fits an inverse-propensity pseudo-outcome ridge CATE model,
and verifies its finite-sample and asymptotic guarantees empirically.
"""

from .core import (FeatureMap, ObsRecord, PoolUnit, PropensityBounds,
                   RctRecord, apply_feature_map, read_jsonl,
                   validate_rct_stream, write_jsonl)
from .envs import (BoxMarginal, HardInstance, LinearEnv, LogisticPolicy,
                   MarginalShift, SegmentMarginal, ThresholdPolicy,
                   default_hard_delta, draw_outcome, env_from_json,
                   env_to_json, sample_obs, sample_pool, true_cate)
from .estimator import (AlignmentWeight, ConfidenceParams, InfoMatrix,
                        PseudoOutcome, RidgeSolution, SandwichEstimate,
                        beta_bound, compute_alignment_weights,
                        confidence_width, default_sigma, fit_ridge,
                        fit_weighted_ridge, pointwise_ci, predict_cate,
                        pseudo_outcome, sandwich_variance)
from .acquisition import (AcquisitionWeights, DomainClassifier,
                          DomainTrainConfig, EnsembleSpec, PropensityModel,
                          ScoreBreakdown, composite_scores, domain_score,
                          ensemble_variance, fit_propensity, overlap_deficit,
                          rank_normalize, select_top_m, train_domain_classifier)
from .protocol import (AffinePolicy, ConstantPolicy, ProtocolConfig,
                       VarianceOptimalPolicy, clip_probability, optimal_p,
                       run_protocol)
from .metrics import (BoundCheckResult, NormalityDiagnostic, PeheResult,
                      ScalingFit, UpliftCurve, bound_violation_audit,
                      clt_diagnostic, pehe, scaling_fit, uplift_curve)

__version__ = "0.1.0"
