"""Difference-in-differences estimation under neighborhood interference.

Estimates direct and spillover treatment effects when a unit's outcome may
depend on its neighbors' treatments: exposure-mapping construction,
propensity and outcome nuisance models (MLE or covariate-balancing), doubly
robust effect estimation via stacked moment systems, spatial-correlation
robust inference, and a Monte Carlo lab reproducing the reference
simulation tables.
"""

from .design import Formula, ModelData
from .errors import (AssemblyError, ConditioningError, ConfigError,
                     ConvergenceError, DataValidationError, DegenerateArmError,
                     InferenceError, OverlapError, RankError, SchemaError,
                     SpillDidError)
from .estimators import (EstimandRequest, PointEstimate, abadie_ipw,
                         aggregate_overall, augmented_twfe, canonical_twfe,
                         dr_datt, dr_spillover, ipw_datt, pretrend_placebo,
                         ra_datt, saturated_twfe, treated_level_shares)
from .exposure import (ExposureAssignment, ExposureSpec, compute_exposure,
                       toggle_invariance_check)
from .gmm import GmmSolution, MomentSystem, assemble_moments, solve_gmm
from .inference import (KernelSpec, VarianceEstimate, cluster_variance,
                        confidence_interval, ehw_variance, shac_variance)
from .nuisance import (LogitFit, NuisanceSpec, NuisanceValues, OutcomeRegFit,
                       fit_cbps, fit_logit_g, fit_logit_w,
                       fit_outcome_regressions, overlap_diagnostics,
                       predict_p, predict_pi)
from .population import (Adjacency, ColumnSchema, Population, UnitRecord,
                         build_adjacency, distance, load_population,
                         pairwise_distances, save_population)
from .simlab import (DesignSpec, FixedDesign, ReplicationSummary, design_spec,
                     generate_population, run_replications, substream)

__version__ = "0.1.0"
