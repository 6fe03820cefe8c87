"""Transported treatment-effect estimation under exponential-tilting
sensitivity analysis: outcome-regression and influence-function pipelines,
a sensitivity-parameter calibration procedure, and a replication harness.
"""

__version__ = "0.1.0"

from .calibration import (CalibrationRegion, Interval, PartitionSpec,
                          SensitivityVerdict, calibrate, classify,
                          overlap_region, standard_ci, transported_ci_grid)
from .data import (CovariateSchema, FoldAssignment, ObservationTable,
                   PositivityReport, StratumIndex, check_positivity, kfold,
                   load_table, resample, subgroup)
from .eif_estimator import (CrossfitOptions, CrossfitResult, EifEstimate,
                            FoldNuisances, crossfit_estimate, crossfit_grid,
                            influence_terms, influence_terms_continuous,
                            variance_and_ci)
from .errors import (ConfigError, ConvergenceError, EstimationError,
                     OverlapError, PositivityError, SchemaError,
                     TiltTransportError)
from .nuisance import (DensityRatioModel, OutcomeModel, PropensityModel,
                       SharedOutcomeModel, TiltedMomentModel, clip,
                       fit_density_ratio_discrete,
                       fit_density_ratio_offset_logistic,
                       fit_outcome_frequency, fit_outcome_wls,
                       fit_propensity_frequency, fit_shared_outcome,
                       fit_tilted_moments)
from .or_estimator import (BootstrapDistribution, NuisanceOptions,
                           PointEstimates, bootstrap_ci, estimate_point,
                           grid_estimates)
from .reports import EstimateReport
from .simulation import (DgpSpec, DgpStratum, ReplicationReport, TrueEffects,
                         builtin_dgp, generate, run_study, true_effects)
from .tilt import (EffectMeasures, GammaGrid, SensitivityPair, default_grid,
                   effect_measures, tilt_probability, transported_mean,
                   transported_mean_continuous)

__all__ = [name for name in dir() if not name.startswith("_")]
