"""Nonlinear state-space system identification with basis expansions.

Represent unknown transition and measurement functions as weighted sums of
fixed basis functions, then learn the weights and noise covariances from
input-output data via particle-smoothing EM with stochastic approximation.
See the README for the workflow; the CLI entry point is ``basisid``.
"""

from .basis import (BasisSpec, PriorSpec, build_precision, clamp_to_domain,
                    compile_table, eval_features, eval_features_batch,
                    frequency_orders, spec_from_dict)
from .em import (GammaSchedule, PsaemConfig, PsaemResult, SuffStats,
                 blend_stats, gamma_value, initial_model, iteration_stats,
                 m_step, psaem_identify, regressor_precision)
from .errors import (BasisIdError, DataParseError, DegenerateWeightsError,
                     DimensionMismatchError, DivergenceError,
                     ModelFormatError, RankDeficiencyError)
from .io import (RunConfig, configure_run, export_function_grid, load_config,
                 load_dataset, load_model, save_dataset, save_diagnostics,
                 save_model, save_trace)
from .model import (Dataset, ModelParams, StructureSpec, metrics, obs_mean,
                    regressor, simulate, state_function, step_mean)
from .smc import (ParticleSystem, ancestor_weights, cpf_as,
                  measurement_log_weight, measurement_weight,
                  multinomial_resample, normalize_log_weights,
                  one_step_predictions, systematic_resample)
from .systems import (example1_transition, generate_example1, generate_linear,
                      linear_model)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "PriorSpec", "build_precision", "clamp_to_domain",
    "compile_table", "eval_features", "eval_features_batch",
    "frequency_orders", "spec_from_dict",
    "GammaSchedule", "PsaemConfig", "PsaemResult", "SuffStats",
    "blend_stats", "gamma_value", "initial_model", "iteration_stats",
    "m_step", "psaem_identify", "regressor_precision",
    "BasisIdError", "DataParseError", "DegenerateWeightsError",
    "DimensionMismatchError", "DivergenceError", "ModelFormatError",
    "RankDeficiencyError",
    "RunConfig", "configure_run", "export_function_grid", "load_config",
    "load_dataset", "load_model", "save_dataset", "save_diagnostics",
    "save_model", "save_trace",
    "Dataset", "ModelParams", "StructureSpec", "metrics", "obs_mean",
    "regressor", "simulate", "state_function", "step_mean",
    "ParticleSystem", "ancestor_weights", "cpf_as",
    "measurement_log_weight", "measurement_weight", "multinomial_resample",
    "normalize_log_weights", "one_step_predictions", "systematic_resample",
    "example1_transition", "generate_example1", "generate_linear",
    "linear_model",
    "__version__",
]
