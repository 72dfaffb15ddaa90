"""Empirical-Bayes crossed random-effects models fit by streamlined EM, with a
Thompson-sampling bandit built on the resulting posterior."""

from .bandit import (DecisionRecord, Slot, ThetaPosterior, TsConfig, TsResult,
                     assemble_theta_posterior, randomization_probability, run_ts_loop)
from .em import (ENGINES, EmConfig, EmFit, EmTrace, build_streamlined_blocks, em_fit,
                 em_fit_naive, em_fit_streamlined, extract_posterior, m_step)
from .model import (Dataset, FeatureMap, InputError, NumericalError, Observation,
                    PosteriorSummary, Priors, VarianceComponents, builtin_feature_map,
                    dense_posterior, expected_complete_data_loglik,
                    marginal_log_likelihood, read_observations_csv)
from .simulate import (GenConfig, SpeedConfig, TrialConfig, generate_batch,
                       run_mhealth_trial, run_speed_assessment)
from .stlsls import TwoLevelBlock, TwoLevelSolution, stlsls

__version__ = "0.1.0"
