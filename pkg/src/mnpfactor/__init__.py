"""Scalable Bayesian multinomial probit with a trace-restricted factor covariance."""

__version__ = "0.1.0"

from .data import (ChoiceDataset, DesignRow, ScalingRecord, apply_scaling,
                   build_design_row, build_design_tensor, choice_from_utilities,
                   choices_from_utilities, read_long_csv, relabel_base_category,
                   standardize_covariates, take_observations,
                   unscale_coefficients, write_long_csv)
from .evaluation import (MetricReport, PredictivePmf, TestResult,
                         compare_hit_rates, compare_log_scores, hit_rate,
                         log_score, make_report, naive_forecast,
                         posterior_mean_correlation, posterior_mean_covariance,
                         predictive_pmf, recovery_error_groups, recovery_errors)
from .experiment import (DgpConfig, DgpTruth, ExperimentResult,
                         base_sensitivity_run, parse_manifest,
                         run_numerical_experiment, simulate_dataset,
                         train_test_split)
from .prior import (CalibratedPrior, CalibrationError, FlexibleMargin,
                    Hyperparameters, calibrate_prior, flexible_logpdf,
                    load_calibrated_prior, log_prior_kappa, project_to_sphere,
                    sample_calibrated_angles, sample_flexible_margin,
                    sample_unrestricted_psi, save_calibrated_prior,
                    solve_equicorrelated_mu, yj_derivative, yj_inverse,
                    yj_transform)
from .sampler import (McmcState, PosteriorDraws, SamplerConfig, adapt_proposals,
                      conditional_coefficients, gaussian_loglik, gibbs_beta,
                      gibbs_latent_utilities, init_state, load_draws,
                      mh_angles_sweep, run_chain, sample_truncnorm, save_draws)
from .spherical import (FactorCovariance, angles_from_psi, angles_from_psi_batch,
                        correlation_from_covariance, covariance_from_angles,
                        factor_from_psi, num_free_params, psi_from_angles,
                        psi_from_angles_batch, psi_from_factor)
