"""Synthetic-data experiments: simulation, full fitting pipeline, sensitivity runs.

The data-generating process draws standard-normal log prices, normal
intercepts, a fixed price coefficient, and a trace-normalized inverse-Wishart
covariance; choices follow from the latent-utility argmax rule. The
experiment driver fits the requested model variants on a shared random
train/test split with shared covariate scaling, then evaluates predictive
metrics and parameter recovery against the known truth.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .data import (ChoiceDataset, apply_scaling, build_design_tensor,
                   choices_from_utilities, relabel_base_category,
                   standardize_covariates, take_observations,
                   unscale_coefficients, write_long_csv)
from .evaluation import (compare_hit_rates, compare_log_scores, make_report,
                         naive_forecast, posterior_mean_correlation,
                         posterior_mean_covariance, predictive_pmf,
                         recovery_error_groups)
from .prior import Hyperparameters, calibrate_prior
from .sampler import (VARIANT_FS, VARIANT_IDENTITY, SamplerConfig, run_chain,
                      save_draws)
from .spherical import correlation_from_covariance

__all__ = [
    "DgpConfig",
    "DgpTruth",
    "ExperimentResult",
    "simulate_dataset",
    "train_test_split",
    "run_numerical_experiment",
    "base_sensitivity_run",
    "parse_manifest",
    "write_metrics_csv",
]

NAIVE = "naive"
KNOWN_VARIANTS = (VARIANT_FS, VARIANT_IDENTITY, NAIVE)


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process settings.

    `intercept_variance` is the variance of the normal intercept draws
    (default sqrt(0.5)). The covariance is an inverse-Wishart draw with
    J+`iw_dof_offset` degrees of freedom and an equicorrelated scale matrix,
    rescaled so its trace equals J.
    """

    j_plus_1: int = 50
    n_obs: int = 5000
    intercept_variance: float = float(np.sqrt(0.5))
    price_coef: float = -0.7
    iw_dof_offset: int = 3
    iw_offdiag: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_obs <= 0:
            raise ValueError("n_obs must be positive")
        if self.j_plus_1 < 2:
            raise ValueError("need at least two alternatives")


@dataclass(frozen=True)
class DgpTruth:
    """True parameters behind a simulated dataset."""

    beta: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class ExperimentResult:
    truth: DgpTruth
    reports: tuple
    draws: dict
    recovery: dict
    timing: dict
    train_idx: np.ndarray
    test_idx: np.ndarray


def simulate_dataset(config: DgpConfig) -> tuple[ChoiceDataset, DgpTruth]:
    """Generate one dataset from the synthetic choice process.

    Deterministic in the config seed: identical configs produce bit-identical
    data.
    """
    rng = np.random.default_rng(config.seed)
    J = config.j_plus_1 - 1
    N = config.n_obs
    x_a = rng.standard_normal((N, config.j_plus_1, 1))
    intercepts = rng.normal(0.0, np.sqrt(config.intercept_variance), size=J)
    beta = np.concatenate([intercepts, [config.price_coef]])
    scale = np.full((J, J), config.iw_offdiag)
    np.fill_diagonal(scale, 1.0)
    sigma_raw = stats.invwishart.rvs(df=J + config.iw_dof_offset, scale=scale,
                                     random_state=rng)
    sigma_raw = np.atleast_2d(sigma_raw)
    sigma = J * sigma_raw / np.trace(sigma_raw)
    mean = intercepts + (x_a[:, 1:, 0] - x_a[:, :1, 0]) * config.price_coef
    L = np.linalg.cholesky(sigma)
    Z = mean + rng.standard_normal((N, J)) @ L.T
    dataset = ChoiceDataset(
        choices=choices_from_utilities(Z), alt_covariates=x_a,
        include_intercept=True, alt_names=("log_price",),
    )
    return dataset, DgpTruth(beta=beta, sigma=sigma)


def train_test_split(n_obs: int, test_fraction: float = 0.2, seed: int = 0):
    """Random index partition; the rounding remainder goes to the train side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_obs)
    n_test = int(n_obs * test_fraction)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _fit_and_report(dataset_train, dataset_test, variant, sampler_config,
                    prior, R, pmf_seed):
    config = replace(sampler_config, variant=variant)
    draws = run_chain(dataset_train, config, prior=prior)
    pmf_in = predictive_pmf(dataset_train, draws, R=R, seed=pmf_seed)
    pmf_out = predictive_pmf(dataset_test, draws, R=R, seed=pmf_seed + 1)
    return draws, (
        make_report(pmf_in, dataset_train.choices, variant, "in"),
        make_report(pmf_out, dataset_test.choices, variant, "out"),
    )


def run_numerical_experiment(dgp: DgpConfig, variants, sampler_config: SamplerConfig,
                             theta: Hyperparameters, calibration_draws: int = 100_000,
                             calibration_seed: int = 0, R: int = 5,
                             test_fraction: float = 0.2, split_seed: int = 0,
                             pmf_seed: int = 0, workers: int = 1, cache_dir=None,
                             run_dir=None) -> ExperimentResult:
    """Simulate, fit each requested variant, and evaluate everything on one split."""
    unknown = [v for v in variants if v not in KNOWN_VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants: {unknown}")
    dataset, truth = simulate_dataset(dgp)
    train_idx, test_idx = train_test_split(dataset.N, test_fraction, split_seed)
    ds_train = take_observations(dataset, train_idx)
    ds_test = take_observations(dataset, test_idx)
    ds_train_s, record = standardize_covariates(ds_train)
    ds_test_s = apply_scaling(ds_test, record)
    prior = None
    if VARIANT_FS in variants:
        prior = calibrate_prior(theta, ds_train.J, M=calibration_draws,
                                seed=calibration_seed, workers=workers,
                                cache_dir=cache_dir)
    reports, draws, timing = [], {}, {}
    for variant in variants:
        if variant == NAIVE:
            pmf_in = naive_forecast(ds_train.choices, dataset.J + 1, n_obs=ds_train.N)
            pmf_out = naive_forecast(ds_train.choices, dataset.J + 1, n_obs=ds_test.N)
            reports.append(make_report(pmf_in, ds_train.choices, NAIVE, "in"))
            reports.append(make_report(pmf_out, ds_test.choices, NAIVE, "out"))
            continue
        d, reps = _fit_and_report(ds_train_s, ds_test_s, variant, sampler_config,
                                  prior if variant == VARIANT_FS else None, R, pmf_seed)
        draws[variant] = d
        timing[variant] = d.seconds_per_iteration
        reports.extend(reps)
    recovery = None
    if VARIANT_FS in draws:
        d = draws[VARIANT_FS]
        beta_mean = unscale_coefficients(record, d.beta, ds_train).mean(axis=0)
        sigma_mean = posterior_mean_covariance(d)
        corr_mean = posterior_mean_correlation(d)
        recovery = recovery_error_groups(beta_mean, sigma_mean, corr_mean,
                                         truth.beta, truth.sigma)
    result = ExperimentResult(
        truth=truth, reports=tuple(reports), draws=draws, recovery=recovery,
        timing=timing, train_idx=train_idx, test_idx=test_idx,
    )
    if run_dir is not None:
        _write_experiment_outputs(run_dir, dataset, record, result, ds_train)
    return result


def _price_grid(dataset: ChoiceDataset, size: int) -> np.ndarray:
    prices = dataset.alt_covariates[:, :, 0]
    center, spread = prices.mean(), prices.std()
    return np.linspace(center - 2 * spread, center + 2 * spread, size)


def _curve_dataset(dataset: ChoiceDataset, category: int, grid: np.ndarray) -> ChoiceDataset:
    """One pseudo-observation per grid point: the target category's price moves
    along the grid, every other price is fixed at its mean."""
    means = dataset.alt_covariates.mean(axis=0)
    alt = np.tile(means, (grid.size, 1, 1))
    alt[:, category, 0] = grid
    return ChoiceDataset(
        choices=np.zeros(grid.size, dtype=np.int64), alt_covariates=alt,
        include_intercept=dataset.include_intercept, alt_names=dataset.alt_names,
    )


def _truth_curve(truth: DgpTruth, curve_ds: ChoiceDataset, category: int,
                 mc_draws: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = build_design_tensor(curve_ds)
    mean = X @ truth.beta
    L = np.linalg.cholesky(truth.sigma)
    hits = np.zeros(curve_ds.N)
    for _ in range(mc_draws):
        Z = mean + rng.standard_normal(mean.shape) @ L.T
        hits += choices_from_utilities(Z) == category
    return hits / mc_draws


def base_sensitivity_run(dgp: DgpConfig, bases, prior_thetas: dict,
                         sampler_config: SamplerConfig, categories=None,
                         grid_size: int = 25, calibration_draws: int = 100_000,
                         calibration_seed: int = 0, R: int = 5, pmf_seed: int = 0,
                         workers: int = 1, cache_dir=None, run_dir=None) -> list:
    """Fitted purchase-probability curves for every (prior, base) cell.

    Returns tidy rows: prior label, base category, target category, price,
    probability; plus reference rows computed from the true parameters under
    the label `dgp-truth`. Categories default to the least and most frequently
    chosen.
    """
    dataset, truth = simulate_dataset(dgp)
    J = dataset.J
    for base in bases:
        if not 0 <= base <= J:
            raise ValueError(f"base category {base} out of range")
    if categories is None:
        freq = np.bincount(dataset.choices, minlength=J + 1)
        categories = [int(np.argmin(freq)), int(np.argmax(freq))]
    grid = _price_grid(dataset, grid_size)
    rows = []
    for category in categories:
        curve_ds = _curve_dataset(dataset, category, grid)
        probs = _truth_curve(truth, curve_ds, category, mc_draws=2000,
                             seed=pmf_seed + 17)
        for g, p in zip(grid, probs):
            rows.append({"prior": "dgp-truth", "base": -1, "category": category,
                         "price": float(g), "probability": float(p)})
    for prior_label, theta in prior_thetas.items():
        prior = calibrate_prior(theta, J, M=calibration_draws, seed=calibration_seed,
                                workers=workers, cache_dir=cache_dir)
        for base in bases:
            ds_b = relabel_base_category(dataset, base)
            ds_b_s, record = standardize_covariates(ds_b)
            config = replace(sampler_config, variant=VARIANT_FS)
            draws = run_chain(ds_b_s, config, prior=prior)
            for category in categories:
                curve_b = relabel_base_category(
                    _curve_dataset(dataset, category, grid), base)
                curve_scaled = apply_scaling(curve_b, record)
                pmf = predictive_pmf(curve_scaled, draws, R=R, seed=pmf_seed)
                slot = 0 if category == base else (base if category == 0 else category)
                for g, p in zip(grid, pmf.probs[:, slot]):
                    rows.append({"prior": prior_label, "base": int(base),
                                 "category": int(category), "price": float(g),
                                 "probability": float(p)})
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        _write_rows_csv(os.path.join(run_dir, "curves.csv"), rows,
                        ["prior", "base", "category", "price", "probability"])
    return rows


def parse_manifest(path) -> dict:
    """Read a `key = value` manifest; later lines win, comments start with #."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _write_rows_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_metrics_csv(path, reports, reference: str = None) -> None:
    """Metric table `model, sample, hit_rate, log_score, p_vs_reference`.

    The p column is the log-score comparison against the reference model on
    the same sample (empty for the reference itself).
    """
    by_key = {(r.model, r.sample): r for r in reports}
    models = []
    for r in reports:
        if r.model not in models:
            models.append(r.model)
    if reference is None:
        reference = VARIANT_FS if VARIANT_FS in models else models[0]
    rows = []
    for r in reports:
        p = ""
        ref = by_key.get((reference, r.sample))
        if r.model != reference and ref is not None and r.log_probs is not None:
            p = repr(compare_log_scores(ref, r).p_value)
        rows.append({"model": r.model, "sample": r.sample,
                     "hit_rate": repr(r.hit_rate), "log_score": repr(r.log_score),
                     "p_vs_reference": p})
    _write_rows_csv(path, rows, ["model", "sample", "hit_rate", "log_score",
                                 "p_vs_reference"])


def write_pvalues_csv(path, reports, reference: str = None) -> None:
    """Pairwise test appendix: one row per (sample, metric, benchmark)."""
    by_key = {(r.model, r.sample): r for r in reports}
    models = []
    for r in reports:
        if r.model not in models:
            models.append(r.model)
    if reference is None:
        reference = VARIANT_FS if VARIANT_FS in models else models[0]
    rows = []
    for sample in ("in", "out"):
        for model in models:
            if model == reference:
                continue
            ref, other = by_key.get((reference, sample)), by_key.get((model, sample))
            if ref is None or other is None:
                continue
            for metric, test in (("hit-rate", compare_hit_rates),
                                 ("log-score", compare_log_scores)):
                res = test(ref, other)
                rows.append({"sample": sample, "metric": metric, "model": model,
                             "statistic": repr(res.statistic),
                             "p_value": repr(res.p_value)})
    _write_rows_csv(path, rows, ["sample", "metric", "model", "statistic", "p_value"])


def _write_experiment_outputs(run_dir, dataset, record, result: ExperimentResult,
                              ds_train) -> None:
    os.makedirs(run_dir, exist_ok=True)
    write_long_csv(dataset, os.path.join(run_dir, "dataset.csv"))
    np.savetxt(os.path.join(run_dir, "truth_beta.csv"), result.truth.beta[None, :],
               delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(run_dir, "truth_sigma.csv"), result.truth.sigma,
               delimiter=",", fmt="%.17g")
    with open(os.path.join(run_dir, "split.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs_id", "role"])
        for i in result.train_idx:
            writer.writerow([int(i), "train"])
        for i in result.test_idx:
            writer.writerow([int(i), "test"])
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), result.reports)
    write_pvalues_csv(os.path.join(run_dir, "pvalues.csv"), result.reports)
    for variant, draws in result.draws.items():
        save_draws(draws, os.path.join(run_dir, variant))
    if result.recovery is not None:
        rows = [{"group": g, "rmse": repr(v[0]), "mae": repr(v[1])}
                for g, v in result.recovery.items()]
        _write_rows_csv(os.path.join(run_dir, "recovery.csv"), rows,
                        ["group", "rmse", "mae"])
        d = result.draws[VARIANT_FS]
        beta_mean = unscale_coefficients(record, d.beta, ds_train).mean(axis=0)
        sigma_mean = posterior_mean_covariance(d)
        corr_mean = posterior_mean_correlation(d)
        corr_true = correlation_from_covariance(result.truth.sigma)
        iu = np.triu_indices(result.truth.sigma.shape[0], k=1)
        _write_scatter(os.path.join(run_dir, "scatter_coefficients.csv"),
                       result.truth.beta, beta_mean)
        _write_scatter(os.path.join(run_dir, "scatter_variances.csv"),
                       np.diag(result.truth.sigma), np.diag(sigma_mean))
        _write_scatter(os.path.join(run_dir, "scatter_correlations.csv"),
                       corr_true[iu], corr_mean[iu])
    if result.timing:
        rows = [{"variant": v, "seconds_per_iteration": repr(t)}
                for v, t in sorted(result.timing.items())]
        _write_rows_csv(os.path.join(run_dir, "timing.csv"), rows,
                        ["variant", "seconds_per_iteration"])


def _write_scatter(path, truth_values, estimates) -> None:
    rows = [{"truth": repr(float(t)), "estimate": repr(float(e))}
            for t, e in zip(np.ravel(truth_values), np.ravel(estimates))]
    _write_rows_csv(path, rows, ["truth", "estimate"])
