"""Predictive distributions, forecast metrics, and accuracy comparisons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import ChoiceDataset, build_design_tensor, choices_from_utilities
from .sampler import VARIANT_FS, PosteriorDraws
from .spherical import correlation_from_covariance, covariance_from_angles

__all__ = [
    "PredictivePmf",
    "MetricReport",
    "TestResult",
    "predictive_pmf",
    "hit_rate",
    "log_score",
    "per_observation_log_probs",
    "make_report",
    "naive_forecast",
    "compare_hit_rates",
    "compare_log_scores",
    "recovery_errors",
    "recovery_error_groups",
    "posterior_mean_covariance",
    "posterior_mean_correlation",
]


@dataclass(frozen=True)
class PredictivePmf:
    """Per-observation category probabilities, additively smoothed."""

    probs: np.ndarray
    draw_count: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError("probs must be (N, J+1)")
        if np.any(probs <= 0):
            raise ValueError("smoothed probabilities must be strictly positive")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("probability rows must sum to one")
        object.__setattr__(self, "probs", probs)

    @property
    def modes(self) -> np.ndarray:
        """Point forecasts: modal category, ties to the lowest index."""
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class MetricReport:
    """Hit-rate and log-score of one model on one sample."""

    model: str
    sample: str
    hit_rate: float
    log_score: float
    hits: np.ndarray = None
    log_probs: np.ndarray = None

    def __post_init__(self):
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ValueError("hit_rate must lie in [0, 1]")
        if self.log_score > 0.0:
            raise ValueError("log_score cannot be positive")


@dataclass(frozen=True)
class TestResult:
    """Two-sided test outcome; `degenerate` marks a zero-variance differential."""

    statistic: float
    p_value: float
    degenerate: bool = False


def _smooth(counts: np.ndarray, total: int) -> np.ndarray:
    # additive constant 1/total vanishes as the sample grows
    alpha = 1.0 / total
    return (counts + alpha) / (total + counts.shape[-1] * alpha)


def predictive_pmf(dataset: ChoiceDataset, draws: PosteriorDraws, R: int = 5,
                   seed: int = 0) -> PredictivePmf:
    """Monte Carlo predictive category probabilities.

    For every retained draw and each of R utility replicates, utilities are
    simulated from the model and passed through the choice rule; category
    frequencies over all draws x replicates are then additively smoothed so
    every category keeps positive mass.
    """
    if draws.n_draws < 1 or R < 1:
        raise ValueError("need at least one draw and one replicate")
    X = build_design_tensor(dataset)
    if X.shape[2] != draws.beta.shape[1]:
        raise ValueError(
            f"coefficient dimension {draws.beta.shape[1]} does not match design "
            f"columns {X.shape[2]}")
    rng = np.random.default_rng(seed)
    N, J = X.shape[0], X.shape[1]
    counts = np.zeros((N, J + 1))
    rows = np.arange(N)
    fs = draws.variant == VARIANT_FS
    for m in range(draws.n_draws):
        mean = X @ draws.beta[m]
        sigma = covariance_from_angles(draws.kappa[m], draws.J, draws.q) if fs else np.eye(J)
        L = np.linalg.cholesky(sigma)
        for _ in range(R):
            Z = mean + rng.standard_normal((N, J)) @ L.T
            counts[rows, choices_from_utilities(Z)] += 1.0
    total = draws.n_draws * R
    return PredictivePmf(probs=_smooth(counts, total), draw_count=total)


def hit_rate(pmf: PredictivePmf, truths: np.ndarray) -> float:
    """Fraction of observations whose modal forecast equals the outcome."""
    truths = np.asarray(truths)
    if truths.shape[0] != pmf.probs.shape[0]:
        raise ValueError("observation counts disagree")
    return float(np.mean(pmf.modes == truths))


def per_observation_log_probs(pmf: PredictivePmf, truths: np.ndarray) -> np.ndarray:
    truths = np.asarray(truths)
    return np.log(pmf.probs[np.arange(truths.shape[0]), truths])


def log_score(pmf: PredictivePmf, truths: np.ndarray) -> float:
    """Average log probability assigned to the observed categories."""
    return float(np.mean(per_observation_log_probs(pmf, truths)))


def make_report(pmf: PredictivePmf, truths: np.ndarray, model: str,
                sample: str) -> MetricReport:
    truths = np.asarray(truths)
    hits = (pmf.modes == truths).astype(np.float64)
    log_probs = per_observation_log_probs(pmf, truths)
    return MetricReport(
        model=model, sample=sample, hit_rate=float(hits.mean()),
        log_score=float(log_probs.mean()), hits=hits, log_probs=log_probs,
    )


def naive_forecast(train_choices: np.ndarray, n_categories: int,
                   n_obs: int = 1) -> PredictivePmf:
    """Constant forecast from in-sample category frequencies."""
    train_choices = np.asarray(train_choices)
    if train_choices.size == 0:
        raise ValueError("empty training choices")
    counts = np.bincount(train_choices, minlength=n_categories).astype(np.float64)
    probs = _smooth(counts, train_choices.size)
    return PredictivePmf(probs=np.tile(probs, (n_obs, 1)),
                         draw_count=train_choices.size)


def _paired_normal_test(diff: np.ndarray) -> TestResult:
    n = diff.shape[0]
    if n == 0:
        raise ValueError("no paired observations")
    mean = diff.mean()
    sd = diff.std(ddof=1) if n > 1 else 0.0
    if sd == 0.0:
        if mean == 0.0:
            return TestResult(statistic=0.0, p_value=1.0)
        return TestResult(statistic=np.sign(mean) * np.inf, p_value=0.0, degenerate=True)
    z = mean / (sd / np.sqrt(n))
    return TestResult(statistic=float(z), p_value=float(2.0 * ndtr(-abs(z))))


def compare_hit_rates(report_a: MetricReport, report_b: MetricReport) -> TestResult:
    """Paired normal test on the difference of two hit proportions."""
    if report_a.hits is None or report_b.hits is None:
        raise ValueError("reports must carry per-observation hit indicators")
    if report_a.hits.shape != report_b.hits.shape:
        raise ValueError("reports cover different observation counts")
    return _paired_normal_test(report_a.hits - report_b.hits)


def compare_log_scores(report_a: MetricReport, report_b: MetricReport) -> TestResult:
    """Predictive-accuracy t-test on paired log-probability differentials.

    The mean loss differential over its sample standard error is compared to a
    standard normal; with an iid cross-section no autocorrelation correction
    is involved.
    """
    if report_a.log_probs is None or report_b.log_probs is None:
        raise ValueError("reports must carry per-observation log probabilities")
    if report_a.log_probs.shape != report_b.log_probs.shape:
        raise ValueError("reports cover different observation counts")
    return _paired_normal_test(report_a.log_probs - report_b.log_probs)


def recovery_errors(estimates: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(RMSE, MAE) of estimates against the truth for one parameter group."""
    estimates = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimates.shape != truth.shape:
        raise ValueError("estimate and truth lengths differ")
    dev = estimates - truth
    return float(np.sqrt(np.mean(dev ** 2))), float(np.mean(np.abs(dev)))


def posterior_mean_covariance(draws: PosteriorDraws) -> np.ndarray:
    if draws.kappa is None:
        return np.eye(draws.J)
    out = np.zeros((draws.J, draws.J))
    for m in range(draws.n_draws):
        out += covariance_from_angles(draws.kappa[m], draws.J, draws.q)
    return out / draws.n_draws


def posterior_mean_correlation(draws: PosteriorDraws) -> np.ndarray:
    if draws.kappa is None:
        return np.eye(draws.J)
    out = np.zeros((draws.J, draws.J))
    for m in range(draws.n_draws):
        out += correlation_from_covariance(
            covariance_from_angles(draws.kappa[m], draws.J, draws.q))
    return out / draws.n_draws


def recovery_error_groups(beta_mean: np.ndarray, sigma_mean: np.ndarray,
                          corr_mean: np.ndarray, beta_true: np.ndarray,
                          sigma_true: np.ndarray) -> dict:
    """RMSE/MAE for coefficients, variances, and off-diagonal correlations."""
    J = sigma_true.shape[0]
    iu = np.triu_indices(J, k=1)
    corr_true = correlation_from_covariance(sigma_true)
    return {
        "coefficients": recovery_errors(beta_mean, beta_true),
        "variances": recovery_errors(np.diag(sigma_mean), np.diag(sigma_true)),
        "correlations": recovery_errors(corr_mean[iu], corr_true[iu]),
    }
