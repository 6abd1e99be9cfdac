"""Three-step MCMC for the latent-utility choice model.

Each iteration draws, in order: the coefficients from their conjugate normal
conditional; the latent utilities coordinate by coordinate from univariate
truncated normals that keep every observation consistent with its observed
choice; and, for the factor-covariance variant, the covariance angles by
blocked random-walk Metropolis-Hastings with truncated-normal proposals whose
scales adapt during burn-in. The identity-covariance variant skips the third
step and keeps Sigma = I throughout.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr, ndtri

from .data import ChoiceDataset, build_design_tensor, choices_from_utilities
from .prior import CalibratedPrior, flexible_logpdf, sample_calibrated_angles
from .spherical import angle_bounds, covariance_from_angles

__all__ = [
    "SamplerConfig",
    "McmcState",
    "PosteriorDraws",
    "sample_truncnorm",
    "init_state",
    "gibbs_beta",
    "conditional_coefficients",
    "gibbs_latent_utilities",
    "gaussian_loglik",
    "mh_angles_sweep",
    "adapt_proposals",
    "run_chain",
    "save_draws",
    "load_draws",
]

_LOG_2PI = np.log(2.0 * np.pi)
_TAIL_CUT = 4.0

VARIANT_FS = "mnp-fs"
VARIANT_IDENTITY = "mnp-i"


# ---------------------------------------------------------------------------
# truncated normal sampling

def _lower_tail_standard(a, b, rng):
    """Standard normal conditioned on [a, b] with a > _TAIL_CUT.

    Translated-exponential rejection sampling; robust arbitrarily deep in the
    tail, where CDF inversion loses all precision.
    """
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    while np.any(todo):
        idx = np.flatnonzero(todo)
        x = a[idx] + rng.exponential(1.0, size=idx.size) / lam[idx]
        accept = rng.random(idx.size) <= np.exp(-0.5 * (x - lam[idx]) ** 2)
        accept &= x <= b[idx]
        out[idx[accept]] = x[accept]
        todo[idx[accept]] = False
    return out


def sample_truncnorm(mean, sd, lower, upper, rng):
    """Normal(mean, sd^2) draws restricted to [lower, upper], elementwise.

    Bounds may be -inf/+inf. CDF inversion is used when the interval touches
    the central four standard deviations; intervals entirely beyond that are
    sampled by exponential rejection.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, dtype=np.float64), np.asarray(sd, dtype=np.float64),
        np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64))
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if np.any(a >= b):
        raise ValueError("lower bound must be below upper bound")
    x = np.empty(a.shape)
    right = a > _TAIL_CUT
    left = b < -_TAIL_CUT
    mid = ~(right | left)
    if np.any(mid):
        am, bm = a[mid], b[mid]
        u = rng.random(am.shape)
        xm = np.empty_like(am)
        hi = am >= 0  # interval in the right half: work on the survival scale
        if np.any(hi):
            qa = ndtr(-am[hi])
            qb = ndtr(-bm[hi])
            xm[hi] = -ndtri(np.maximum(qa + u[hi] * (qb - qa), 1e-300))
        lo = ~hi & (bm <= 0)
        if np.any(lo):
            pa = ndtr(am[lo])
            pb = ndtr(bm[lo])
            xm[lo] = ndtri(np.maximum(pa + u[lo] * (pb - pa), 1e-300))
        straddle = ~hi & ~lo
        if np.any(straddle):
            pa = ndtr(am[straddle])
            pb = ndtr(bm[straddle])
            xm[straddle] = ndtri(pa + u[straddle] * (pb - pa))
        x[mid] = xm
    if np.any(right):
        x[right] = _lower_tail_standard(a[right], b[right], rng)
    if np.any(left):
        x[left] = -_lower_tail_standard(-b[left], -a[left], rng)
    return mean + sd * x


# ---------------------------------------------------------------------------
# configuration and state

@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, priors, blocking, and adaptation settings.

    `coef_prior_variance` is the variance v of the Normal(0, v I) coefficient
    prior, i.e. the prior precision matrix is (1/v) I. The default v = 10
    (precision 0.1) is deliberately mild for covariates scaled to unit
    variance; note that tight values shrink the intercepts of rarely chosen
    categories, whose likelihood information is one-sided. Proposal scales
    adapt every `adapt_batch` iterations during burn-in, nudging per-angle
    log scales toward the [accept_low, accept_high] acceptance band.
    """

    total_iterations: int = 20_000
    burn_in: int = 10_000
    thinning: int = 10
    coef_prior_variance: float = 10.0
    block_size: int = 5
    adapt_batch: int = 50
    accept_low: float = 0.15
    accept_high: float = 0.30
    initial_proposal_scale: float = 0.1
    seed: int = 0
    variant: str = VARIANT_FS

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValueError("need 0 <= burn_in < total_iterations")
        if self.block_size < 1 or self.thinning < 1 or self.adapt_batch < 1:
            raise ValueError("block_size, thinning and adapt_batch must be >= 1")
        if self.coef_prior_variance <= 0:
            raise ValueError("coef_prior_variance must be positive")
        if self.variant not in (VARIANT_FS, VARIANT_IDENTITY):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def n_retained(self) -> int:
        return (self.total_iterations - self.burn_in) // self.thinning


@dataclass
class McmcState:
    """Mutable chain state: parameters, latent utilities, proposal bookkeeping."""

    beta: np.ndarray
    Z: np.ndarray
    kappa: np.ndarray = None
    log_scales: np.ndarray = None
    batch_accepts: np.ndarray = None
    batch_proposals: np.ndarray = None
    post_accepts: np.ndarray = None
    post_proposals: np.ndarray = None
    adapt_events: int = 0


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained draws with chain metadata."""

    beta: np.ndarray
    kappa: np.ndarray
    J: int
    q: int
    config: SamplerConfig
    acceptance: np.ndarray = None
    seconds_per_iteration: float = float("nan")

    def __post_init__(self):
        if self.beta.shape[0] != self.config.n_retained:
            raise ValueError("retained draw count does not match the configuration")
        if self.kappa is not None and self.kappa.shape[0] != self.beta.shape[0]:
            raise ValueError("beta and kappa draw counts differ")

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def variant(self) -> str:
        return self.config.variant


def init_state(dataset: ChoiceDataset, config: SamplerConfig,
               prior: CalibratedPrior, rng) -> McmcState:
    """Initial state: angles from the calibrated prior, utilities consistent
    with the observed choices.

    Undifferenced utilities start as centered standard normals, permuted so
    each observation's maximum sits at its observed category, then differenced
    against category 0.
    """
    N, J = dataset.N, dataset.J
    kappa = None
    log_scales = None
    n_angles = 0
    if config.variant == VARIANT_FS:
        if prior is None:
            raise ValueError("the factor-covariance variant requires a calibrated prior")
        kappa = sample_calibrated_angles(prior, 1, rng)[0]
        n_angles = kappa.size
        log_scales = np.full(n_angles, np.log(config.initial_proposal_scale))
    zt = rng.standard_normal((N, J + 1))
    zt -= zt.mean(axis=1, keepdims=True)
    rows = np.arange(N)
    top = zt.argmax(axis=1)
    y = dataset.choices
    tmp = zt[rows, top].copy()
    zt[rows, top] = zt[rows, y]
    zt[rows, y] = tmp
    Z = zt[:, 1:] - zt[:, :1]
    if not np.array_equal(choices_from_utilities(Z), y):
        raise RuntimeError("initialization failed to match observed choices")
    zeros = np.zeros(n_angles)
    return McmcState(
        beta=np.zeros(dataset.K), Z=Z, kappa=kappa, log_scales=log_scales,
        batch_accepts=zeros.copy(), batch_proposals=zeros.copy(),
        post_accepts=zeros.copy(), post_proposals=zeros.copy(),
    )


# ---------------------------------------------------------------------------
# step 1: coefficients

def gibbs_beta(Z: np.ndarray, X: np.ndarray, sigma: np.ndarray,
               prior_precision, rng) -> np.ndarray:
    """Conjugate draw of beta given utilities and covariance.

    Posterior Normal(bbar, Bbar^{-1}) with Bbar = sum_i X_i' Sig^{-1} X_i + B
    and bbar = Bbar^{-1} sum_i X_i' Sig^{-1} Z_i.
    """
    N, J, K = X.shape
    B = np.asarray(prior_precision, dtype=np.float64)
    if B.ndim == 0:
        B = float(B) * np.eye(K)
    A = B.copy()
    c = np.zeros(K)
    if N:
        L = np.linalg.cholesky(sigma)
        Xw = solve_triangular(L, X.transpose(1, 0, 2).reshape(J, N * K),
                              lower=True, check_finite=False).reshape(J, N, K)
        Zw = solve_triangular(L, Z.T, lower=True, check_finite=False)
        flat = Xw.transpose(1, 0, 2).reshape(N * J, K)
        A += flat.T @ flat
        c = flat.T @ Zw.T.ravel()
    La = np.linalg.cholesky(A)
    mean = cho_solve((La, True), c, check_finite=False)
    noise = solve_triangular(La.T, rng.standard_normal(K), lower=False, check_finite=False)
    return mean + noise


# ---------------------------------------------------------------------------
# step 2: latent utilities

def conditional_coefficients(sigma: np.ndarray):
    """Per-coordinate regression weights and residual variances.

    Row j of F holds Sig_{j,(j)} Sig_{(j),(j)}^{-1}; cvar[j] is the
    conditional variance of coordinate j given the rest. Recomputed only when
    Sigma changes.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    J = sigma.shape[0]
    F = np.zeros((J, J - 1))
    cvar = np.empty(J)
    for j in range(J):
        others = [k for k in range(J) if k != j]
        if others:
            F[j] = np.linalg.solve(sigma[np.ix_(others, others)], sigma[others, j])
            cvar[j] = sigma[j, j] - F[j] @ sigma[others, j]
        else:
            cvar[j] = sigma[j, j]
        if cvar[j] <= 0:
            raise np.linalg.LinAlgError(
                f"non-positive conditional variance at coordinate {j}; "
                "covariance numerically singular")
    return F, cvar


def gibbs_latent_utilities(Z: np.ndarray, choices: np.ndarray, mean: np.ndarray,
                           sigma: np.ndarray, rng, cond=None) -> np.ndarray:
    """Full sweep of single-coordinate truncated-normal utility updates.

    Coordinate j is redrawn from its Gaussian conditional, truncated below at
    max(other coordinates, 0) when j is the observed category and above by the
    same cut otherwise, which preserves choice consistency after every
    update. Coordinates are swept in fixed order; observations are updated in
    parallel since they are independent given the parameters.
    """
    F, cvar = conditional_coefficients(sigma) if cond is None else cond
    sd = np.sqrt(cvar)
    Z = Z.copy()
    N, J = Z.shape
    for j in range(J):
        others = [k for k in range(J) if k != j]
        if others:
            mu_j = mean[:, j] + (Z[:, others] - mean[:, others]) @ F[j]
            cut = np.maximum(Z[:, others].max(axis=1), 0.0)
        else:
            mu_j = mean[:, j]
            cut = np.zeros(N)
        is_chosen = choices == j + 1
        lower = np.where(is_chosen, cut, -np.inf)
        upper = np.where(is_chosen, np.inf, cut)
        Z[:, j] = sample_truncnorm(mu_j, sd[j], lower, upper, rng)
    return Z


# ---------------------------------------------------------------------------
# step 3: covariance angles

def gaussian_loglik(resid: np.ndarray, sigma: np.ndarray) -> float:
    """Log density of iid rows resid ~ Normal(0, sigma); -inf if sigma is not PD."""
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return -np.inf
    N, J = resid.shape
    w = solve_triangular(L, resid.T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (N * (J * _LOG_2PI + logdet) + np.sum(w * w))


def _log_trunc_mass(center, scale, lower, upper):
    mass = ndtr((upper - center) / scale) - ndtr((lower - center) / scale)
    return np.log(np.maximum(mass, 1e-300))


def mh_angles_sweep(kappa: np.ndarray, log_scales: np.ndarray, resid: np.ndarray,
                    prior: CalibratedPrior, J: int, q: int, block_size: int, rng):
    """One pass of blocked random-walk updates over all angles.

    Angles are randomly partitioned into blocks (the final block takes the
    remainder). Each block is proposed from independent truncated normals
    centered at the current values and accepted with the usual ratio, which
    includes the truncated-normal normalizing constants because the proposal
    is not symmetric near the domain boundaries.

    Returns the updated angles, a 0/1 acceptance indicator per angle, and the
    log-likelihood at the returned state.
    """
    n_angles = kappa.size
    lower, upper = angle_bounds(n_angles + 1)
    kappa = kappa.copy()
    ll_cur = gaussian_loglik(resid, covariance_from_angles(kappa, J, q))
    lp_cur = np.array([flexible_logpdf(kappa[l], prior.margins[l])
                       for l in range(n_angles)])
    if not np.isfinite(ll_cur) or not np.all(np.isfinite(lp_cur)):
        raise RuntimeError("non-finite posterior density at current state")
    accepted = np.zeros(n_angles)
    order = rng.permutation(n_angles)
    for start in range(0, n_angles, block_size):
        blk = order[start:start + block_size]
        scales = np.exp(log_scales[blk])
        prop = sample_truncnorm(kappa[blk], scales, lower[blk], upper[blk], rng)
        kap_new = kappa.copy()
        kap_new[blk] = prop
        ll_new = gaussian_loglik(resid, covariance_from_angles(kap_new, J, q))
        lp_new = np.array([flexible_logpdf(kap_new[l], prior.margins[l]) for l in blk])
        correction = float(np.sum(_log_trunc_mass(kappa[blk], scales, lower[blk], upper[blk])
                                  - _log_trunc_mass(prop, scales, lower[blk], upper[blk])))
        log_alpha = (ll_new - ll_cur) + float(np.sum(lp_new - lp_cur[blk])) + correction
        if np.log(rng.random()) < log_alpha:
            kappa = kap_new
            ll_cur = ll_new
            lp_cur[blk] = lp_new
            accepted[blk] = 1.0
    return kappa, accepted, ll_cur


def adapt_proposals(log_scales: np.ndarray, accepts: np.ndarray,
                    proposals: np.ndarray, t: int,
                    accept_low: float = 0.15, accept_high: float = 0.30) -> np.ndarray:
    """Diminishing-adaptation update of per-angle proposal log scales.

    The step size min(0.1, t^{-1/2}) shrinks with the adaptation event count
    t, so the kernel settles down; scales move up when a batch accepts too
    often and down when it accepts too rarely.
    """
    delta = min(0.1, t ** -0.5)
    rate = accepts / np.maximum(proposals, 1.0)
    return log_scales + delta * (rate > accept_high) - delta * (rate < accept_low)


# ---------------------------------------------------------------------------
# chain driver

def _check_consistency(Z, choices, iteration):
    if not np.array_equal(choices_from_utilities(Z), choices):
        raise RuntimeError(
            f"choice consistency invariant breached at iteration {iteration}")


def run_chain(dataset: ChoiceDataset, config: SamplerConfig,
              prior: CalibratedPrior = None, stream_dir=None) -> PosteriorDraws:
    """Run the full sampler and return retained post-burn-in draws.

    Proposal adaptation happens only during burn-in, so the retained part of
    the chain has a fixed kernel. With `stream_dir`, retained draws are also
    appended to CSV files every 1000 iterations.
    """
    rng = np.random.default_rng(config.seed)
    if dataset.N == 0:
        raise ValueError("dataset is empty")
    fs = config.variant == VARIANT_FS
    J, K = dataset.J, dataset.K
    if fs and prior is not None and prior.J != J:
        raise ValueError(
            f"prior was calibrated for J={prior.J} but the data has J={J}")
    q = prior.q if fs else 0
    X = build_design_tensor(dataset)
    B = np.eye(K) / config.coef_prior_variance
    state = init_state(dataset, config, prior, rng)
    _check_consistency(state.Z, dataset.choices, 0)
    sigma = covariance_from_angles(state.kappa, J, q) if fs else np.eye(J)
    cond = conditional_coefficients(sigma)
    n_ret = config.n_retained
    beta_draws = np.empty((n_ret, K))
    kappa_draws = np.empty((n_ret, state.kappa.size)) if fs else None
    stream = _DrawStreamer(stream_dir, K, 0 if not fs else state.kappa.size) \
        if stream_dir is not None else None
    kept = 0
    t_start = time.perf_counter()
    for it in range(1, config.total_iterations + 1):
        state.beta = gibbs_beta(state.Z, X, sigma, B, rng)
        mean = X @ state.beta
        state.Z = gibbs_latent_utilities(state.Z, dataset.choices, mean, sigma, rng, cond=cond)
        if fs:
            resid = state.Z - mean
            state.kappa, accepted, _ = mh_angles_sweep(
                state.kappa, state.log_scales, resid, prior, J, q,
                config.block_size, rng)
            sigma = covariance_from_angles(state.kappa, J, q)
            cond = conditional_coefficients(sigma)
            state.batch_accepts += accepted
            state.batch_proposals += 1.0
            if it > config.burn_in:
                state.post_accepts += accepted
                state.post_proposals += 1.0
            if it <= config.burn_in and it % config.adapt_batch == 0:
                state.adapt_events += 1
                state.log_scales = adapt_proposals(
                    state.log_scales, state.batch_accepts, state.batch_proposals,
                    state.adapt_events, config.accept_low, config.accept_high)
                state.batch_accepts[:] = 0.0
                state.batch_proposals[:] = 0.0
        if it % 100 == 0:
            _check_consistency(state.Z, dataset.choices, it)
        if it > config.burn_in and (it - config.burn_in) % config.thinning == 0:
            beta_draws[kept] = state.beta
            if fs:
                kappa_draws[kept] = state.kappa
            kept += 1
        if stream is not None and it % 1000 == 0:
            stream.flush(beta_draws[:kept], kappa_draws[:kept] if fs else None)
    seconds = (time.perf_counter() - t_start) / config.total_iterations
    if stream is not None:
        stream.flush(beta_draws[:kept], kappa_draws[:kept] if fs else None)
    acceptance = None
    if fs:
        acceptance = state.post_accepts / np.maximum(state.post_proposals, 1.0)
    return PosteriorDraws(
        beta=beta_draws, kappa=kappa_draws, J=J, q=q, config=config,
        acceptance=acceptance, seconds_per_iteration=seconds,
    )


class _DrawStreamer:
    """Append-only CSV mirror of the retained draws."""

    def __init__(self, out_dir, n_beta, n_kappa):
        os.makedirs(out_dir, exist_ok=True)
        self.beta_path = os.path.join(out_dir, "beta.csv")
        self.kappa_path = os.path.join(out_dir, "kappa.csv") if n_kappa else None
        self.written = 0
        with open(self.beta_path, "w") as fh:
            fh.write(",".join(f"beta_{k}" for k in range(n_beta)) + "\n")
        if self.kappa_path:
            with open(self.kappa_path, "w") as fh:
                fh.write(",".join(f"kappa_{l}" for l in range(n_kappa)) + "\n")

    def flush(self, beta, kappa):
        new = beta.shape[0] - self.written
        if new <= 0:
            return
        with open(self.beta_path, "a") as fh:
            np.savetxt(fh, beta[self.written:], delimiter=",", fmt="%.17g")
        if self.kappa_path and kappa is not None:
            with open(self.kappa_path, "a") as fh:
                np.savetxt(fh, kappa[self.written:], delimiter=",", fmt="%.17g")
        self.written = beta.shape[0]


def save_draws(draws: PosteriorDraws, out_dir, beta_labels=None) -> None:
    """Persist draws as beta.csv / kappa.csv plus a JSON metadata sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    labels = beta_labels or [f"beta_{k}" for k in range(draws.beta.shape[1])]
    with open(os.path.join(out_dir, "beta.csv"), "w") as fh:
        fh.write(",".join(labels) + "\n")
        np.savetxt(fh, draws.beta, delimiter=",", fmt="%.17g")
    if draws.kappa is not None:
        with open(os.path.join(out_dir, "kappa.csv"), "w") as fh:
            fh.write(",".join(f"kappa_{l}" for l in range(draws.kappa.shape[1])) + "\n")
            np.savetxt(fh, draws.kappa, delimiter=",", fmt="%.17g")
    meta = {
        "variant": draws.variant,
        "J": draws.J,
        "q": draws.q,
        "config": asdict(draws.config),
        "acceptance": None if draws.acceptance is None else draws.acceptance.tolist(),
        "seconds_per_iteration": draws.seconds_per_iteration,
        "beta_labels": list(labels),
    }
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_draws(in_dir) -> PosteriorDraws:
    with open(os.path.join(in_dir, "metadata.json")) as fh:
        meta = json.load(fh)
    beta = np.loadtxt(os.path.join(in_dir, "beta.csv"), delimiter=",", skiprows=1, ndmin=2)
    kappa = None
    kappa_path = os.path.join(in_dir, "kappa.csv")
    if os.path.exists(kappa_path):
        kappa = np.loadtxt(kappa_path, delimiter=",", skiprows=1, ndmin=2)
    acceptance = meta["acceptance"]
    return PosteriorDraws(
        beta=beta, kappa=kappa, J=meta["J"], q=meta["q"],
        config=SamplerConfig(**meta["config"]),
        acceptance=None if acceptance is None else np.asarray(acceptance),
        seconds_per_iteration=meta["seconds_per_iteration"],
    )
