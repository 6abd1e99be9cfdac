"""Choice data containers, design matrices, and the deterministic choice rule.

The central object is :class:`ChoiceDataset`: N observed choices among J+1
alternatives, with alternative-specific covariates (one value per alternative,
e.g. log prices) and optional individual-specific covariates. Category 0 plays
the role of the base alternative; utilities are modeled in differences with
respect to it, which turns a (J+1)-alternative problem into a J-dimensional
latent-utility model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ChoiceDataset",
    "DesignRow",
    "ScalingRecord",
    "build_design_row",
    "build_design_tensor",
    "choice_from_utilities",
    "choices_from_utilities",
    "relabel_base_category",
    "standardize_covariates",
    "apply_scaling",
    "unscale_coefficients",
    "take_observations",
    "read_long_csv",
    "write_long_csv",
]


@dataclass(frozen=True)
class ChoiceDataset:
    """Observed choices plus covariates, immutable after construction.

    Attributes
    ----------
    choices : (N,) int array with values in {0, ..., J}.
    alt_covariates : (N, J+1, k_a) array of alternative-specific covariates.
    indiv_covariates : (N, k_d) array of individual-specific covariates.
    include_intercept : whether design matrices carry alternative intercepts.
    category_labels : (J+1,) original label of each current category slot;
        identity for freshly constructed datasets, permuted by
        :func:`relabel_base_category`.
    """

    choices: np.ndarray
    alt_covariates: np.ndarray
    indiv_covariates: np.ndarray = None
    include_intercept: bool = True
    category_labels: np.ndarray = None
    alt_names: tuple = ()
    indiv_names: tuple = ()

    def __post_init__(self):
        choices = np.asarray(self.choices, dtype=np.int64)
        alt = np.asarray(self.alt_covariates, dtype=np.float64)
        if alt.ndim == 2:  # single covariate passed as (N, J+1)
            alt = alt[:, :, None]
        if alt.ndim != 3:
            raise ValueError("alt_covariates must have shape (N, J+1, k_a)")
        indiv = self.indiv_covariates
        indiv = np.zeros((alt.shape[0], 0)) if indiv is None else np.asarray(indiv, dtype=np.float64)
        if indiv.ndim != 2 or indiv.shape[0] != alt.shape[0]:
            raise ValueError("indiv_covariates must have shape (N, k_d)")
        if choices.shape != (alt.shape[0],):
            raise ValueError("choices must have shape (N,)")
        n_alts = alt.shape[1]
        if n_alts < 2:
            raise ValueError("need at least two alternatives")
        if choices.size and (choices.min() < 0 or choices.max() >= n_alts):
            raise ValueError(f"choices must lie in 0..{n_alts - 1}")
        labels = self.category_labels
        labels = np.arange(n_alts) if labels is None else np.asarray(labels, dtype=np.int64)
        if sorted(labels.tolist()) != list(range(n_alts)):
            raise ValueError("category_labels must be a permutation of 0..J")
        alt_names = tuple(self.alt_names) or tuple(f"x_a{c}" for c in range(alt.shape[2]))
        indiv_names = tuple(self.indiv_names) or tuple(f"x_d{c}" for c in range(indiv.shape[1]))
        if len(alt_names) != alt.shape[2] or len(indiv_names) != indiv.shape[1]:
            raise ValueError("covariate name count does not match covariate count")
        for name, value in [
            ("choices", choices), ("alt_covariates", alt),
            ("indiv_covariates", indiv), ("category_labels", labels),
            ("alt_names", alt_names), ("indiv_names", indiv_names),
        ]:
            object.__setattr__(self, name, value)
        for arr in (choices, alt, indiv, labels):
            arr.setflags(write=False)

    @property
    def N(self) -> int:
        return self.choices.shape[0]

    @property
    def J(self) -> int:
        """Number of non-base alternatives (dimension of differenced utilities)."""
        return self.alt_covariates.shape[1] - 1

    @property
    def k_a(self) -> int:
        return self.alt_covariates.shape[2]

    @property
    def k_d(self) -> int:
        return self.indiv_covariates.shape[1]

    @property
    def K(self) -> int:
        """Coefficient count of the differenced design."""
        return self.J * (int(self.include_intercept) + self.k_d) + self.k_a

    @property
    def base_category(self) -> int:
        """Original label of the category currently serving as the base."""
        return int(self.category_labels[0])


@dataclass(frozen=True)
class DesignRow:
    """Differenced J x K design matrix for one observation."""

    X: np.ndarray
    K: int


def build_design_row(dataset: ChoiceDataset, i: int) -> DesignRow:
    """Design matrix [I_J | x_d' kron I_J | T x_a] for observation i.

    T = [-1_J  I_J] differences the alternative covariates against the base
    row; blocks for absent components are omitted.
    """
    if not 0 <= i < dataset.N:
        raise IndexError(f"observation index {i} out of range")
    J = dataset.J
    blocks = []
    if dataset.include_intercept:
        blocks.append(np.eye(J))
    if dataset.k_d:
        blocks.append(np.kron(dataset.indiv_covariates[i][None, :], np.eye(J)))
    if dataset.k_a:
        xa = dataset.alt_covariates[i]
        blocks.append(xa[1:] - xa[0])
    if not blocks:
        raise ValueError("design has no columns: no intercept and no covariates")
    X = np.hstack(blocks)
    if X.shape != (J, dataset.K):
        raise ValueError(
            f"design shape {X.shape} inconsistent with declared K={dataset.K}"
        )
    return DesignRow(X=X, K=dataset.K)


def build_design_tensor(dataset: ChoiceDataset) -> np.ndarray:
    """Stack all design rows into an (N, J, K) tensor."""
    N, J, K = dataset.N, dataset.J, dataset.K
    X = np.empty((N, J, K))
    col = 0
    if dataset.include_intercept:
        X[:, :, :J] = np.eye(J)
        col = J
    for c in range(dataset.k_d):
        X[:, :, col:col + J] = dataset.indiv_covariates[:, c, None, None] * np.eye(J)
        col += J
    if dataset.k_a:
        xa = dataset.alt_covariates
        X[:, :, col:] = xa[:, 1:, :] - xa[:, :1, :]
    return X


def choice_from_utilities(z: np.ndarray) -> int:
    """Category implied by a differenced-utility vector.

    Returns 0 when every element is negative, otherwise the 1-based index of
    the maximal element. Exact ties break toward the lowest index.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("utilities must be finite")
    if np.all(z < 0):
        return 0
    return int(np.argmax(z)) + 1


def choices_from_utilities(Z: np.ndarray) -> np.ndarray:
    """Vectorized choice rule over an (N, J) utility matrix."""
    Z = np.asarray(Z, dtype=np.float64)
    out = np.argmax(Z, axis=1) + 1
    out[np.all(Z < 0, axis=1)] = 0
    return out


def relabel_base_category(dataset: ChoiceDataset, new_base: int) -> ChoiceDataset:
    """Swap category `new_base` with category 0 and remap all data consistently.

    The relabeling is the transposition (0 <-> new_base), so applying it twice
    with the same argument restores the original dataset.
    """
    n_alts = dataset.J + 1
    if not 0 <= new_base < n_alts:
        raise ValueError(f"new_base must lie in 0..{n_alts - 1}")
    if new_base == 0:
        return dataset
    perm = np.arange(n_alts)
    perm[0], perm[new_base] = new_base, 0
    return replace(
        dataset,
        choices=perm[dataset.choices],
        alt_covariates=dataset.alt_covariates[:, perm, :],
        category_labels=dataset.category_labels[perm],
    )


@dataclass(frozen=True)
class ScalingRecord:
    """Per-covariate means and standard deviations used for scaling.

    Covariates are divided by their pooled sample standard deviation (no
    centering: differencing removes any common shift of alternative
    covariates, and intercepts are never scaled). Means are recorded for
    reference only.
    """

    alt_mean: np.ndarray
    alt_sd: np.ndarray
    indiv_mean: np.ndarray
    indiv_sd: np.ndarray
    applied_to_coefficients: bool = False

    def __post_init__(self):
        for sd in (self.alt_sd, self.indiv_sd):
            if np.any(np.asarray(sd) <= 0):
                raise ValueError("stored standard deviations must be positive")


def standardize_covariates(dataset: ChoiceDataset) -> tuple[ChoiceDataset, ScalingRecord]:
    """Scale every covariate column to unit sample variance.

    Alternative covariates are pooled across observations and alternatives.
    Raises on constant columns.
    """
    alt = dataset.alt_covariates
    flat = alt.reshape(-1, dataset.k_a)
    alt_mean = flat.mean(axis=0) if dataset.k_a else np.zeros(0)
    alt_sd = flat.std(axis=0, ddof=1) if dataset.k_a else np.zeros(0)
    indiv = dataset.indiv_covariates
    indiv_mean = indiv.mean(axis=0) if dataset.k_d else np.zeros(0)
    indiv_sd = indiv.std(axis=0, ddof=1) if dataset.k_d else np.zeros(0)
    for label, sd in [("alternative", alt_sd), ("individual", indiv_sd)]:
        bad = np.flatnonzero(~(sd > 0))
        if bad.size:
            raise ValueError(f"constant {label} covariate column {bad[0]}")
    record = ScalingRecord(alt_mean, alt_sd, indiv_mean, indiv_sd)
    scaled = replace(
        dataset,
        alt_covariates=alt / alt_sd if dataset.k_a else alt,
        indiv_covariates=indiv / indiv_sd if dataset.k_d else indiv,
    )
    return scaled, record


def apply_scaling(dataset: ChoiceDataset, record: ScalingRecord) -> ChoiceDataset:
    """Scale a dataset with a previously computed record (e.g. test data with
    training statistics)."""
    return replace(
        dataset,
        alt_covariates=dataset.alt_covariates / record.alt_sd if dataset.k_a
        else dataset.alt_covariates,
        indiv_covariates=dataset.indiv_covariates / record.indiv_sd if dataset.k_d
        else dataset.indiv_covariates,
    )


def take_observations(dataset: ChoiceDataset, idx) -> ChoiceDataset:
    """Row subset of a dataset (e.g. a train/test split)."""
    idx = np.asarray(idx)
    return replace(
        dataset,
        choices=dataset.choices[idx],
        alt_covariates=dataset.alt_covariates[idx],
        indiv_covariates=dataset.indiv_covariates[idx],
    )


def unscale_coefficients(record: ScalingRecord, beta: np.ndarray,
                         dataset: ChoiceDataset) -> np.ndarray:
    """Map coefficients fitted on scaled covariates back to the original scale.

    `beta` may be a single (K,) vector or a (draws, K) matrix laid out as
    [intercepts | indiv blocks | alt coefficients].
    """
    if record.applied_to_coefficients:
        raise ValueError("coefficients already unscaled once")
    beta = np.array(beta, dtype=np.float64)
    J = dataset.J
    scale = np.ones(dataset.K)
    col = J if dataset.include_intercept else 0
    for c in range(dataset.k_d):
        scale[col:col + J] = record.indiv_sd[c]
        col += J
    for c in range(dataset.k_a):
        scale[col] = record.alt_sd[c]
        col += 1
    return beta / scale


def _validate_header(header, path, minimum):
    if header is None or len(header) < minimum:
        raise ValueError(f"{path}: missing or too-short header row")


def read_long_csv(alt_path, indiv_path=None, include_intercept: bool = True) -> ChoiceDataset:
    """Read a long-format choice CSV: obs_id, alt_id, chosen, covariates...

    Every obs_id must carry one row per alt_id 0..J with exactly one
    chosen=1. An optional companion CSV holds one row per obs_id with
    individual-specific covariates.
    """
    with open(alt_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _validate_header(header, alt_path, 3)
        alt_names = tuple(h.strip() for h in header[3:])
        rows = {}
        for rec in reader:
            if not rec:
                continue
            obs, alt = rec[0].strip(), int(rec[1])
            rows.setdefault(obs, {})[alt] = (int(rec[2]), [float(v) for v in rec[3:]])
    if not rows:
        raise ValueError(f"{alt_path}: no data rows")
    obs_ids = sorted(rows, key=lambda s: (len(s), s))
    alt_ids = sorted(rows[obs_ids[0]])
    n_alts = len(alt_ids)
    if alt_ids != list(range(n_alts)):
        raise ValueError(f"{alt_path}: alt_id values must be exactly 0..J")
    k_a = len(alt_names)
    choices = np.empty(len(obs_ids), dtype=np.int64)
    alt_cov = np.empty((len(obs_ids), n_alts, k_a))
    for i, obs in enumerate(obs_ids):
        if sorted(rows[obs]) != alt_ids:
            raise ValueError(f"{alt_path}: obs {obs} does not cover alt_id 0..J")
        chosen = [a for a in alt_ids if rows[obs][a][0] == 1]
        if len(chosen) != 1:
            raise ValueError(f"{alt_path}: obs {obs} must have exactly one chosen=1")
        choices[i] = chosen[0]
        for a in alt_ids:
            alt_cov[i, a] = rows[obs][a][1]
    indiv = None
    indiv_names = ()
    if indiv_path is not None:
        with open(indiv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            _validate_header(header, indiv_path, 1)
            indiv_names = tuple(h.strip() for h in header[1:])
            by_obs = {rec[0].strip(): [float(v) for v in rec[1:]] for rec in reader if rec}
        missing = [obs for obs in obs_ids if obs not in by_obs]
        if missing:
            raise ValueError(f"{indiv_path}: missing obs_id {missing[0]}")
        indiv = np.array([by_obs[obs] for obs in obs_ids])
    return ChoiceDataset(
        choices=choices, alt_covariates=alt_cov, indiv_covariates=indiv,
        include_intercept=include_intercept, alt_names=alt_names,
        indiv_names=indiv_names,
    )


def write_long_csv(dataset: ChoiceDataset, alt_path, indiv_path=None) -> None:
    """Write the dataset in the long CSV format read by :func:`read_long_csv`."""
    with open(alt_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs_id", "alt_id", "chosen", *dataset.alt_names])
        for i in range(dataset.N):
            for a in range(dataset.J + 1):
                writer.writerow([
                    i, a, int(dataset.choices[i] == a),
                    *(repr(float(v)) for v in dataset.alt_covariates[i, a]),
                ])
    if indiv_path is not None and dataset.k_d:
        with open(indiv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["obs_id", *dataset.indiv_names])
            for i in range(dataset.N):
                writer.writerow([i, *(repr(float(v)) for v in dataset.indiv_covariates[i])])
