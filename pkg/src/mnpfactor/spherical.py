"""Factor covariance assembly and spherical angle transforms.

The covariance of the differenced utilities is Sigma = gamma gamma' + D^2
with a J x q loading matrix gamma (zeros above the diagonal) and a diagonal
D. Fixing trace(Sigma) = J confines the free parameters
psi = (d', vech(gamma)')' to a sphere of radius sqrt(J), which this module
parametrizes by n-1 angles kappa with kappa_l in [0, pi) for l < n-1 and
kappa_{n-1} in [0, 2*pi). Batched variants operate on stacks of vectors, one
per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactorCovariance",
    "num_free_params",
    "angle_bounds",
    "validate_angles",
    "psi_from_angles",
    "psi_from_angles_batch",
    "angles_from_psi",
    "angles_from_psi_batch",
    "factor_from_psi",
    "psi_from_factor",
    "covariance_from_angles",
    "correlation_from_covariance",
]

TRACE_TOL = 1e-10


def num_free_params(J: int, q: int) -> int:
    """Free covariance parameter count n = J(q+1) - q(q-1)/2."""
    if not 1 <= q < J:
        raise ValueError(f"factor count must satisfy 1 <= q < J, got q={q}, J={J}")
    return J * (q + 1) - q * (q - 1) // 2


@dataclass(frozen=True)
class FactorCovariance:
    """Loading matrix gamma (J x q, zero strict upper triangle) and scales d."""

    gamma: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        d = np.asarray(self.d, dtype=np.float64)
        if gamma.ndim != 2 or d.ndim != 1 or gamma.shape[0] != d.shape[0]:
            raise ValueError("gamma must be (J, q) and d must be (J,)")
        if gamma.shape[1] >= gamma.shape[0]:
            raise ValueError("need q < J")
        if np.any(np.triu(gamma, k=1) != 0.0):
            raise ValueError("entries above the diagonal of gamma must be zero")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "d", d)

    @property
    def J(self) -> int:
        return self.d.shape[0]

    @property
    def q(self) -> int:
        return self.gamma.shape[1]

    def sigma(self) -> np.ndarray:
        """Covariance matrix gamma gamma' + diag(d)^2."""
        return self.gamma @ self.gamma.T + np.diag(self.d ** 2)


def angle_bounds(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise (lower, upper) domain bounds of an angle vector of length n-1."""
    lower = np.zeros(n - 1)
    upper = np.full(n - 1, np.pi)
    upper[-1] = 2 * np.pi
    return lower, upper


def validate_angles(kappa: np.ndarray) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.ndim != 1 or kappa.size < 1:
        raise ValueError("kappa must be a nonempty vector")
    lower, upper = angle_bounds(kappa.size + 1)
    if np.any(kappa < lower) or np.any(kappa >= upper):
        raise ValueError("angles outside [0,pi)^(n-2) x [0,2pi)")
    return kappa


def psi_from_angles(kappa: np.ndarray, J: int) -> np.ndarray:
    """Point on the radius-sqrt(J) sphere determined by the angles.

    psi_1 = sqrt(J) cos k_1, psi_l = sqrt(J) cos k_l prod_{j<l} sin k_j,
    psi_n = sqrt(J) prod_{j<n} sin k_j.
    """
    kappa = validate_angles(kappa)
    return psi_from_angles_batch(kappa[None, :], J)[0]


def psi_from_angles_batch(kappa: np.ndarray, J: int) -> np.ndarray:
    """Vectorized :func:`psi_from_angles` over rows of an (M, n-1) array."""
    kappa = np.asarray(kappa, dtype=np.float64)
    M, nm1 = kappa.shape
    psi = np.empty((M, nm1 + 1))
    sin_prod = np.cumprod(np.sin(kappa), axis=1)
    psi[:, 0] = np.cos(kappa[:, 0])
    if nm1 > 1:
        psi[:, 1:-1] = np.cos(kappa[:, 1:]) * sin_prod[:, :-1]
    psi[:, -1] = sin_prod[:, -1]
    return np.sqrt(J) * psi


def angles_from_psi(psi: np.ndarray) -> np.ndarray:
    """Closed-form inverse of :func:`psi_from_angles`.

    kappa_l = arccos(psi_l / sqrt(sum_{j>=l} psi_j^2)), with the reflected
    branch 2*pi - arccos(...) for the last angle when psi_n < 0. Raises when a
    tail sum vanishes (direction undefined). Scale-invariant: any positive
    multiple of psi maps to the same angles.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 1 or psi.size < 2:
        raise ValueError("psi must be a vector of length >= 2")
    tails = np.cumsum(psi[::-1] ** 2)[::-1]
    if np.any(tails[:-1] == 0.0):
        raise ValueError("degenerate direction: zero tail sum in psi")
    kappa = np.arccos(np.clip(psi[:-1] / np.sqrt(tails[:-1]), -1.0, 1.0))
    if psi[-1] < 0:
        kappa[-1] = 2 * np.pi - kappa[-1]
    return kappa


def angles_from_psi_batch(psi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`angles_from_psi` over rows of an (M, n) array."""
    psi = np.asarray(psi, dtype=np.float64)
    tails = np.cumsum(psi[:, ::-1] ** 2, axis=1)[:, ::-1]
    if np.any(tails[:, :-1] == 0.0):
        raise ValueError("degenerate direction: zero tail sum in psi")
    kappa = np.arccos(np.clip(psi[:, :-1] / np.sqrt(tails[:, :-1]), -1.0, 1.0))
    neg = psi[:, -1] < 0
    kappa[neg, -1] = 2 * np.pi - kappa[neg, -1]
    return kappa


def factor_from_psi(psi: np.ndarray, J: int, q: int) -> FactorCovariance:
    """Unpack psi = (d', vech(gamma)')' into the factor representation.

    vech stacks gamma column by column, column k holding rows k..J.
    """
    n = num_free_params(J, q)
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (n,):
        raise ValueError(f"psi must have length n={n} for J={J}, q={q}")
    d = psi[:J].copy()
    gamma = np.zeros((J, q))
    pos = J
    for k in range(q):
        m = J - k
        gamma[k:, k] = psi[pos:pos + m]
        pos += m
    return FactorCovariance(gamma=gamma, d=d)


def psi_from_factor(fc: FactorCovariance) -> np.ndarray:
    """Inverse packing of :func:`factor_from_psi`."""
    parts = [fc.d] + [fc.gamma[k:, k] for k in range(fc.q)]
    return np.concatenate(parts)


def covariance_from_angles(kappa: np.ndarray, J: int, q: int) -> np.ndarray:
    """Trace-J covariance matrix implied by an angle vector."""
    fc = factor_from_psi(psi_from_angles(kappa, J), J, q)
    return fc.sigma()


def correlation_from_covariance(sigma: np.ndarray) -> np.ndarray:
    """Correlation matrix of a covariance matrix with positive diagonal."""
    sigma = np.asarray(sigma, dtype=np.float64)
    diag = np.diag(sigma)
    if np.any(diag <= 0):
        raise ValueError("covariance diagonal must be strictly positive")
    inv_sd = 1.0 / np.sqrt(diag)
    return sigma * np.outer(inv_sd, inv_sd)
