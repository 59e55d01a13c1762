"""Spatial-correlation robust variance estimation for stacked GMM solutions.

The middle matrix accumulates kernel-weighted cross products of per-unit
moments over pairs of units, either with the kernel evaluated at integer
distance bins [s, s+1) (the display form; used for replication runs) or at
each pair's actual distance (the default elsewhere, avoiding bin-edge
artifacts). Heteroskedasticity-only (EHW) and cluster-robust middle matrices
are special cases exposed as named methods.

The feasible estimator is generally conservative for the finite-population
conditional variance (it omits the nonnegative adjustment terms), which is
the documented behavior, not a defect.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.stats import norm

from .errors import ConditioningError, ConfigError, InferenceError
from .estimators import PointEstimate
from .gmm import GmmSolution
from .population import Population, pairwise_distances

_PSD_TOL = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and bandwidth for the spatial middle matrix.

    ``binned=True`` evaluates the kernel at the integer bin index s for pairs
    with s <= rho(i,j) < s+1; otherwise at rho(i,j)/bandwidth directly.
    """

    family: str = "bartlett"  # bartlett | parzen | uniform
    bandwidth: float = 1.0
    binned: bool = False

    def __post_init__(self):
        if self.family not in ("bartlett", "parzen", "uniform"):
            raise ConfigError(f"unknown kernel family {self.family!r}")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")

    def weight(self, u):
        """omega(u): one at zero, zero beyond one, bounded in between."""
        u = np.abs(np.asarray(u, dtype=float))
        if self.family == "bartlett":
            return np.maximum(1.0 - u, 0.0)
        if self.family == "parzen":
            out = np.where(u <= 0.5, 1 - 6 * u ** 2 + 6 * u ** 3, 2 * (1 - u) ** 3)
            return np.where(u <= 1.0, out, 0.0)
        return (u <= 1.0).astype(float)


@dataclass
class VarianceEstimate:
    omega: np.ndarray  # middle matrix
    vcov: np.ndarray  # sandwich; se_j = sqrt(vcov_jj / n)
    se: np.ndarray
    method: str
    psd: bool
    labels: list[str]
    n: int
    bandwidth: Optional[float] = None

    def se_for(self, label: str) -> float:
        return float(self.se[self.labels.index(label)])


def _coords_of(pop_or_coords) -> np.ndarray:
    if isinstance(pop_or_coords, Population):
        return pop_or_coords.coords
    return np.atleast_2d(np.asarray(pop_or_coords, dtype=float))


def _middle_matrix(q: np.ndarray, wmat: Optional[np.ndarray]) -> np.ndarray:
    n = q.shape[0]
    if wmat is None:  # identity weights: self-pairs only
        return q.T @ q / n
    return q.T @ (wmat @ q) / n


def _sandwich(solution: GmmSolution, omega: np.ndarray, method: str,
              kernel: Optional[KernelSpec], clamp_nonpsd: bool) -> VarianceEstimate:
    eig = np.linalg.eigvalsh((omega + omega.T) / 2)
    trace = max(np.trace(omega), np.finfo(float).tiny)
    psd = bool(eig.min() >= -_PSD_TOL * trace)
    if not psd:
        if not clamp_nonpsd:
            raise InferenceError(
                f"middle matrix is not PSD (min eigenvalue {eig.min():.3e}); "
                "use a PSD kernel or pass clamp_nonpsd=True")
        warnings.warn("clamping negative eigenvalues of the middle matrix at zero")
        vals, vecs = np.linalg.eigh((omega + omega.T) / 2)
        omega = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    R, psi = solution.jacobian, solution.psi
    bread = R.T @ psi @ R
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1e12:
        raise ConditioningError(f"R'PsiR is numerically singular (cond = {cond:.3e})")
    rhs = R.T @ psi  # (p, m)
    half = np.linalg.solve(bread, rhs)  # (p, m)
    vcov = half @ omega @ half.T
    vcov = (vcov + vcov.T) / 2
    diag = np.diag(vcov)
    if (diag < -1e-12).any():
        raise InferenceError("sandwich produced a negative variance")
    se = np.sqrt(np.maximum(diag, 0.0) / solution.n)
    return VarianceEstimate(omega, vcov, se, method, psd, list(solution.labels),
                            solution.n, None if kernel is None else kernel.bandwidth)


def shac_variance(solution: GmmSolution, pop_or_coords, kernel: KernelSpec,
                  metric: str = "chebyshev", clamp_nonpsd: bool = False,
                  dist: Optional[np.ndarray] = None) -> VarianceEstimate:
    """Spatial HAC sandwich variance of a GMM solution.

    Accumulates kernel-weighted moment cross products over unit pairs; the
    sandwich is (R'Psi R)^-1 R'Psi Omega Psi R (R'Psi R)^-1 with standard
    errors sqrt(diag/n). A non-PSD middle matrix raises unless
    ``clamp_nonpsd`` is set, in which case eigenvalues are clamped at zero
    with a warning. ``dist`` can supply a precomputed pairwise-distance
    matrix (replication runs reuse it across repetitions).
    """
    coords = _coords_of(pop_or_coords)
    if coords.shape[0] != solution.n:
        raise InferenceError(f"coordinates cover {coords.shape[0]} units but the "
                             f"solution has {solution.n}")
    n, d = coords.shape
    if kernel.bandwidth > n ** (1 / (2 * d)):
        warnings.warn(f"bandwidth {kernel.bandwidth} exceeds n^(1/2d) = "
                      f"{n ** (1 / (2 * d)):.3g}; the variance may be unstable")
    if dist is None:
        dist = pairwise_distances(coords, metric)
    elif dist.shape != (n, n):
        raise InferenceError("precomputed distance matrix has the wrong shape")
    if kernel.binned:
        wmat = np.zeros((n, n))
        s = 0
        while s <= kernel.bandwidth:
            wgt = float(kernel.weight(s / kernel.bandwidth))
            if wgt != 0.0:
                wmat += wgt * ((dist >= s) & (dist < s + 1))
            s += 1
    else:
        wmat = kernel.weight(dist / kernel.bandwidth)
    omega = _middle_matrix(solution.per_unit_moments, wmat)
    return _sandwich(solution, omega, "shac", kernel, clamp_nonpsd)


def ehw_variance(solution: GmmSolution) -> VarianceEstimate:
    """Heteroskedasticity-only variance: the middle matrix keeps self-pairs.

    Identical to ``shac_variance`` with a kernel vanishing beyond distance
    zero; exposed as a named method for reporting clarity.
    """
    omega = _middle_matrix(solution.per_unit_moments, None)
    return _sandwich(solution, omega, "ehw", None, clamp_nonpsd=False)


def cluster_variance(solution: GmmSolution, clusters) -> VarianceEstimate:
    """Cluster-robust variance: cross products of within-cluster moment sums."""
    if clusters is None:
        raise ConfigError("cluster-robust inference needs cluster labels; none present")
    clusters = np.asarray(clusters)
    if clusters.shape[0] != solution.n:
        raise InferenceError("cluster labels do not match the solution's unit count")
    _, inverse = np.unique(clusters, return_inverse=True)
    q = solution.per_unit_moments
    sums = np.zeros((inverse.max() + 1, q.shape[1]))
    np.add.at(sums, inverse, q)
    omega = sums.T @ sums / solution.n
    return _sandwich(solution, omega, "cluster", None, clamp_nonpsd=False)


def confidence_interval(estimate: Union[PointEstimate, float], se: float,
                        level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation confidence interval around the point estimate."""
    if not 0 < level < 1:
        raise ConfigError("confidence level must be in (0, 1)")
    if not np.isfinite(se) or se < 0:
        raise InferenceError(f"invalid standard error {se}")
    value = float(estimate)
    zq = norm.ppf(0.5 + level / 2)
    return (value - zq * se, value + zq * se)
