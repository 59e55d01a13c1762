"""Exposure mappings: discrete neighborhood-treatment summaries per unit.

An exposure mapping turns the full treatment vector (excluding the unit's
own treatment) into a discrete level. Three rules are provided:

* ``any_treated_neighbor`` -- indicator that at least one neighbor is treated;
* ``fraction_treated_binned`` -- leave-one-out treated fraction among
  neighbors, discretized into ordered bins;
* ``cluster_ratio`` -- indicator that the unit's leave-one-out within-cluster
  treated ratio exceeds the (leave-one-out) population mean ratio.

All rules are leave-one-out by construction: a unit's own treatment never
enters its own exposure. ``toggle_invariance_check`` verifies this on data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .population import Adjacency, Population

KIND_ANY = "any_treated_neighbor"
KIND_FRACTION = "fraction_treated_binned"
KIND_CLUSTER = "cluster_ratio"
_KINDS = (KIND_ANY, KIND_FRACTION, KIND_CLUSTER)


@dataclass(frozen=True)
class ExposureSpec:
    """Declares which exposure rule applies and its parameters.

    ``bins`` (fraction rule) are half-open intervals [lo, hi) partitioning
    [0, 1]; the last bin is closed at 1. ``cluster_mean`` chooses whether the
    cluster-ratio threshold averages ratios over clusters (default, one value
    per cluster) or over units. ``include_self_in_ratio`` deliberately breaks
    the leave-one-out property and exists only to exercise the invariance
    check; never enable it for estimation.
    """

    kind: str
    adjacency: Optional[Adjacency] = None
    bins: tuple[tuple[float, float], ...] = ()
    cluster_mean: str = "cluster"  # or "unit"
    include_self_in_ratio: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown exposure kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind in (KIND_ANY, KIND_FRACTION) and self.adjacency is None:
            raise ConfigError(f"exposure kind {self.kind!r} requires an adjacency")
        if self.kind == KIND_FRACTION:
            _check_bins(self.bins)
        if self.cluster_mean not in ("cluster", "unit"):
            raise ConfigError("cluster_mean must be 'cluster' or 'unit'")


def _check_bins(bins) -> None:
    if not bins:
        raise ConfigError("fraction_treated_binned requires nonempty bins")
    lo = 0.0
    for k, (a, b) in enumerate(bins):
        if not np.isclose(a, lo):
            raise ConfigError(f"bins must partition [0,1] without gaps; bin {k} starts at {a}, expected {lo}")
        if b <= a:
            raise ConfigError(f"bin {k} is empty or reversed: [{a}, {b})")
        lo = b
    if not np.isclose(lo, 1.0):
        raise ConfigError(f"bins must cover [0,1]; last bin ends at {lo}")


@dataclass(frozen=True)
class ExposureAssignment:
    """Realized exposure levels plus per-unit eligibility flags.

    ``eligible`` marks units that can attain every level in ``level_set``
    (units without neighbors cannot, under neighbor-based rules) and is used
    to restrict estimation subpopulations.
    """

    levels: np.ndarray
    level_set: tuple[int, ...]
    eligible: np.ndarray

    def __post_init__(self):
        self.levels.setflags(write=False)
        self.eligible.setflags(write=False)

    @property
    def n_levels(self) -> int:
        return len(self.level_set)

    def restrict(self, mask) -> "ExposureAssignment":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ExposureAssignment(self.levels[idx].copy(), self.level_set,
                                  self.eligible[idx].copy())


def compute_exposure(pop: Population, spec: ExposureSpec,
                     w: Optional[np.ndarray] = None) -> ExposureAssignment:
    """Exposure level of every unit under ``spec``.

    ``w`` overrides the population's treatment vector (used by the toggle
    check); by default the realized treatments are used.
    """
    w = pop.w if w is None else np.asarray(w, dtype=int)
    if spec.kind == KIND_ANY:
        treated_nbrs = spec.adjacency.pairs @ w
        levels = (treated_nbrs > 0).astype(int)
        eligible = spec.adjacency.has_neighbors()
        return ExposureAssignment(levels, (0, 1), eligible)
    if spec.kind == KIND_FRACTION:
        counts = spec.adjacency.degrees
        treated_nbrs = spec.adjacency.pairs @ w
        frac = np.zeros(pop.n)
        nz = counts > 0
        frac[nz] = treated_nbrs[nz] / counts[nz]
        levels = _bin_levels(frac, spec.bins)
        levels[~nz] = 0  # ineligible; level value is a placeholder
        return ExposureAssignment(levels, tuple(range(len(spec.bins))), nz.copy())
    return _cluster_ratio_exposure(pop, spec, w)


def _bin_levels(frac: np.ndarray, bins) -> np.ndarray:
    edges = np.array([b[1] for b in bins])
    # np.searchsorted with side="right" puts frac == edge into the next bin,
    # matching half-open [lo, hi); clamp keeps 1.0 in the last bin.
    levels = np.searchsorted(edges, frac, side="right")
    return np.minimum(levels, len(bins) - 1).astype(int)


def _cluster_ratio_exposure(pop: Population, spec: ExposureSpec,
                            w: np.ndarray) -> ExposureAssignment:
    if pop.cluster is None:
        raise ConfigError("cluster_ratio exposure requires cluster labels")
    labels, inverse = np.unique(pop.cluster, return_inverse=True)
    sizes = np.bincount(inverse)
    if (sizes < 2).any():
        small = labels[sizes < 2]
        raise ConfigError(f"cluster_ratio requires every cluster to have >= 2 units; "
                          f"singleton cluster(s): {small.tolist()}")
    treated = np.bincount(inverse, weights=w.astype(float))
    n_clusters = len(labels)

    if spec.include_self_in_ratio:
        # Broken-by-design variant: own treatment enters own ratio.
        ratio = (treated[inverse]) / (sizes[inverse])
        thresholds = np.full(pop.n, (treated / sizes).mean())
    else:
        # Leave-one-out ratio among the other units of the unit's cluster.
        ratio = (treated[inverse] - w) / (sizes[inverse] - 1)
        if spec.cluster_mean == "cluster":
            # Threshold for unit i averages cluster-level ratios with unit i
            # removed from its own cluster, so the threshold is a function of
            # the other units' treatments only.
            base = (treated / sizes).sum()
            own_plain = treated[inverse] / sizes[inverse]
            thresholds = (base - own_plain + ratio) / n_clusters
        else:
            # Unit-weighted mean of leave-one-out ratios, with unit i removed
            # from every other unit's count as well as from the average.
            total = ((treated[inverse] - w) / (sizes[inverse] - 1)).sum()
            thresholds = np.empty(pop.n)
            for i in range(pop.n):
                c = inverse[i]
                if sizes[c] == 2:
                    # removing i leaves a single other unit with no peers;
                    # its leave-one-out ratio is undefined, drop it too
                    others = total - ((treated[c] - w[i]) / (sizes[c] - 1) + (treated[c] - (treated[c] - w[i])) / (sizes[c] - 1))
                    thresholds[i] = others / max(pop.n - 2, 1)
                else:
                    # ratios of i's cluster-mates recomputed without unit i
                    mates = np.flatnonzero(inverse == c)
                    mates = mates[mates != i]
                    adj = ((treated[c] - w[i] - w[mates]) / (sizes[c] - 2)).sum()
                    old = ((treated[c] - w[mates]) / (sizes[c] - 1)).sum()
                    thresholds[i] = (total - old - (treated[c] - w[i]) / (sizes[c] - 1) + adj) / (pop.n - 1)
    levels = (ratio > thresholds).astype(int)
    eligible = np.ones(pop.n, dtype=bool)
    return ExposureAssignment(levels, (0, 1), eligible)


@dataclass(frozen=True)
class ToggleReport:
    """Result of the leave-one-out invariance check."""

    violations: tuple[int, ...]
    n_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def toggle_invariance_check(pop: Population, spec: ExposureSpec) -> ToggleReport:
    """Flip each unit's own treatment and verify its own exposure is unchanged.

    Any violation means the spec is not a valid exposure mapping of the
    other units' treatments.
    """
    base = compute_exposure(pop, spec).levels
    violations = []
    w = pop.w.copy()
    for i in range(pop.n):
        w[i] = 1 - w[i]
        flipped = compute_exposure(pop, spec, w=w).levels
        if flipped[i] != base[i]:
            violations.append(i)
        w[i] = 1 - w[i]
    return ToggleReport(tuple(violations), pop.n)
