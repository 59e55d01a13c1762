"""Point estimators for direct and spillover effects under interference.

Every estimand from the identification analysis is available as a plug-in
evaluator: the canonical two-period DID, Abadie-style IPW-DID, augmented and
saturated TWFE, inverse-probability weighting and regression adjustment at a
given exposure level, the doubly robust (AIPW) direct effect, the
doubly robust spillover contrasts, the share-weighted overall direct effect,
and the pre-trend placebo.

Weighted estimators use normalized (Hajek) arm weights by default, which is
the recommended finite-sample form; the raw Horvitz-Thompson form is behind
``normalize=False`` for exactness tests against the displayed estimands.

Estimates are labeled DATT; under a possibly misspecified exposure mapping
the same number is the expected direct effect (EDATT), so no computational
branch depends on the mapping being correct.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .design import ModelData
from .errors import ConfigError, DegenerateArmError
from .nuisance import NuisanceValues, _ols
from .population import Population

INTERPRETATION_NOTE = ("direct ATT at the stated exposure level; interpret as the "
                       "expected direct effect (EDATT) if the exposure mapping may "
                       "be misspecified")


@dataclass
class PointEstimate:
    """Estimate with per-unit influence contributions for inference.

    ``influence`` is the unit-level summand of the estimand's moment; it
    averages to zero at the solution. Estimators that do not support
    unit-level inference (share-weighted aggregates) leave it ``None``.
    """

    value: float
    influence: Optional[np.ndarray]
    n_used: int
    interpretation: str = INTERPRETATION_NOTE
    extra: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class EstimandRequest:
    """Declares one estimand for the pipeline.

    ``g_prime`` and ``w_arm`` apply to spillover contrasts only.
    """

    target: str
    g: Optional[int] = None
    g_prime: Optional[int] = None
    w_arm: Optional[int] = None
    normalize: bool = True
    ps_source: str = "mle"  # "mle" | "cbps" | "oracle"

    def __post_init__(self):
        if self.target == "dr_spillover":
            if self.w_arm not in (0, 1):
                raise ConfigError("dr_spillover requires w_arm in {0, 1}")
            if self.g is None or self.g_prime is None or self.g == self.g_prime:
                raise ConfigError("dr_spillover requires two distinct levels g, g_prime")


def _as_wy(pop_or_md) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(pop_or_md.w, dtype=float)
    dy = np.asarray(pop_or_md.dy, dtype=float)
    return w, dy


def canonical_twfe(pop: Union[Population, ModelData]) -> PointEstimate:
    """Two-period TWFE, i.e. the difference-in-differences of group means."""
    w, dy = _as_wy(pop)
    n1 = w.sum()
    if n1 == 0 or n1 == len(w):
        raise DegenerateArmError("canonical TWFE needs both treated and untreated units")
    mu1 = dy[w == 1].mean()
    mu0 = dy[w == 0].mean()
    p1 = n1 / len(w)
    infl = w * (dy - mu1) / p1 - (1 - w) * (dy - mu0) / (1 - p1)
    return PointEstimate(float(mu1 - mu0), infl, len(w),
                         interpretation="canonical DID; ignores interference")


def abadie_ipw(pop: Union[Population, ModelData], p_hat: np.ndarray,
               normalize: bool = True) -> PointEstimate:
    """IPW-DID without exposure terms.

    Treated units enter with equal weight; controls are weighted by
    p(z)/(1-p(z)). ``normalize`` rescales each arm's weights to sum to one.
    """
    w, dy = _as_wy(pop)
    p_hat = np.asarray(p_hat, dtype=float)
    if np.any(p_hat <= 0) or np.any(p_hat >= 1):
        raise DegenerateArmError("fitted treatment propensities must lie strictly in (0,1)")
    wt1 = w
    wt0 = (1 - w) * p_hat / (1 - p_hat)
    return _weighted_contrast(dy, wt1, dy, wt0, normalize, len(w),
                              interpretation="canonical IPW-DID; ignores interference")


def _weighted_contrast(r1, wt1, r0, wt0, normalize, n, interpretation=INTERPRETATION_NOTE,
                       offset=None):
    """tau = sum(wt1 r1)/s1 - sum(wt0 r0)/s0 (+ mean offset), with influence."""
    s1, s0 = wt1.sum(), wt0.sum()
    if s1 <= 0 or s0 <= 0:
        raise DegenerateArmError("an estimator arm has zero total weight")
    if normalize:
        u1, u0 = wt1 / s1, wt0 / s0
    else:
        u1, u0 = wt1 / n, wt0 / n
    mu1 = float((u1 * r1).sum())
    mu0 = float((u0 * r0).sum())
    value = mu1 - mu0
    if normalize:
        infl = n * (u1 * (r1 - mu1) - u0 * (r0 - mu0))
    else:
        infl = n * (u1 * r1 - u0 * r0) - value
    if offset is not None:
        value += float(offset.mean())
        infl = infl + offset - offset.mean()
    return PointEstimate(value, infl, n, interpretation)


@dataclass
class AugmentedTwfe:
    beta1: float
    beta2: float
    beta3: float
    datt0: float
    datt1: float


def augmented_twfe(pop: Union[Population, ModelData], s: np.ndarray) -> AugmentedTwfe:
    """TWFE augmented with a binary closeness indicator ``s``.

    First-differencing the two-period panel gives an OLS of dy on
    (1, W, (1-W)s, Ws); the direct effects are beta1 at s=0 and
    beta1 + beta3 - beta2 at s=1.
    """
    w, dy = _as_wy(pop)
    s = np.asarray(s, dtype=float)
    if not np.isin(s, (0.0, 1.0)).all():
        raise ValueError("s must be binary")
    X = np.column_stack([np.ones_like(w), w, (1 - w) * s, w * s])
    beta = _ols(X, dy, ["const", "w", "(1-w)s", "ws"])
    b1, b2, b3 = beta[1], beta[2], beta[3]
    return AugmentedTwfe(float(b1), float(b2), float(b3),
                         datt0=float(b1), datt1=float(b1 + b3 - b2))


@dataclass
class SaturatedTwfe:
    coefficients: dict
    datt: dict  # level -> estimate


def saturated_twfe(md: ModelData, covariates: Sequence[str] = ()) -> SaturatedTwfe:
    """Pooled two-period fit with exposure-level indicators for both arms.

    The stacked regression replaces unit effects with a treatment-group
    intercept and attribute terms; the direct effect at the baseline level is
    the coefficient on W*post, and at level g it adds the treated-arm minus
    the untreated-arm indicator coefficients.
    """
    n = md.n
    post = np.concatenate([np.zeros(n), np.ones(n)])
    y = np.concatenate([md.y1, md.y2])
    w = np.tile(md.w, 2)
    g = np.tile(md.g, 2)
    cols = [np.ones(2 * n), w, w * post]
    labels = ["const", "w", "w:post"]
    for lvl in md.level_set[1:]:
        ind = (g == lvl).astype(float) * post
        if not ind.any():
            raise ConfigError(f"exposure level {lvl} indicator is empty; "
                              "it cannot be included in the saturated fit")
        cols += [(1 - w) * ind, w * ind]
        labels += [f"(1-w):g={lvl}:post", f"w:g={lvl}:post"]
    for name in covariates:
        vec = md.columns[name]
        cols.append(np.tile(vec, 2))
        labels.append(name)
    cols.append(post)
    labels.append("post")
    beta = _ols(np.column_stack(cols), y, labels)
    coefs = dict(zip(labels, beta.tolist()))
    datt = {md.level_set[0]: coefs["w:post"]}
    for lvl in md.level_set[1:]:
        datt[lvl] = (coefs["w:post"] + coefs[f"w:g={lvl}:post"]
                     - coefs[f"(1-w):g={lvl}:post"])
    return SaturatedTwfe(coefs, datt)


# -- exposure-level estimators ---------------------------------------------------


def dr_weights(md: ModelData, values: NuisanceValues, g: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Arm weights of the AIPW moment at level g.

    Treated: W 1{G=g} / (p pi_1g); control: (1-W) 1{G=g} / ((1-p) pi_0g).
    """
    p = values.p
    if np.any(p <= 0) or np.any(p >= 1):
        raise DegenerateArmError("fitted treatment propensities must lie strictly in (0,1)")
    pi1, pi0 = values.pi[(1, g)], values.pi[(0, g)]
    if np.any(pi1 <= 0) or np.any(pi0 <= 0):
        raise DegenerateArmError(f"fitted exposure propensities at level {g} must be positive")
    ind = (md.g == g).astype(float)
    a = md.w * ind / (p * pi1)
    b = (1 - md.w) * ind / ((1 - p) * pi0)
    return a, b


def ipw_datt(md: ModelData, values: NuisanceValues, g: int,
             normalize: bool = True) -> PointEstimate:
    """Inverse-probability-weighted direct effect at exposure level g."""
    a, b = dr_weights(md, values, g)
    return _weighted_contrast(md.dy, a, md.dy, b, normalize, md.n)


def ra_datt(md: ModelData, values: NuisanceValues, g: int) -> PointEstimate:
    """Regression-adjustment direct effect: mean fitted-trend contrast at g."""
    diff = values.delta_m[(1, g)] - values.delta_m[(0, g)]
    return PointEstimate(float(diff.mean()), diff - diff.mean(), md.n)


def dr_datt(md: ModelData, values: NuisanceValues, g: int,
            normalize: bool = True) -> PointEstimate:
    """Doubly robust (AIPW) direct effect at exposure level g.

    Weighted treated-arm minus control-arm trend residuals plus the average
    fitted-trend contrast; consistent if either the propensity models or the
    outcome trend models are correct.
    """
    a, b = dr_weights(md, values, g)
    r1 = md.dy - values.delta_m[(1, g)]
    r0 = md.dy - values.delta_m[(0, g)]
    offset = values.delta_m[(1, g)] - values.delta_m[(0, g)]
    return _weighted_contrast(r1, a, r0, b, normalize, md.n, offset=offset)


def dr_spillover(md: ModelData, values: NuisanceValues, w_arm: int, g: int,
                 g_prime: int, normalize: bool = True) -> PointEstimate:
    """Doubly robust spillover contrast between levels g and g_prime.

    Compares AIPW-adjusted second-period outcomes within the arm ``w_arm``.
    """
    if g == g_prime:
        raise ConfigError("spillover contrast requires g != g_prime")
    if values.m2 is None:
        raise ConfigError("spillover contrast needs second-period fitted values; "
                          "differenced outcome mode does not provide them")
    p = values.p
    if np.any(p <= 0) or np.any(p >= 1):
        raise DegenerateArmError("fitted treatment propensities must lie strictly in (0,1)")

    def arm_weight(lvl):
        pi = values.pi[(w_arm, lvl)]
        if np.any(pi <= 0):
            raise DegenerateArmError(f"fitted exposure propensities at level {lvl} must be positive")
        ind = (md.g == lvl).astype(float)
        if w_arm == 1:
            return md.w * ind / (p * pi)
        return (1 - md.w) * ind / ((1 - p) * pi)

    a_g, a_gp = arm_weight(g), arm_weight(g_prime)
    m_g, m_gp = values.m2[(w_arm, g)], values.m2[(w_arm, g_prime)]
    offset = m_g - m_gp
    return _weighted_contrast(md.y2 - m_g, a_g, md.y2 - m_gp, a_gp,
                              normalize, md.n, offset=offset)


def treated_level_shares(md: ModelData) -> dict[int, float]:
    """Empirical exposure-level shares among the treated."""
    treated = md.w == 1
    if not treated.any():
        raise DegenerateArmError("no treated units")
    return {g: float(((md.g == g) & treated).sum() / treated.sum())
            for g in md.level_set}


def aggregate_overall(per_level: Mapping[int, Union[PointEstimate, float]],
                      shares: Mapping[int, float]) -> PointEstimate:
    """Share-weighted overall direct effect.

    Shares must be the treated-arm level frequencies and sum to one. No
    unit-level influence is attached (joint inference across levels is out
    of scope).
    """
    total = sum(shares.values())
    if abs(total - 1.0) > 1e-10:
        raise ConfigError(f"level shares sum to {total}, expected 1")
    missing = set(shares) - set(per_level)
    if missing:
        raise ConfigError(f"missing per-level estimates for levels {sorted(missing)}")
    value = sum(float(per_level[g]) * s for g, s in shares.items())
    return PointEstimate(float(value), None, 0,
                         interpretation="share-weighted overall direct effect on the treated")


@dataclass
class PlaceboResult:
    estimate: float
    se: float
    z: float
    p_value: float


def pretrend_placebo(md: ModelData, y0: np.ndarray, spec, g: int,
                     kernel=None, psi=None) -> PlaceboResult:
    """Placebo direct effect over two pre-treatment periods.

    Re-runs the doubly robust fit with outcomes (y0, y1) and the realized
    future treatment/exposure as labels; under no anticipation and parallel
    pre-trends the estimand is zero. Returns the estimate with its
    spatial-correlation robust standard error and z statistic.
    """
    from . import gmm, inference  # local import; gmm builds on this module
    from scipy.stats import norm

    y0 = np.asarray(y0, dtype=float)
    if y0.shape != md.y1.shape or not np.all(np.isfinite(y0)):
        raise ConfigError("placebo needs a finite pre-period outcome for every unit")
    placebo_md = ModelData(md.columns, md.w, md.g, md.level_set, y0, md.y1,
                           md.coords, md.clusters, md.eligible)
    system = gmm.assemble_moments(placebo_md, spec, EstimandRequest("dr_datt", g=g))
    solution = gmm.solve_gmm(system, weighting=psi)
    if kernel is None:
        variance = inference.ehw_variance(solution)
    else:
        variance = inference.shac_variance(solution, placebo_md.coords, kernel)
    est = float(solution.theta[-1])
    se = float(variance.se[-1])
    zstat = est / se if se > 0 else np.inf * np.sign(est)
    return PlaceboResult(est, se, float(zstat), float(2 * norm.sf(abs(zstat))))
