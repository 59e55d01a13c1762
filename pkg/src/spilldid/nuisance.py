"""Nuisance models: propensity scores and outcome regressions.

Two propensity models are fitted, one for the own treatment W given
attributes and one for the exposure level G given (W, attributes). Each can
be estimated by maximum likelihood (logit / baseline-category logit) or by
exactly solving covariate-balancing moment equations (CBPS). Outcome
regressions are least squares, either pooled with interactions, per
(treatment, exposure) cell, or on the differenced outcome.

Fits expose per-unit fitted values at counterfactual (w, g), which is what
the estimators and the stacked moment system consume.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.special import expit

from .design import Formula, ModelData
from .errors import (ConvergenceError, DegenerateArmError, OverlapError,
                     RankError)

MLE_TOL = 1e-10
CBPS_TOL = 1e-10
MAX_ITER = 200
_SEPARATION_BOUND = 30.0


@dataclass(frozen=True)
class NuisanceSpec:
    """Model declarations for one estimation run.

    ``ps_source`` picks the propensity moment conditions (MLE scores or CBPS
    balancing). ``balance_w`` optionally supplies distinct balancing
    covariates for the treatment CBPS; it must have as many columns as the
    propensity design (just-identified systems only).
    """

    formula_w: "Formula"
    formula_g: "Formula"
    formula_y1: Optional["Formula"] = None
    formula_y2: Optional["Formula"] = None
    ps_source: str = "mle"  # "mle" | "cbps"
    outcome_mode: str = "pooled"  # "pooled" | "differenced" | "cellwise"
    balance_w: Optional["Formula"] = None


def _check_rank(X: np.ndarray, labels: list[str]) -> None:
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag[0] > 0 else 0.0
    bad = diag <= tol
    if bad.any():
        names = [labels[piv[j]] for j in np.flatnonzero(bad)]
        raise RankError(f"design is rank deficient; collinear column(s): {names}")


@dataclass
class LogitFit:
    """Fitted binary (or baseline-category multinomial) response model.

    ``coefficients`` has shape (k,) for a binary response and (L-1, k) for a
    multinomial one, rows ordered by non-baseline level. ``max_abs_score`` is
    the largest entry of the final score (MLE) or balancing residual (CBPS).
    """

    coefficients: np.ndarray
    labels: list[str]
    formula: Formula
    method: str  # "mle" | "cbps"
    converged: bool
    iterations: int
    max_abs_score: float
    level_set: Optional[tuple[int, ...]] = None  # set for G-models

    @property
    def is_multinomial(self) -> bool:
        return self.coefficients.ndim == 2 and self.coefficients.shape[0] > 1


def _binary_mle(X, y, labels, tol=MLE_TOL, max_iter=MAX_ITER):
    n = X.shape[0]
    if y.min() == y.max():
        raise DegenerateArmError("response is constant; both outcomes required")
    _check_rank(X, labels)
    beta = np.zeros(X.shape[1])

    def negll(b):
        eta = X @ b
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    current = negll(beta)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (y - p) / n
        if np.abs(score).max() <= tol:
            return beta, True, it, float(np.abs(score).max())
        hess = (X * (p * (1 - p))[:, None]).T @ X / n
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian in logit fit")
        # Step halving keeps the likelihood monotone; fall back to a short
        # gradient step if three halvings fail.
        scale, accepted = 1.0, False
        for _ in range(3):
            cand = beta + scale * step
            if negll(cand) <= current + 1e-14:
                beta, current, accepted = cand, negll(cand), True
                break
            scale *= 0.5
        if not accepted:
            cand = beta + 0.1 * score
            beta, current = cand, negll(cand)
        if np.abs(beta).max() > _SEPARATION_BOUND:
            j = int(np.abs(beta).argmax())
            raise ConvergenceError(
                f"logit did not converge; coefficient on {labels[j]!r} is diverging "
                "(likely perfect separation)")
    p = expit(X @ beta)
    score = X.T @ (y - p) / n
    if np.abs(score).max() <= tol:
        return beta, True, max_iter, float(np.abs(score).max())
    raise ConvergenceError(
        f"logit MLE did not converge in {max_iter} iterations "
        f"(max |score| = {np.abs(score).max():.2e})")


def _multinomial_mle(X, g_idx, n_levels, labels, tol=MLE_TOL, max_iter=MAX_ITER):
    """Baseline-category logit; level index 0 is the baseline."""
    n, k = X.shape
    m = n_levels - 1
    _check_rank(X, labels)
    beta = np.zeros((m, k))
    onehot = np.zeros((n, m))
    for j in range(m):
        onehot[:, j] = g_idx == j + 1

    def probs(b):
        eta = X @ b.T  # (n, m)
        emax = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
        num = np.exp(eta - emax)
        den = np.exp(-emax).ravel() + num.sum(axis=1)
        return num / den[:, None]  # (n, m), non-baseline probabilities

    for it in range(1, max_iter + 1):
        pi = probs(beta)
        score = (X.T @ (onehot - pi)).T / n  # (m, k)
        if np.abs(score).max() <= tol:
            return beta, True, it, float(np.abs(score).max())
        hess = np.zeros((m * k, m * k))
        for a in range(m):
            for b in range(a, m):
                wab = pi[:, a] * ((a == b) - pi[:, b])
                block = (X * wab[:, None]).T @ X / n
                hess[a * k:(a + 1) * k, b * k:(b + 1) * k] = block
                hess[b * k:(b + 1) * k, a * k:(a + 1) * k] = block
        try:
            step = np.linalg.solve(hess, score.ravel()).reshape(m, k)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian in multinomial logit fit")
        beta = beta + step
        if np.abs(beta).max() > _SEPARATION_BOUND:
            raise ConvergenceError("multinomial logit diverging (likely separation)")
    raise ConvergenceError(f"multinomial logit did not converge in {max_iter} iterations")


def fit_logit_w(md: ModelData, formula: Formula) -> LogitFit:
    """MLE logit of the own treatment on the given covariates."""
    if any(t == "w" or t.startswith("w:") or t.endswith(":w") for t in formula.terms):
        raise ValueError("treatment model formula cannot reference 'w'")
    if md.w.sum() == 0 or md.w.sum() == md.n:
        raise DegenerateArmError("both treatment arms must be nonempty")
    X, labels = md.design(formula)
    beta, conv, it, score = _binary_mle(X, md.w, labels)
    return LogitFit(beta, labels, formula, "mle", conv, it, score)


def fit_logit_g(md: ModelData, formula: Formula) -> LogitFit:
    """MLE model of the exposure level given (W, attributes).

    Binary logit when two levels exist, baseline-category logit otherwise
    (lowest level is the baseline).
    """
    if any("g" in t.split(":") for t in formula.terms):
        raise ValueError("exposure model formula cannot reference 'g'")
    X, labels = md.design(formula)
    levels = md.level_set
    present = set(np.unique(md.g).tolist())
    absent = [l for l in levels if l not in present]
    if absent:
        raise OverlapError(f"exposure level(s) {absent} have no units; cannot fit G-model")
    if len(levels) == 2:
        y = (md.g == levels[1]).astype(float)
        beta, conv, it, score = _binary_mle(X, y, labels)
        return LogitFit(beta, labels, formula, "mle", conv, it, score, level_set=levels)
    g_idx = np.searchsorted(np.array(levels), md.g)
    beta, conv, it, score = _multinomial_mle(X, g_idx, len(levels), labels)
    return LogitFit(beta, labels, formula, "mle", conv, it, score, level_set=levels)


# -- CBPS ---------------------------------------------------------------------


def _newton_root(residual, jacobian, x0, tol, max_iter, what):
    x = x0.copy()
    r = residual(x)
    norm = np.abs(r).max()
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return x, it, norm
        try:
            step = np.linalg.solve(jacobian(x), -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jacobian(x), -r, rcond=None)[0]
        scale = 1.0
        for _ in range(40):
            cand = x + scale * step
            rc = residual(cand)
            if np.abs(rc).max() < norm:
                x, r, norm = cand, rc, np.abs(rc).max()
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"{what}: no descent direction (residual max-abs {norm:.2e})")
    if norm <= tol:
        return x, max_iter, norm
    raise ConvergenceError(f"{what}: not converged after {max_iter} iterations "
                           f"(residual max-abs {norm:.2e})")


def _cbps_w(X, w, labels):
    beta0, *_ = _binary_mle(X, w, labels)

    def residual(b):
        p = expit(X @ b)
        return X.T @ (w / p - (1 - w) / (1 - p)) / len(w)

    def jacobian(b):
        p = expit(X @ b)
        c = w * (1 - p) / p + (1 - w) * p / (1 - p)
        return -(X * c[:, None]).T @ X / len(w)

    return _newton_root(residual, jacobian, beta0, CBPS_TOL, MAX_ITER, "CBPS (treatment)")


def _cbps_g_binary(X, y, labels):
    beta0, *_ = _binary_mle(X, y, labels)

    def residual(b):
        pi = expit(X @ b)
        return X.T @ (y / pi - (1 - y) / (1 - pi)) / len(y)

    def jacobian(b):
        pi = expit(X @ b)
        c = y * (1 - pi) / pi + (1 - y) * pi / (1 - pi)
        return -(X * c[:, None]).T @ X / len(y)

    return _newton_root(residual, jacobian, beta0, CBPS_TOL, MAX_ITER, "CBPS (exposure)")


def _cbps_g_multinomial(X, g_idx, n_levels, labels):
    """Balance (adjacent level pairs) x (balancing covariates), just identified."""
    n, k = X.shape
    m = n_levels - 1
    beta0, *_ = _multinomial_mle(X, g_idx, n_levels, labels)

    def level_probs(b):
        eta = X @ b.reshape(m, k).T
        emax = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
        num = np.exp(eta - emax)
        den = np.exp(-emax).ravel() + num.sum(axis=1)
        pi = np.empty((n, n_levels))
        pi[:, 0] = np.exp(-emax).ravel() / den
        pi[:, 1:] = num / den[:, None]
        return pi

    def residual(bflat):
        pi = level_probs(bflat)
        out = np.empty(m * k)
        for j in range(1, n_levels):
            hi = (g_idx == j) / pi[:, j]
            lo = (g_idx == j - 1) / pi[:, j - 1]
            out[(j - 1) * k:j * k] = X.T @ (hi - lo) / n
        return out

    def jacobian(bflat):
        pi = level_probs(bflat)
        jac = np.zeros((m * k, m * k))
        for j in range(1, n_levels):
            ind_hi = (g_idx == j).astype(float)
            ind_lo = (g_idx == j - 1).astype(float)
            for a in range(1, n_levels):
                # d log pi_l / d eta_a = delta_{la} - pi_a (delta w.r.t. the
                # non-baseline index; the baseline level has no own eta)
                dhi = ((j == a) - pi[:, a]) * ind_hi / pi[:, j]
                dlo = ((j - 1 == a) - pi[:, a]) * ind_lo / pi[:, j - 1]
                coef = -(dhi - dlo)
                jac[(j - 1) * k:j * k, (a - 1) * k:a * k] = (X * coef[:, None]).T @ X / n
        return jac

    return _newton_root(residual, jacobian, beta0.ravel(), CBPS_TOL, MAX_ITER,
                        "CBPS (multi-level exposure)")


def fit_cbps(md: ModelData, formula_w: Formula, formula_g: Formula
             ) -> tuple[LogitFit, LogitFit]:
    """Propensity coefficients solving the empirical balancing equations.

    The balancing functions equal the model design columns, so the system is
    just identified; the solver starts from the MLE coefficients.
    """
    if md.w.sum() == 0 or md.w.sum() == md.n:
        raise DegenerateArmError("both treatment arms must be nonempty")
    Xw, labels_w = md.design(formula_w)
    bw, it_w, res_w = _cbps_w(Xw, md.w, labels_w)
    fit_w = LogitFit(bw, labels_w, formula_w, "cbps", True, it_w, res_w)

    Xg, labels_g = md.design(formula_g)
    levels = md.level_set
    present = set(np.unique(md.g).tolist())
    absent = [l for l in levels if l not in present]
    if absent:
        raise OverlapError(f"exposure level(s) {absent} have no units; cannot balance")
    if len(levels) == 2:
        y = (md.g == levels[1]).astype(float)
        bg, it_g, res_g = _cbps_g_binary(Xg, y, labels_g)
        fit_g = LogitFit(bg, labels_g, formula_g, "cbps", True, it_g, res_g,
                         level_set=levels)
    else:
        g_idx = np.searchsorted(np.array(levels), md.g)
        bflat, it_g, res_g = _cbps_g_multinomial(Xg, g_idx, len(levels), labels_g)
        fit_g = LogitFit(bflat.reshape(len(levels) - 1, len(labels_g)), labels_g,
                         formula_g, "cbps", True, it_g, res_g, level_set=levels)
    return fit_w, fit_g


# -- fitted-probability evaluation ---------------------------------------------


def predict_p(fit: LogitFit, md: ModelData) -> np.ndarray:
    """Fitted P(W=1 | z) per unit."""
    X, _ = md.design(fit.formula)
    return expit(X @ np.atleast_1d(fit.coefficients.ravel()))


def predict_pi(fit: LogitFit, md: ModelData, w, g: int) -> np.ndarray:
    """Fitted P(G=g | W=w, z) per unit; ``w`` may be scalar or per-unit."""
    if fit.level_set is None:
        raise ValueError("fit has no level set; is this a G-model?")
    X, _ = md.design(fit.formula, w=w)
    levels = fit.level_set
    if g not in levels:
        raise ValueError(f"level {g} not in level set {levels}")
    if len(levels) == 2:
        p1 = expit(X @ fit.coefficients)
        return p1 if g == levels[1] else 1.0 - p1
    beta = fit.coefficients
    eta = X @ beta.T
    emax = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
    num = np.exp(eta - emax)
    den = np.exp(-emax).ravel() + num.sum(axis=1)
    j = levels.index(g)
    if j == 0:
        return np.exp(-emax).ravel() / den
    return num[:, j - 1] / den


# -- outcome regressions --------------------------------------------------------


def _ols(X, y, labels):
    _check_rank(X, labels)
    gram = X.T @ X
    beta = np.linalg.solve(gram, X.T @ y)
    return beta


@dataclass
class OutcomeRegFit:
    """Least-squares conditional-mean models for the outcome periods.

    Modes:

    * ``pooled`` -- one regression per period with treatment/exposure terms
      in the formula (the default replication form);
    * ``cellwise`` -- separate coefficients per (w, g) cell, covariate-only
      formula;
    * ``differenced`` -- a single regression for y2 - y1 (period-level fitted
      values are then unavailable).
    """

    mode: str
    md: ModelData
    formula_y1: Optional[Formula] = None
    formula_y2: Optional[Formula] = None
    formula_diff: Optional[Formula] = None
    coef_y1: Optional[np.ndarray] = None
    coef_y2: Optional[np.ndarray] = None
    coef_diff: Optional[np.ndarray] = None
    cell_coefs: Optional[dict] = None  # {(w, g): (coef_y1, coef_y2)}
    labels_y1: list[str] = field(default_factory=list)
    labels_y2: list[str] = field(default_factory=list)
    residual_rms: dict = field(default_factory=dict)

    def m1(self, w: int, g: int) -> np.ndarray:
        """Fitted first-period mean at counterfactual (w, g), every unit."""
        if self.mode == "pooled":
            X, _ = self.md.design(self.formula_y1, w=w, g=g)
            return X @ self.coef_y1
        if self.mode == "cellwise":
            X, _ = self.md.design(self.formula_y1, w=w, g=g)
            return X @ self.cell_coefs[(w, g)][0]
        raise ValueError("period-level fitted values unavailable in differenced mode")

    def m2(self, w: int, g: int) -> np.ndarray:
        if self.mode == "pooled":
            X, _ = self.md.design(self.formula_y2, w=w, g=g)
            return X @ self.coef_y2
        if self.mode == "cellwise":
            X, _ = self.md.design(self.formula_y2, w=w, g=g)
            return X @ self.cell_coefs[(w, g)][1]
        raise ValueError("period-level fitted values unavailable in differenced mode")

    def delta_m(self, w: int, g: int) -> np.ndarray:
        """Fitted trend m2 - m1 at counterfactual (w, g)."""
        if self.mode == "differenced":
            X, _ = self.md.design(self.formula_diff, w=w, g=g)
            return X @ self.coef_diff
        return self.m2(w, g) - self.m1(w, g)


def fit_outcome_regressions(md: ModelData, formula_y1: Formula,
                            formula_y2: Formula, mode: str = "pooled"
                            ) -> OutcomeRegFit:
    """Fit the outcome regressions in the requested mode.

    In ``differenced`` mode ``formula_y2`` is used for the single regression
    of y2 - y1 and ``formula_y1`` is ignored. In ``cellwise`` mode both
    formulas must be covariate-only; cells are the realized (w, g) pairs and
    an empty cell raises :class:`OverlapError`.
    """
    if mode == "pooled":
        X1, lab1 = md.design(formula_y1)
        X2, lab2 = md.design(formula_y2)
        b1 = _ols(X1, md.y1, lab1)
        b2 = _ols(X2, md.y2, lab2)
        return OutcomeRegFit(
            mode, md, formula_y1, formula_y2, None, b1, b2,
            labels_y1=lab1, labels_y2=lab2,
            residual_rms={"y1": float(np.sqrt(np.mean((md.y1 - X1 @ b1) ** 2))),
                          "y2": float(np.sqrt(np.mean((md.y2 - X2 @ b2) ** 2)))})
    if mode == "differenced":
        Xd, labd = md.design(formula_y2)
        bd = _ols(Xd, md.dy, labd)
        return OutcomeRegFit(
            mode, md, None, None, formula_y2, coef_diff=bd, labels_y2=labd,
            residual_rms={"dy": float(np.sqrt(np.mean((md.dy - Xd @ bd) ** 2)))})
    if mode == "cellwise":
        for f in (formula_y1, formula_y2):
            if any(p in ("w", "g") for t in f.terms for p in t.split(":")):
                raise ValueError("cellwise formulas must be covariate-only")
        cells = {}
        for w in (0, 1):
            for g in md.level_set:
                mask = (md.w == w) & (md.g == g)
                if not mask.any():
                    raise OverlapError(f"empty cell (w={w}, g={g}) in cellwise outcome fit")
                sub = md.restrict(mask)
                X1, lab1 = sub.design(formula_y1)
                X2, lab2 = sub.design(formula_y2)
                cells[(w, g)] = (_ols(X1, sub.y1, lab1), _ols(X2, sub.y2, lab2))
        return OutcomeRegFit(mode, md, formula_y1, formula_y2, cell_coefs=cells,
                             labels_y1=lab1, labels_y2=lab2)
    raise ValueError(f"unknown outcome regression mode {mode!r}")


# -- fitted-value bundle and diagnostics ----------------------------------------


@dataclass
class NuisanceValues:
    """Per-unit nuisance values the estimators consume.

    ``p`` is P(W=1|z); ``pi[(w, g)]`` is P(G=g|W=w, z); ``delta_m[(w, g)]``
    is the fitted trend and ``m2[(w, g)]`` the second-period fitted level
    (needed by spillover contrasts; may be absent in differenced mode).
    Construct directly for oracle values, or via :func:`from_fits`.
    """

    p: np.ndarray
    pi: dict
    delta_m: dict
    m2: Optional[dict] = None

    @classmethod
    def from_fits(cls, md: ModelData, fit_w: LogitFit, fit_g: LogitFit,
                  reg: OutcomeRegFit, levels=None) -> "NuisanceValues":
        levels = md.level_set if levels is None else levels
        p = predict_p(fit_w, md)
        pi, dm, m2 = {}, {}, {}
        for w in (0, 1):
            for g in levels:
                pi[(w, g)] = predict_pi(fit_g, md, w, g)
                dm[(w, g)] = reg.delta_m(w, g)
                if reg.mode != "differenced":
                    m2[(w, g)] = reg.m2(w, g)
        return cls(p, pi, dm, m2 if m2 else None)


@dataclass
class PropensityDiagnostics:
    p_min: float
    p_max: float
    pi_min: dict  # {(w, g): min fitted probability}
    cell_counts: dict  # {(w, g): units with W=w, G=g}
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings


def overlap_diagnostics(values: NuisanceValues, md: ModelData,
                        floor: float = 0.01) -> PropensityDiagnostics:
    """Report fitted-probability extrema and flag weak overlap.

    Warnings only; degenerate propensities are never silently truncated.
    """
    notes = []
    p_min, p_max = float(values.p.min()), float(values.p.max())
    if p_min < floor or p_max > 1 - floor:
        i = int(values.p.argmin() if p_min < floor else values.p.argmax())
        notes.append(f"treatment propensity outside [{floor}, {1 - floor}] "
                     f"(unit index {i}: {values.p[i]:.4g})")
    pi_min = {}
    for key, arr in values.pi.items():
        pi_min[key] = float(arr.min())
        if pi_min[key] < floor:
            i = int(arr.argmin())
            notes.append(f"exposure propensity pi[w={key[0]}, g={key[1]}] below "
                         f"{floor} (unit index {i}: {arr[i]:.4g})")
    counts = {(w, g): int(((md.w == w) & (md.g == g)).sum())
              for w in (0, 1) for g in md.level_set}
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return PropensityDiagnostics(p_min, p_max, pi_min, counts, notes)
