"""Stacked moment systems: nuisance conditions plus the effect moment.

The direct-effect (or spillover) moment is stacked with the propensity-score
conditions (MLE scores or CBPS balancing equations) and the outcome
regression normal equations into one just-identified system, so that
inference on the effect accounts for nuisance estimation.

The system is block triangular: nuisance blocks do not involve the effect
parameter, and the effect moment is affine in it. The solver therefore runs
the sequential two-step fits to initialize and then Newton steps on the
stacked mean moments, which coincide with the two-step estimates for the
default just-identified layout.

Parameter layout is fixed as (gamma_w, gamma_g, gamma_y1, gamma_y2, tau)
(or (gamma_w, gamma_g, gamma_dy, tau) in differenced outcome mode) so
per-unit moment matrices align across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .design import ModelData
from .errors import AssemblyError, ConditioningError, ConvergenceError
from .estimators import EstimandRequest, dr_datt, dr_spillover
from .nuisance import (NuisanceSpec, NuisanceValues, fit_cbps, fit_logit_g,
                       fit_logit_w, fit_outcome_regressions)

SOLVE_TOL = 1e-8


@dataclass
class GmmSolution:
    theta: np.ndarray
    labels: list[str]
    layout: dict  # block name -> slice into theta
    per_unit_moments: np.ndarray  # (n, m)
    jacobian: np.ndarray  # (m, p) mean gradient of the moments
    psi: np.ndarray  # weighting matrix
    converged: bool
    moment_norm: float
    n: int
    request: EstimandRequest

    @property
    def tau(self) -> float:
        return float(self.theta[-1])


class MomentSystem:
    """Per-unit moment functions q(X_i, theta) and their mean Jacobian."""

    def __init__(self, md: ModelData, spec: Optional[NuisanceSpec],
                 request: EstimandRequest,
                 oracle: Optional[NuisanceValues] = None):
        self.md = md
        self.spec = spec
        self.request = request
        self.oracle = oracle
        self.n = md.n
        self.levels = md.level_set
        self._effect_levels = ([request.g, request.g_prime]
                               if request.target == "dr_spillover" else [request.g])
        for lvl in self._effect_levels:
            if lvl not in self.levels:
                raise AssemblyError(f"requested level {lvl} not in level set {self.levels}")
        if oracle is None:
            self._build_design()
        else:
            self.labels = ["tau"]
            self.layout = {"effect": slice(0, 1)}
        self.n_params = len(self.labels)
        self.n_moments = self.n_params

    # -- assembly ----------------------------------------------------------

    def _build_design(self):
        md, spec = self.md, self.spec
        if spec.outcome_mode not in ("pooled", "differenced"):
            raise AssemblyError("stacked systems support pooled or differenced "
                                f"outcome modes, not {spec.outcome_mode!r}")
        self.Xw, labels_w = md.design(spec.formula_w)
        if spec.balance_w is not None:
            xb, labels_b = md.design(spec.balance_w)
            if xb.shape[1] != self.Xw.shape[1]:
                raise AssemblyError(
                    f"CBPS balancing covariates ({len(labels_b)}) must match the "
                    f"propensity coefficients ({len(labels_w)}); over-identified "
                    "systems are not supported")
            self.Xw_bal = xb
        else:
            self.Xw_bal = self.Xw
        self.Vg_own, labels_g = md.design(spec.formula_g)
        self.Vg = {w: md.design(spec.formula_g, w=w)[0] for w in (0, 1)}
        self.kg = self.Vg_own.shape[1]
        self.n_nonbase = len(self.levels) - 1
        self.multinomial = len(self.levels) > 2
        self.g_idx = np.searchsorted(np.array(self.levels), md.g)

        labels = [f"ps_w.{l}" for l in labels_w]
        layout = {"ps_w": slice(0, len(labels_w))}
        if self.multinomial:
            g_labels = [f"ps_g[{lvl}].{l}" for lvl in self.levels[1:] for l in labels_g]
        else:
            g_labels = [f"ps_g.{l}" for l in labels_g]
        layout["ps_g"] = slice(len(labels), len(labels) + len(g_labels))
        labels += g_labels

        arms = ((self.request.w_arm,) if self.request.target == "dr_spillover"
                else (0, 1))
        if spec.outcome_mode == "pooled":
            self.X1, labels_1 = md.design(spec.formula_y1)
            self.X2, labels_2 = md.design(spec.formula_y2)
            self.D1 = {w: md.design(spec.formula_y1, w=w)[0] for w in arms}
            self.D2 = {(w, lvl): md.design(spec.formula_y2, w=w, g=lvl)[0]
                       for w in arms for lvl in self._effect_levels}
            layout["reg_y1"] = slice(len(labels), len(labels) + len(labels_1))
            labels += [f"reg_y1.{l}" for l in labels_1]
            layout["reg_y2"] = slice(len(labels), len(labels) + len(labels_2))
            labels += [f"reg_y2.{l}" for l in labels_2]
        else:
            if self.request.target == "dr_spillover":
                raise AssemblyError("spillover systems need per-period outcome fits; "
                                    "use pooled outcome mode")
            self.Xd, labels_d = md.design(spec.formula_y2)
            self.Dd = {(w, lvl): md.design(spec.formula_y2, w=w, g=lvl)[0]
                       for w in arms for lvl in self._effect_levels}
            layout["reg_dy"] = slice(len(labels), len(labels) + len(labels_d))
            labels += [f"reg_dy.{l}" for l in labels_d]
        layout["effect"] = slice(len(labels), len(labels) + 1)
        labels.append("tau")
        self.labels = labels
        self.layout = layout

    # -- sequential two-step initialization ---------------------------------

    def initial_theta(self) -> np.ndarray:
        """Sequential estimates: nuisance fits, then the plug-in effect."""
        if self.oracle is not None:
            return np.array([self._plugin_tau(self.oracle)])
        md, spec = self.md, self.spec
        if spec.ps_source == "cbps":
            fit_w, fit_g = fit_cbps(md, spec.formula_w, spec.formula_g)
        else:
            fit_w = fit_logit_w(md, spec.formula_w)
            fit_g = fit_logit_g(md, spec.formula_g)
        if spec.outcome_mode == "pooled":
            reg = fit_outcome_regressions(md, spec.formula_y1, spec.formula_y2, "pooled")
            gamma_reg = [reg.coef_y1, reg.coef_y2]
        else:
            reg = fit_outcome_regressions(md, None, spec.formula_y2, "differenced")
            gamma_reg = [reg.coef_diff]
        values = NuisanceValues.from_fits(md, fit_w, fit_g, reg,
                                          levels=self._effect_levels)
        tau = self._plugin_tau(values)
        return np.concatenate([fit_w.coefficients.ravel(),
                               fit_g.coefficients.ravel(),
                               *gamma_reg, [tau]])

    def _plugin_tau(self, values: NuisanceValues) -> float:
        req = self.request
        if req.target == "dr_spillover":
            est = dr_spillover(self.md, values, req.w_arm, req.g, req.g_prime,
                               normalize=req.normalize)
        else:
            est = dr_datt(self.md, values, req.g, normalize=req.normalize)
        return est.value

    # -- evaluation at arbitrary theta ---------------------------------------

    def _gamma(self, theta, block):
        return theta[self.layout[block]]

    def _pi_matrix(self, gamma_g, V):
        """Level probabilities (n, L) for a counterfactual design V."""
        if not self.multinomial:
            p1 = expit(V @ gamma_g)
            return np.column_stack([1 - p1, p1])
        beta = gamma_g.reshape(self.n_nonbase, self.kg)
        eta = V @ beta.T
        emax = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
        num = np.exp(eta - emax)
        den = np.exp(-emax).ravel() + num.sum(axis=1)
        out = np.empty((self.n, len(self.levels)))
        out[:, 0] = np.exp(-emax).ravel() / den
        out[:, 1:] = num / den[:, None]
        return out

    def _nuisance_values(self, theta) -> NuisanceValues:
        if self.oracle is not None:
            return self.oracle
        p = expit(self.Xw @ self._gamma(theta, "ps_w"))
        gamma_g = self._gamma(theta, "ps_g")
        pi = {}
        arms = ((self.request.w_arm,) if self.request.target == "dr_spillover"
                else (0, 1))
        for w in arms:
            probs = self._pi_matrix(gamma_g, self.Vg[w])
            for lvl in self._effect_levels:
                pi[(w, lvl)] = probs[:, self.levels.index(lvl)]
        dm, m2 = {}, {}
        if self.spec.outcome_mode == "pooled":
            g3 = self._gamma(theta, "reg_y1")
            g4 = self._gamma(theta, "reg_y2")
            for w in arms:
                for lvl in self._effect_levels:
                    m2[(w, lvl)] = self.D2[(w, lvl)] @ g4
                    dm[(w, lvl)] = m2[(w, lvl)] - self.D1[w] @ g3
        else:
            gd = self._gamma(theta, "reg_dy")
            for w in arms:
                for lvl in self._effect_levels:
                    dm[(w, lvl)] = self.Dd[(w, lvl)] @ gd
        return NuisanceValues(p, pi, dm, m2 if m2 else None)

    def _effect_weights(self, values):
        """Arm weight vectors and the residual/offset pieces of the effect moment."""
        md, req = self.md, self.request
        if req.target == "dr_spillover":
            w_arm, g, gp = req.w_arm, req.g, req.g_prime
            base = md.w / values.p if w_arm == 1 else (1 - md.w) / (1 - values.p)
            wt1 = base * (md.g == g) / values.pi[(w_arm, g)]
            wt0 = base * (md.g == gp) / values.pi[(w_arm, gp)]
            r1 = md.y2 - values.m2[(w_arm, g)]
            r0 = md.y2 - values.m2[(w_arm, gp)]
            offset = values.m2[(w_arm, g)] - values.m2[(w_arm, gp)]
        else:
            g = req.g
            wt1 = md.w * (md.g == g) / (values.p * values.pi[(1, g)])
            wt0 = (1 - md.w) * (md.g == g) / ((1 - values.p) * values.pi[(0, g)])
            r1 = md.dy - values.delta_m[(1, g)]
            r0 = md.dy - values.delta_m[(0, g)]
            offset = values.delta_m[(1, g)] - values.delta_m[(0, g)]
        return wt1, wt0, r1, r0, offset

    def _effect_moment(self, values, tau):
        wt1, wt0, r1, r0, offset = self._effect_weights(values)
        if self.request.normalize:
            s1, s0 = wt1.sum(), wt0.sum()
            mu1 = (wt1 * r1).sum() / s1
            mu0 = (wt0 * r0).sum() / s0
            u1, u0 = wt1 / s1 * self.n, wt0 / s0 * self.n
            return u1 * (r1 - mu1) - u0 * (r0 - mu0) + offset + (mu1 - mu0) - tau
        return wt1 * r1 - wt0 * r0 + offset - tau

    def moments(self, theta) -> np.ndarray:
        """Per-unit moment matrix q(X_i, theta), shape (n, m)."""
        values = self._nuisance_values(theta)
        tau = theta[-1]
        q5 = self._effect_moment(values, tau)
        if self.oracle is not None:
            return q5[:, None]
        md, spec = self.md, self.spec
        cols = []
        p = values.p
        if spec.ps_source == "cbps":
            cols.append(self.Xw_bal * (md.w / p - (1 - md.w) / (1 - p))[:, None])
        else:
            cols.append(self.Xw * (md.w - p)[:, None])
        pi_own = self._pi_matrix(self._gamma(theta, "ps_g"), self.Vg_own)
        if spec.ps_source == "cbps":
            blocks = []
            for j in range(1, len(self.levels)):
                hi = (self.g_idx == j) / pi_own[:, j]
                lo = (self.g_idx == j - 1) / pi_own[:, j - 1]
                blocks.append(self.Vg_own * (hi - lo)[:, None])
            cols.append(np.hstack(blocks))
        else:
            blocks = []
            for j in range(1, len(self.levels)):
                resid = (self.g_idx == j) - pi_own[:, j]
                blocks.append(self.Vg_own * resid[:, None])
            cols.append(np.hstack(blocks))
        if spec.outcome_mode == "pooled":
            g3 = self._gamma(theta, "reg_y1")
            g4 = self._gamma(theta, "reg_y2")
            cols.append(self.X1 * (md.y1 - self.X1 @ g3)[:, None])
            cols.append(self.X2 * (md.y2 - self.X2 @ g4)[:, None])
        else:
            gd = self._gamma(theta, "reg_dy")
            cols.append(self.Xd * (md.dy - self.Xd @ gd)[:, None])
        cols.append(q5[:, None])
        return np.hstack(cols)

    def mean_moments(self, theta) -> np.ndarray:
        return self.moments(theta).mean(axis=0)

    # -- analytic mean Jacobian ----------------------------------------------

    def _dlog_pi(self, pi_probs, lvl, V):
        """d log pi_lvl / d gamma_g rows, shape (n, dim gamma_g)."""
        j = self.levels.index(lvl)
        if not self.multinomial:
            sign_term = (1 - pi_probs[:, 1]) if j == 1 else -pi_probs[:, 1]
            return V * sign_term[:, None]
        out = np.empty((self.n, self.n_nonbase * self.kg))
        for a in range(1, len(self.levels)):
            coef = (1.0 * (j == a)) - pi_probs[:, a]
            out[:, (a - 1) * self.kg:a * self.kg] = V * coef[:, None]
        return out

    def jacobian(self, theta) -> np.ndarray:
        """Mean gradient of the moments, shape (m, p)."""
        n = self.n
        if self.oracle is not None:
            return np.array([[-1.0]])
        md, spec = self.md, self.spec
        J = np.zeros((self.n_moments, self.n_params))
        sl_w, sl_g = self.layout["ps_w"], self.layout["ps_g"]
        sl_t = self.layout["effect"]
        values = self._nuisance_values(theta)
        p = values.p

        # ps_w block
        if spec.ps_source == "cbps":
            c = md.w * (1 - p) / p + (1 - md.w) * p / (1 - p)
            J[sl_w, sl_w] = -(self.Xw_bal * c[:, None]).T @ self.Xw / n
        else:
            c = p * (1 - p)
            J[sl_w, sl_w] = -(self.Xw * c[:, None]).T @ self.Xw / n

        # ps_g block
        pi_own = self._pi_matrix(self._gamma(theta, "ps_g"), self.Vg_own)
        L = len(self.levels)
        kg = self.kg
        Jg = np.zeros((self.n_nonbase * kg, self.n_nonbase * kg))
        if spec.ps_source == "cbps":
            for j in range(1, L):
                hi = (self.g_idx == j).astype(float)
                lo = (self.g_idx == j - 1).astype(float)
                for a in range(1, L):
                    dhi = ((1.0 * (j == a)) - pi_own[:, a]) * hi / pi_own[:, j]
                    dlo = ((1.0 * (j - 1 == a)) - pi_own[:, a]) * lo / pi_own[:, j - 1]
                    Jg[(j - 1) * kg:j * kg, (a - 1) * kg:a * kg] = \
                        (self.Vg_own * (-(dhi - dlo))[:, None]).T @ self.Vg_own / n
        else:
            for j in range(1, L):
                for a in range(1, L):
                    wab = pi_own[:, j] * ((1.0 * (j == a)) - pi_own[:, a])
                    Jg[(j - 1) * kg:j * kg, (a - 1) * kg:a * kg] = \
                        -(self.Vg_own * wab[:, None]).T @ self.Vg_own / n
        J[sl_g, sl_g] = Jg

        # outcome blocks
        if spec.outcome_mode == "pooled":
            sl_3, sl_4 = self.layout["reg_y1"], self.layout["reg_y2"]
            J[sl_3, sl_3] = -self.X1.T @ self.X1 / n
            J[sl_4, sl_4] = -self.X2.T @ self.X2 / n
        else:
            sl_d = self.layout["reg_dy"]
            J[sl_d, sl_d] = -self.Xd.T @ self.Xd / n

        # effect row
        wt1, wt0, r1, r0, offset = self._effect_weights(values)
        row = self.n_moments - 1
        J[row, sl_t] = -1.0

        # derivatives of the arm weights w.r.t. gamma_w
        if self.request.target == "dr_spillover" and self.request.w_arm == 0:
            dwt1_w = wt1 * p           # both arms use (1-W)/(1-p)
            dwt0_w = wt0 * p
        elif self.request.target == "dr_spillover":
            dwt1_w = -wt1 * (1 - p)
            dwt0_w = -wt0 * (1 - p)
        else:
            dwt1_w = -wt1 * (1 - p)
            dwt0_w = wt0 * p

        # derivatives w.r.t. gamma_g via d log pi at the counterfactual designs
        req = self.request
        if req.target == "dr_spillover":
            w_arm = req.w_arm
            pi_hi = self._pi_matrix(self._gamma(theta, "ps_g"), self.Vg[w_arm])
            dlog_hi = self._dlog_pi(pi_hi, req.g, self.Vg[w_arm])
            dlog_lo = self._dlog_pi(pi_hi, req.g_prime, self.Vg[w_arm])
        else:
            pi1 = self._pi_matrix(self._gamma(theta, "ps_g"), self.Vg[1])
            pi0 = self._pi_matrix(self._gamma(theta, "ps_g"), self.Vg[0])
            dlog_hi = self._dlog_pi(pi1, req.g, self.Vg[1])
            dlog_lo = self._dlog_pi(pi0, req.g, self.Vg[0])

        def arm_term(wt, r, dwt_w, dlog):
            """d/d(gamma_w, gamma_g) of the (possibly normalized) arm average."""
            dA_w = (dwt_w * r) @ self.Xw / n
            dN_w = dwt_w @ self.Xw / n
            dA_g = (-wt * r) @ dlog / n
            dN_g = (-wt) @ dlog / n
            if req.normalize:
                s = wt.sum() / n
                A = (wt * r).sum() / n
                return ((dA_w * s - A * dN_w) / s ** 2,
                        (dA_g * s - A * dN_g) / s ** 2)
            return dA_w, dA_g

        t1_w, t1_g = arm_term(wt1, r1, dwt1_w, dlog_hi)
        t0_w, t0_g = arm_term(wt0, r0, dwt0_w, dlog_lo)
        J[row, sl_w] = t1_w - t0_w
        J[row, sl_g] = t1_g - t0_g

        # effect row: outcome-model coefficients
        s1 = wt1.sum() / n if req.normalize else 1.0
        s0 = wt0.sum() / n if req.normalize else 1.0
        if req.target == "dr_spillover":
            w_arm = req.w_arm
            if spec.outcome_mode == "pooled":
                sl_4 = self.layout["reg_y2"]
                D_g = self.D2[(w_arm, req.g)]
                D_gp = self.D2[(w_arm, req.g_prime)]
                J[row, sl_4] = (-(wt1 @ D_g) / (n * s1) + (wt0 @ D_gp) / (n * s0)
                                + (D_g - D_gp).mean(axis=0))
        else:
            g = req.g
            if spec.outcome_mode == "pooled":
                sl_3, sl_4 = self.layout["reg_y1"], self.layout["reg_y2"]
                J[row, sl_3] = ((wt1 @ self.D1[1]) / (n * s1)
                                - (wt0 @ self.D1[0]) / (n * s0)
                                - (self.D1[1] - self.D1[0]).mean(axis=0))
                J[row, sl_4] = (-(wt1 @ self.D2[(1, g)]) / (n * s1)
                                + (wt0 @ self.D2[(0, g)]) / (n * s0)
                                + (self.D2[(1, g)] - self.D2[(0, g)]).mean(axis=0))
            else:
                sl_d = self.layout["reg_dy"]
                J[row, sl_d] = (-(wt1 @ self.Dd[(1, g)]) / (n * s1)
                                + (wt0 @ self.Dd[(0, g)]) / (n * s0)
                                + (self.Dd[(1, g)] - self.Dd[(0, g)]).mean(axis=0))
        return J

    def fd_jacobian(self, theta, step: float = 1e-6) -> np.ndarray:
        """Central finite-difference Jacobian of the mean moments (for checks)."""
        p = len(theta)
        out = np.empty((self.n_moments, p))
        for j in range(p):
            h = step * max(1.0, abs(theta[j]))
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            out[:, j] = (self.mean_moments(up) - self.mean_moments(dn)) / (2 * h)
        return out


def assemble_moments(md: ModelData, spec: Optional[NuisanceSpec],
                     request: EstimandRequest,
                     oracle: Optional[NuisanceValues] = None) -> MomentSystem:
    """Build the stacked moment system for one estimand.

    With ``oracle`` nuisance values the system reduces to the single effect
    moment (one parameter). Multiple estimands are separate systems sharing
    the nuisance specification; they are not stacked jointly.
    """
    if oracle is None and spec is None:
        raise AssemblyError("either a nuisance spec or oracle values are required")
    if oracle is not None:
        return MomentSystem(md, None, request, oracle=oracle)
    return MomentSystem(md, spec, request)


def solve_gmm(system: MomentSystem, weighting: Optional[np.ndarray] = None,
              tol: float = SOLVE_TOL, max_iter: int = 50) -> GmmSolution:
    """Solve the stacked system starting from the sequential two-step fits.

    Just-identified systems satisfy mean q(theta) = 0 at the solution; the
    weighting matrix only matters for over-identified systems and defaults
    to the identity.
    """
    theta = system.initial_theta()
    psi = np.eye(system.n_moments) if weighting is None else np.asarray(weighting, float)
    if psi.shape != (system.n_moments, system.n_moments):
        raise AssemblyError(f"weighting matrix must be {system.n_moments}x{system.n_moments}")
    qbar = system.mean_moments(theta)
    norm = np.abs(qbar).max()
    iterations = 0
    while norm > tol and iterations < max_iter:
        J = system.jacobian(theta)
        try:
            step = np.linalg.solve(J, -qbar)
        except np.linalg.LinAlgError:
            raise ConditioningError("singular Jacobian in the stacked moment solve")
        theta = theta + step
        qbar = system.mean_moments(theta)
        new_norm = np.abs(qbar).max()
        if not np.isfinite(new_norm):
            raise ConvergenceError("stacked moment solve diverged")
        norm = new_norm
        iterations += 1
    if norm > tol:
        raise ConvergenceError(f"stacked moments not solved after {max_iter} Newton "
                               f"steps (max |mean q| = {norm:.2e})")
    return GmmSolution(
        theta=theta, labels=list(system.labels), layout=dict(system.layout),
        per_unit_moments=system.moments(theta), jacobian=system.jacobian(theta),
        psi=psi, converged=True, moment_norm=float(norm), n=system.n,
        request=system.request)
