"""Simulation lab: replication designs, estimator suites, and summaries.

Populations live on an irregular plane region: locations and the fixed
attributes (z and the spatially correlated locational covariate z_u) are
drawn once per seed and held fixed; treatments, exposure, and outcomes are
redrawn every replication. Draws come from named counter-based substreams
keyed by (seed, replication, variable), so results are bit-identical for a
given (seed, spec, reps) regardless of the parallel degree.

Design ids follow the replication tables: "1".."6" for the main comparison
designs, "appendixE" for the larger heterogeneous-effect design, and
"appendixF-noSpill"/"appendixF-spill" for the canonical-DID comparison.
"""

from __future__ import annotations

import hashlib
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.stats
from scipy.special import expit

from . import estimators, gmm, inference
from .design import Formula, ModelData
from .errors import ConfigError, SpillDidError
from .exposure import ExposureAssignment
from .nuisance import (NuisanceSpec, NuisanceValues, fit_cbps, fit_logit_g,
                       fit_logit_w, fit_outcome_regressions, predict_p)
from .population import Population, build_adjacency, pairwise_distances

_TAGS = {"locations": 1, "z": 2, "zu": 3, "u": 4, "e1": 5, "e2": 6, "xi": 7}

# The published description of the replication designs places units on
# U(0,20)^2 with neighbor cutoff 0.3, but every reported quantity that
# depends on the neighborhood density (the ~350-of-400 subpopulation with
# neighbors, the exposure shares behind the canonical-DID comparison, the
# replication SDs) is only consistent with a much denser graph. The domain
# side below is calibrated so the expected share of units with neighbors
# matches the reported draws; see the package README for the reasoning.
_DOMAIN_SIDE = {"default": 8.3, "appendixE": 16.9}

_DESIGN_IDS = ("1", "2", "3", "4", "5", "6",
               "appendixE", "appendixF-noSpill", "appendixF-spill")


def substream(seed: int, tag: str, rep: int = 0) -> np.random.Generator:
    """Counter-based generator for one (seed, replication, variable) slot."""
    key = np.array([np.uint64(seed), np.uint64(rep) * np.uint64(256) + np.uint64(_TAGS[tag])],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class DesignSpec:
    design_id: str
    n: int
    cutoff: float
    domain_side: float
    seed: int

    def __post_init__(self):
        if self.design_id not in _DESIGN_IDS:
            raise ConfigError(f"unknown design {self.design_id!r}; expected one of {_DESIGN_IDS}")

    @property
    def uses_zu_assignment(self) -> bool:
        return self.design_id in ("3", "4", "5", "6", "appendixE")

    @property
    def threshold_assignment(self) -> bool:
        return self.design_id.startswith("appendixF")

    @property
    def linear_in_means(self) -> bool:
        return self.design_id in ("4", "5", "appendixE")

    def truth(self) -> dict[str, float]:
        """Per-level direct effects built into the design."""
        if self.design_id in ("1", "2", "3", "4", "5"):
            return {"tau1": 1.0, "tau0": 1.0}
        if self.design_id in ("6", "appendixF-noSpill"):
            return {"tau1": 1.0, "tau0": 0.0}
        if self.design_id == "appendixF-spill":
            return {"tau1": -1.0, "tau0": 0.0}
        return {"tau1": 0.0, "tau0": 0.0}  # appendixE


def design_spec(design_id: str, seed: int = 0, n: Optional[int] = None,
                cutoff: float = 0.3, domain_side: Optional[float] = None) -> DesignSpec:
    design_id = str(design_id)
    if n is None:
        n = 900 if design_id == "appendixE" else 400
    if domain_side is None:
        domain_side = _DOMAIN_SIDE.get(design_id, _DOMAIN_SIDE["default"])
    return DesignSpec(design_id, n, cutoff, domain_side, seed)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric factor F with F F' = cov (eigenvalues clipped at zero)."""
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    return vecs * np.sqrt(np.maximum(vals, 0.0))


_F_W = Formula(("z", "nbr(z)", "zu"))
_F_W_Z = Formula(("z",))
_F_G = Formula(("w", "z", "nbr(z)", "zu"))
_F_Y1 = Formula(("w", "z", "w:z"))
_F_Y2 = Formula(("w", "z", "w:z", "g"))
_F_W_XI = Formula(("z", "nbr(z)"))
_F_G_XI = Formula(("w", "z", "nbr(z)"))


class FixedDesign:
    """Per-seed fixed ingredients: locations, attributes, neighborhoods."""

    def __init__(self, spec: DesignSpec):
        self.spec = spec
        n, side = spec.n, spec.domain_side
        self.locations = substream(spec.seed, "locations").uniform(0.0, side, size=(n, 2))
        self.z = substream(spec.seed, "z").standard_normal(n)
        dist = pairwise_distances(self.locations, "chebyshev")
        self.zu = _psd_factor(0.5 ** dist) @ substream(spec.seed, "zu").standard_normal(n)
        self.xi_factor = _psd_factor(0.3 ** dist) if spec.threshold_assignment else None
        pop = Population([str(i) for i in range(n)], self.locations,
                         np.column_stack([self.z, self.zu]), ("z", "zu"),
                         np.zeros(n, dtype=int), np.zeros(n), np.zeros(n))
        self.adjacency = build_adjacency(pop, spec.cutoff, row_normalize=True)
        self.eligible = self.adjacency.has_neighbors()
        self.nbr_z = self.adjacency.neighbor_mean(self.z)
        if spec.linear_in_means:
            amat = 0.2 * self.adjacency.weights.toarray()
            self.lim_lu = scipy.linalg.lu_factor(np.eye(n) - amat)
        else:
            self.lim_lu = None
        self.sub_dist = dist[np.ix_(self.eligible, self.eligible)]
        if spec.threshold_assignment:
            self.formula_w, self.formula_g = _F_W_XI, _F_G_XI
        else:
            self.formula_w, self.formula_g = _F_W, _F_G
        self._columns = {"z": self.z, "zu": self.zu, "nbr(z)": self.nbr_z,
                         "nbr(zu)": self.adjacency.neighbor_mean(self.zu)}

    @property
    def n_eligible(self) -> int:
        return int(self.eligible.sum())

    def content_hash(self) -> str:
        """Digest of the fixed draws; constant across replications by design."""
        h = hashlib.sha256()
        for arr in (self.locations, self.z, self.zu):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def assignment_probability(self) -> Optional[np.ndarray]:
        if self.spec.threshold_assignment:
            return None
        if self.spec.uses_zu_assignment:
            return expit(0.3 * self.z + 0.8 * self.zu)
        return expit(0.3 * self.z)

    def nuisance_spec(self, ps_source: str) -> NuisanceSpec:
        return NuisanceSpec(self.formula_w, self.formula_g, _F_Y1, _F_Y2,
                            ps_source=ps_source, outcome_mode="pooled")


@dataclass
class SimDraw:
    """One replication's stochastic components on the full population."""

    w: np.ndarray
    g: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    rep: int


def replicate(fixed: FixedDesign, rep: int) -> SimDraw:
    """Redraw treatments, exposure, and outcomes for replication ``rep``."""
    spec = fixed.spec
    seed, n, z = spec.seed, spec.n, fixed.z
    r = rep + 1  # fixed draws use the rep-0 slots
    if spec.threshold_assignment:
        xi = fixed.xi_factor @ substream(seed, "xi", r).standard_normal(n)
        w = (xi > xi.mean()).astype(int)
    else:
        u = substream(seed, "u", r).uniform(size=n)
        w = (fixed.assignment_probability() > u).astype(int)
    g = (fixed.adjacency.pairs @ w > 0).astype(int)
    e1 = substream(seed, "e1", r).standard_normal(n) + w * z
    e2 = substream(seed, "e2", r).standard_normal(n) + w * z
    y1 = 1 + z + e1
    did = spec.design_id
    if did == "1":
        rhs = 2 + w + g + z + e2
    elif did in ("2", "3"):
        rhs = 2 + w + g + 2 * z + e2
    elif did == "4":
        rhs = 2 + w + 2 * z + e2
    elif did == "5":
        rhs = 2 + w + 2 * z ** 2 + e2
    elif did == "6":
        rhs = 2 + w * g + 2 * z + e2
    elif did == "appendixE":
        rhs = 2 + 3 * z * w + 2 * z ** 2 + e2
    elif did == "appendixF-noSpill":
        rhs = 2 + w * g + z + e2
    else:  # appendixF-spill
        rhs = 2 + (1 - w) * g + z + e2
    y2 = scipy.linalg.lu_solve(fixed.lim_lu, rhs) if spec.linear_in_means else rhs
    return SimDraw(w, g, y1, y2, rep)


def generate_population(spec: DesignSpec, rep: int = 0
                        ) -> tuple[Population, ExposureAssignment, dict]:
    """One realized population plus its exposure assignment and truth record."""
    fixed = FixedDesign(spec)
    sim = replicate(fixed, rep)
    pop = Population([str(i) for i in range(spec.n)], fixed.locations,
                     np.column_stack([fixed.z, fixed.zu]), ("z", "zu"),
                     sim.w, sim.y1, sim.y2,
                     metadata=f"design {spec.design_id} seed {spec.seed} rep {rep}")
    exposure = ExposureAssignment(sim.g, (0, 1), fixed.eligible.copy())
    return pop, exposure, spec.truth()


def estimation_data(fixed: FixedDesign, sim: SimDraw) -> ModelData:
    """Estimation sample: units with at least one neighbor."""
    md = ModelData(fixed._columns, sim.w, sim.g, (0, 1), sim.y1, sim.y2,
                   fixed.locations, eligible=fixed.eligible)
    return md.restrict(fixed.eligible)


# -- estimator suite -------------------------------------------------------------


class _RepContext:
    """Shared per-replication state so suite entries reuse nuisance fits."""

    def __init__(self, fixed: FixedDesign, sim: SimDraw):
        self.fixed = fixed
        self.sim = sim
        self.md = estimation_data(fixed, sim)
        self._values: dict[str, NuisanceValues] = {}
        self._reg = None

    def reg(self):
        if self._reg is None:
            self._reg = fit_outcome_regressions(self.md, _F_Y1, _F_Y2, "pooled")
        return self._reg

    def values(self, ps_source: str) -> NuisanceValues:
        if ps_source not in self._values:
            if ps_source == "cbps":
                fit_w, fit_g = fit_cbps(self.md, self.fixed.formula_w, self.fixed.formula_g)
            else:
                fit_w = fit_logit_w(self.md, self.fixed.formula_w)
                fit_g = fit_logit_g(self.md, self.fixed.formula_g)
            self._values[ps_source] = NuisanceValues.from_fits(
                self.md, fit_w, fit_g, self.reg())
        return self._values[ps_source]


def _run_twfe(ctx):
    return {"twfe": estimators.canonical_twfe(ctx.md).value}


def _run_abadie(formula, key):
    def run(ctx):
        fit = fit_logit_w(ctx.md, formula)
        return {key: estimators.abadie_ipw(ctx.md, predict_p(fit, ctx.md)).value}
    return run


def _run_atwfe(ctx):
    res = estimators.augmented_twfe(ctx.md, ctx.md.g)
    return {"atwfe1": res.datt1, "atwfe0": res.datt0}


def _run_ra(ctx):
    values = ctx.values("mle")
    return {"ra1": estimators.ra_datt(ctx.md, values, 1).value,
            "ra0": estimators.ra_datt(ctx.md, values, 0).value}


def _run_ipw(source):
    def run(ctx):
        values = ctx.values(source)
        return {f"ipw_{source}1": estimators.ipw_datt(ctx.md, values, 1).value,
                f"ipw_{source}0": estimators.ipw_datt(ctx.md, values, 0).value}
    return run


def _run_dr(source):
    def run(ctx):
        values = ctx.values(source)
        return {f"dr_{source}1": estimators.dr_datt(ctx.md, values, 1).value,
                f"dr_{source}0": estimators.dr_datt(ctx.md, values, 0).value}
    return run


def _run_overall_true(ctx):
    """Share-weighted overall effect with the design's per-level truths."""
    truth = ctx.fixed.spec.truth()
    shares = estimators.treated_level_shares(ctx.md)
    per_level = {1: truth["tau1"], 0: truth["tau0"]}
    return {"overall_true": estimators.aggregate_overall(per_level, shares).value}


# Kernel weights are evaluated at pairwise distances. The display form with
# integer distance bins presumes units at least one unit apart; on the
# calibrated simulation geometry (typical neighbor distance ~0.2) binning
# would lump every pair below distance one into the innermost bin and break
# positive semidefiniteness.
_COV_KERNELS = {"shac0.6": inference.KernelSpec("bartlett", 0.6),
                "shac1": inference.KernelSpec("bartlett", 1.0),
                "shac1.4": inference.KernelSpec("bartlett", 1.4)}


def _run_dr_cov(levels: Sequence[int], methods: Sequence[str],
                full_theta: bool = False, source: str = "cbps"):
    """Stacked-system DR estimates with standard errors per variance method."""

    def run(ctx):
        out = {}
        spec = ctx.fixed.nuisance_spec(source)
        for g in levels:
            system = gmm.assemble_moments(ctx.md, spec, estimators.EstimandRequest("dr_datt", g=g))
            solution = gmm.solve_gmm(system)
            name = f"dr_{source}{g}"
            out[name] = solution.tau
            variances = {}
            for m in methods:
                if m == "ehw":
                    variances[m] = inference.ehw_variance(solution)
                else:
                    variances[m] = inference.shac_variance(
                        solution, ctx.md.coords, _COV_KERNELS[m], dist=ctx.fixed.sub_dist)
                out[f"{name}.se_{m}"] = variances[m].se_for("tau")
            if full_theta and g == levels[0]:
                for j, label in enumerate(solution.labels[:-1]):
                    out[f"theta.{label}"] = float(solution.theta[j])
                    for m in methods:
                        out[f"theta.{label}.se_{m}"] = float(variances[m].se[j])
        return out

    return run


SUITES = {
    "twfe": _run_twfe,
    "canonical": _run_twfe,
    "abadie_z": _run_abadie(_F_W_Z, "abadie_z"),
    "abadie_zs": _run_abadie(_F_W, "abadie_zs"),
    "atwfe": _run_atwfe,
    "ra": _run_ra,
    "ipw_mle": _run_ipw("mle"),
    "ipw_cbps": _run_ipw("cbps"),
    "dr_mle": _run_dr("mle"),
    "dr_cbps": _run_dr("cbps"),
    "overall": _run_overall_true,
    "dr_cbps_cov": _run_dr_cov((1,), ("ehw", "shac0.6", "shac1")),
    "dr_cbps_cov_full": _run_dr_cov((1, 0), ("ehw", "shac0.6", "shac1", "shac1.4"),
                                    full_theta=True),
}


@dataclass
class ReplicationSummary:
    """Per-estimator replication results with derived summaries.

    Coverage follows the replication convention: the nominal-level interval
    around each replication's estimate is scored against the across-
    replication mean estimate, so it compares standard errors to the actual
    sampling spread without rewarding or punishing bias.
    """

    spec: DesignSpec
    n_reps: int
    suite: tuple[str, ...]
    estimates: dict[str, np.ndarray]
    failures: list = field(default_factory=list)

    def names(self) -> list[str]:
        return [k for k in self.estimates if ".se_" not in k]

    def _ok(self, name):
        vals = self.estimates[name]
        return vals[np.isfinite(vals)]

    def mean(self, name: str) -> float:
        return float(self._ok(name).mean())

    def sd(self, name: str) -> float:
        vals = self._ok(name)
        if len(vals) < 2:
            return float("nan")
        return float(vals.std(ddof=1))

    def bias(self, name: str, truth: float) -> float:
        return self.mean(name) - truth

    def coverage(self, name: str, method: str, level: float = 0.95) -> float:
        est = self.estimates[name]
        se = self.estimates[f"{name}.se_{method}"]
        ok = np.isfinite(est) & np.isfinite(se)
        zq = float(scipy.stats.norm.ppf(0.5 + level / 2))
        center = est[ok].mean()
        return float((np.abs(est[ok] - center) <= zq * se[ok]).mean())

    def table(self) -> str:
        truth = self.spec.truth()
        lines = [f"design {self.spec.design_id}  seed {self.spec.seed}  "
                 f"reps {self.n_reps}  failures {len(self.failures)}",
                 f"{'estimator':<24}{'mean':>10}{'sd':>10}"]
        for name in self.names():
            lines.append(f"{name:<24}{self.mean(name):>10.3f}{self.sd(name):>10.3f}")
        cov_rows = sorted({(k.split('.se_')[0], k.split('.se_')[1])
                           for k in self.estimates if ".se_" in k})
        if cov_rows:
            lines.append(f"{'coverage (95%)':<24}{'rate':>10}")
            for name, method in cov_rows:
                lines.append(f"{name + ' ' + method:<24}"
                             f"{self.coverage(name, method):>10.3f}")
        lines.append("truth: " + ", ".join(f"{k}={v}" for k, v in truth.items()))
        return "\n".join(lines)


def _run_one(fixed: FixedDesign, suite_fns, rep: int):
    ctx = _RepContext(fixed, replicate(fixed, rep))
    row = {}
    for fn in suite_fns:
        row.update(fn(ctx))
    return row


_WORKER = {}


def _init_worker(spec, suite_names):
    _WORKER["fixed"] = FixedDesign(spec)
    _WORKER["fns"] = [SUITES[s] for s in suite_names]


def _worker_chunk(reps):
    out = []
    for rep in reps:
        try:
            out.append((rep, _run_one(_WORKER["fixed"], _WORKER["fns"], rep), None))
        except SpillDidError as exc:
            out.append((rep, None, f"{type(exc).__name__}: {exc}"))
    return out


def run_replications(spec: DesignSpec, suite: Sequence[str], reps: int,
                     parallel: int = 1) -> ReplicationSummary:
    """Run ``reps`` replications of the estimator suite and summarize.

    Results are deterministic in (spec, suite, reps) for any ``parallel``
    degree. Replications that raise a package error are recorded as failures
    and excluded from the summaries.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    unknown = [s for s in suite if s not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite entries {unknown}; available: {sorted(SUITES)}")
    suite = tuple(suite)
    rows: list = [None] * reps
    failures = []
    if parallel <= 1:
        fixed = FixedDesign(spec)
        fns = [SUITES[s] for s in suite]
        for rep in range(reps):
            try:
                rows[rep] = _run_one(fixed, fns, rep)
            except SpillDidError as exc:
                failures.append((rep, f"{type(exc).__name__}: {exc}"))
    else:
        chunks = np.array_split(np.arange(reps), parallel * 4)
        with ProcessPoolExecutor(max_workers=parallel, initializer=_init_worker,
                                 initargs=(spec, suite)) as pool:
            for chunk_out in pool.map(_worker_chunk, [c.tolist() for c in chunks if len(c)]):
                for rep, row, err in chunk_out:
                    if err is None:
                        rows[rep] = row
                    else:
                        failures.append((rep, err))
    keys: list[str] = []
    for row in rows:
        if row:
            for k in row:
                if k not in keys:
                    keys.append(k)
    estimates = {k: np.full(reps, np.nan) for k in keys}
    for rep, row in enumerate(rows):
        if row:
            for k, v in row.items():
                estimates[k][rep] = v
    if failures and len(failures) > 0.001 * reps:
        warnings.warn(f"{len(failures)} of {reps} replications failed")
    return ReplicationSummary(spec, reps, suite, estimates, failures)


def parallel_trend_gap(spec: DesignSpec, reps: int = 2000,
                       min_cell: int = 25) -> dict[int, float]:
    """Numerical check of approximate parallel trends for designs 4 and 5.

    Uses the analytic inner expectation of the own-untreated outcome trend
    given the realized assignment, so only treatment randomness remains.
    Returns the average treated-minus-untreated trend gap per exposure level
    over units observed in both cells.
    """
    if not spec.linear_in_means:
        raise ConfigError("trend-gap check applies to the linear-in-means designs")
    fixed = FixedDesign(spec)
    n, z = spec.n, fixed.z
    minv = scipy.linalg.lu_solve(fixed.lim_lu, np.eye(n))
    mdiag = np.diag(minv)
    zsq = 2 * z ** 2 if spec.design_id in ("5", "appendixE") else 2 * z
    sums = {(wv, gv): np.zeros(n) for wv in (0, 1) for gv in (0, 1)}
    counts = {(wv, gv): np.zeros(n) for wv in (0, 1) for gv in (0, 1)}
    for rep in range(reps):
        sim = replicate(fixed, rep)
        w = sim.w.astype(float)
        own = 3 * z * w if spec.design_id == "appendixE" else w
        ey2 = minv @ (2 + own + zsq + w * z)
        ey2_own0 = ey2 - mdiag * (own + w * z)
        trend = ey2_own0 - (1 + z + w * z)
        for gv in (0, 1):
            cell = (sim.g == gv)
            for wv in (0, 1):
                mask = cell & (sim.w == wv) & fixed.eligible
                sums[(wv, gv)][mask] += trend[mask]
                counts[(wv, gv)][mask] += 1
    gaps = {}
    for gv in (0, 1):
        ok = (counts[(1, gv)] >= min_cell) & (counts[(0, gv)] >= min_cell)
        m1 = sums[(1, gv)][ok] / counts[(1, gv)][ok]
        m0 = sums[(0, gv)][ok] / counts[(0, gv)][ok]
        gaps[gv] = float((m1 - m0).mean())
    return gaps
