"""Model formulas and design matrices for nuisance fitting.

A :class:`Formula` is an ordered list of terms over the estimation sample's
named columns. Supported terms:

* ``"w"`` -- the binary treatment;
* ``"g"`` -- exposure-level indicators, one column per non-baseline level;
* any attribute column name, including neighbor means named ``"nbr(<col>)"``;
* interactions ``"a:b"`` of two of the above (``"w:z"``, ``"w:g"``, ...).

An intercept is always included first. Design matrices can be rebuilt with
the treatment or the exposure level overridden, which is how counterfactual
fitted values m(t, w, g) are evaluated at every unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .exposure import ExposureAssignment
from .population import Adjacency, Population


@dataclass(frozen=True)
class Formula:
    terms: tuple[str, ...]

    def __init__(self, terms: Sequence[str]):
        object.__setattr__(self, "terms", tuple(terms))
        for t in self.terms:
            if t.count(":") > 1:
                raise ConfigError(f"term {t!r}: only two-way interactions are supported")

    def __repr__(self):
        return f"Formula({' + '.join(self.terms) or '1'})"


class ModelData:
    """Estimation sample with resolved columns for formula evaluation.

    Holds the attribute columns (plus any adjacency-derived neighbor means),
    the treatment, realized exposure levels, and the outcomes. ``restrict``
    slices everything to a subpopulation, keeping column resolution intact.
    """

    def __init__(self, columns: Mapping[str, np.ndarray], w: np.ndarray,
                 g: np.ndarray, level_set: tuple[int, ...],
                 y1: np.ndarray, y2: np.ndarray,
                 coords: np.ndarray, clusters: Optional[np.ndarray] = None,
                 eligible: Optional[np.ndarray] = None,
                 y0: Optional[np.ndarray] = None):
        self.columns = dict(columns)
        self.w = np.asarray(w, dtype=float)
        self.g = np.asarray(g, dtype=int)
        self.level_set = tuple(level_set)
        self.y1 = np.asarray(y1, dtype=float)
        self.y2 = np.asarray(y2, dtype=float)
        self.coords = coords
        self.clusters = clusters
        self.eligible = np.ones(len(self.w), dtype=bool) if eligible is None else eligible
        self.y0 = y0

    @classmethod
    def assemble(cls, pop: Population, exposure: ExposureAssignment,
                 adjacency: Optional[Adjacency] = None) -> "ModelData":
        """Resolve a population into named columns, adding neighbor means.

        Every attribute column ``c`` also gets a ``nbr(c)`` column (the
        row-normalized neighbor average) when an adjacency is supplied.
        """
        cols: dict[str, np.ndarray] = {}
        for k, name in enumerate(pop.z_names):
            cols[name] = pop.z[:, k]
        if adjacency is not None:
            for k, name in enumerate(pop.z_names):
                cols[f"nbr({name})"] = adjacency.neighbor_mean(pop.z[:, k])
        return cls(cols, pop.w, exposure.levels, exposure.level_set,
                   pop.y1, pop.y2, pop.coords, pop.cluster, exposure.eligible,
                   pop.y0)

    @property
    def n(self) -> int:
        return len(self.w)

    @property
    def dy(self) -> np.ndarray:
        return self.y2 - self.y1

    def restrict(self, mask) -> "ModelData":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ModelData(
            {k: v[idx] for k, v in self.columns.items()},
            self.w[idx], self.g[idx], self.level_set, self.y1[idx], self.y2[idx],
            self.coords[idx], None if self.clusters is None else self.clusters[idx],
            self.eligible[idx], None if self.y0 is None else self.y0[idx])

    # -- formula evaluation -------------------------------------------------

    def _factor(self, name: str, w, g) -> list[tuple[str, np.ndarray]]:
        if name == "w":
            return [("w", w)]
        if name == "g":
            gvec = np.full(self.n, g) if np.ndim(g) == 0 else np.asarray(g)
            out = [(f"g={lvl}", (gvec == lvl).astype(float)) for lvl in self.level_set[1:]]
            if not out:
                raise ConfigError("term 'g' needs at least two exposure levels")
            return out
        if name in self.columns:
            return [(name, self.columns[name])]
        raise ConfigError(f"unknown column {name!r}; available: {sorted(self.columns)}")

    def design(self, formula: Formula, w=None, g=None) -> tuple[np.ndarray, list[str]]:
        """(n, k) design matrix and column labels.

        ``w`` and ``g`` override the realized treatment / exposure (scalar or
        per-unit array) for counterfactual evaluation.
        """
        wvec = self.w if w is None else np.broadcast_to(np.asarray(w, dtype=float), (self.n,))
        gval = self.g if g is None else g
        cols = [np.ones(self.n)]
        labels = ["const"]
        for term in formula.terms:
            parts = term.split(":")
            expanded = self._factor(parts[0], wvec, gval)
            if len(parts) == 2:
                right = self._factor(parts[1], wvec, gval)
                expanded = [(f"{la}:{lb}", va * vb) for la, va in expanded for lb, vb in right]
            for label, vec in expanded:
                cols.append(np.asarray(vec, dtype=float))
                labels.append(label)
        return np.column_stack(cols), labels
