"""Finite-population data model: units, distance geometry, neighborhoods.

The population is treated as fully observed. Units carry coordinates in
R^d, a fixed attribute vector, a binary treatment, and two outcome periods.
Everything downstream (exposure mappings, nuisance fits, estimators,
inference) reads from this module's types and never mutates them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import DataValidationError, SchemaError

_METRIC_P = {"chebyshev": np.inf, "euclidean": 2}


@dataclass(frozen=True)
class ColumnSchema:
    """Maps file columns to population fields.

    ``coords`` and ``z`` list column names in order; ``cluster`` and ``y0``
    (an additional pre-period outcome, used by the placebo test) are optional.
    """

    id: str
    coords: tuple[str, ...]
    z: tuple[str, ...]
    w: str
    y1: str
    y2: str
    cluster: Optional[str] = None
    y0: Optional[str] = None

    def required_columns(self) -> tuple[str, ...]:
        cols = [self.id, *self.coords, *self.z, self.w, self.y1, self.y2]
        if self.cluster is not None:
            cols.append(self.cluster)
        if self.y0 is not None:
            cols.append(self.y0)
        return tuple(cols)


@dataclass(frozen=True)
class UnitRecord:
    id: str
    coords: np.ndarray
    z: np.ndarray
    w: int
    y1: float
    y2: float
    cluster: Optional[str] = None
    y0: Optional[float] = None


class Population:
    """Immutable collection of units with shared attribute layout.

    Parameters
    ----------
    ids : sequence of unit identifiers (must be unique).
    coords : (n, d) array of finite real coordinates.
    z : (n, k) array of fixed attributes.
    z_names : names for the k attribute columns.
    w : (n,) binary treatment indicators.
    y1, y2 : (n,) outcomes for the first and second period.
    cluster : optional (n,) cluster labels.
    y0 : optional (n,) extra pre-period outcomes (placebo pre-trends).
    metadata : free-form source description.
    """

    def __init__(self, ids, coords, z, z_names, w, y1, y2,
                 cluster=None, y0=None, metadata=""):
        self.ids = np.asarray(ids, dtype=object)
        self.coords = np.atleast_2d(np.asarray(coords, dtype=float))
        self.z = np.asarray(z, dtype=float)
        if self.z.ndim == 1:
            self.z = self.z.reshape(-1, 1)
        self.z_names = tuple(z_names)
        self.w = np.asarray(w, dtype=int)
        self.y1 = np.asarray(y1, dtype=float)
        self.y2 = np.asarray(y2, dtype=float)
        self.cluster = None if cluster is None else np.asarray(cluster, dtype=object)
        self.y0 = None if y0 is None else np.asarray(y0, dtype=float)
        self.metadata = metadata
        self._validate()
        for arr in (self.ids, self.coords, self.z, self.w, self.y1, self.y2):
            arr.setflags(write=False)

    def _validate(self) -> None:
        n = len(self.ids)
        if len(set(self.ids.tolist())) != n:
            raise DataValidationError("unit identifiers are not unique")
        if self.coords.shape[0] != n:
            raise DataValidationError("coords row count does not match unit count")
        if not np.all(np.isfinite(self.coords)):
            raise DataValidationError("coordinates contain non-finite values")
        if self.z.shape != (n, len(self.z_names)):
            raise DataValidationError(
                f"z has shape {self.z.shape}, expected ({n}, {len(self.z_names)})")
        if not np.all(np.isfinite(self.z)):
            raise DataValidationError("attributes contain non-finite values")
        bad = ~np.isin(self.w, (0, 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataValidationError(
                f"treatment must be 0/1; unit {self.ids[i]!r} has w={self.w[i]}")
        for name, y in (("y1", self.y1), ("y2", self.y2)):
            if y.shape != (n,) or not np.all(np.isfinite(y)):
                raise DataValidationError(f"outcome {name} missing or non-finite")
        if self.y0 is not None and (self.y0.shape != (n,) or not np.all(np.isfinite(self.y0))):
            raise DataValidationError("outcome y0 missing or non-finite")
        if self.cluster is not None and self.cluster.shape != (n,):
            raise DataValidationError("cluster labels do not match unit count")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @property
    def dy(self) -> np.ndarray:
        """Outcome difference y2 - y1."""
        return self.y2 - self.y1

    def unit(self, i: int) -> UnitRecord:
        return UnitRecord(
            id=self.ids[i], coords=self.coords[i], z=self.z[i], w=int(self.w[i]),
            y1=float(self.y1[i]), y2=float(self.y2[i]),
            cluster=None if self.cluster is None else self.cluster[i],
            y0=None if self.y0 is None else float(self.y0[i]))

    @property
    def units(self) -> list[UnitRecord]:
        return [self.unit(i) for i in range(self.n)]

    def subset(self, mask: np.ndarray) -> "Population":
        """Population restricted to ``mask`` (bool array or index array)."""
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Population(
            self.ids[idx], self.coords[idx], self.z[idx], self.z_names,
            self.w[idx], self.y1[idx], self.y2[idx],
            None if self.cluster is None else self.cluster[idx],
            None if self.y0 is None else self.y0[idx],
            metadata=self.metadata)

    def with_outcomes(self, y1, y2) -> "Population":
        """Copy with replaced outcome periods (placebo pre-trend runs)."""
        return Population(self.ids, self.coords, self.z, self.z_names, self.w,
                          y1, y2, self.cluster, None, metadata=self.metadata)


def distance(a: int, b: int, pop: Population, metric: str = "chebyshev") -> float:
    """Distance between units ``a`` and ``b``.

    Default metric is the max-coordinate (Chebyshev) distance; Euclidean is
    available as an opt-in.
    """
    n = pop.n
    if not (0 <= a < n and 0 <= b < n):
        raise IndexError(f"unit index out of range (n={n}): {a}, {b}")
    diff = np.abs(pop.coords[a] - pop.coords[b])
    if metric == "chebyshev":
        return float(diff.max())
    if metric == "euclidean":
        return float(np.sqrt((diff ** 2).sum()))
    raise ValueError(f"unknown metric {metric!r}")


def pairwise_distances(coords: np.ndarray, metric: str = "chebyshev") -> np.ndarray:
    """Dense (n, n) matrix of pairwise distances."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    diff = np.abs(coords[:, None, :] - coords[None, :, :])
    if metric == "chebyshev":
        return diff.max(axis=2)
    if metric == "euclidean":
        return np.sqrt((diff ** 2).sum(axis=2))
    raise ValueError(f"unknown metric {metric!r}")


class Adjacency:
    """Distance-threshold neighborhood structure.

    ``pairs`` is the symmetric 0/1 contiguity matrix with zero diagonal:
    pairs(i, j) = 1 iff 0 < rho(i, j) <= cutoff. When ``row_normalize`` is
    set, ``weights`` holds pairs with each nonempty row scaled to sum to one.
    """

    def __init__(self, pairs: sp.csr_matrix, cutoff: float, metric: str,
                 row_normalized: bool):
        self.pairs = pairs
        self.cutoff = float(cutoff)
        self.metric = metric
        self.row_normalized = row_normalized
        self.degrees = np.asarray(pairs.sum(axis=1)).ravel().astype(int)
        if row_normalized:
            scale = np.zeros(pairs.shape[0])
            nz = self.degrees > 0
            scale[nz] = 1.0 / self.degrees[nz]
            self.weights = sp.diags(scale) @ pairs
            self.weights = self.weights.tocsr()
        else:
            self.weights = None

    @property
    def n(self) -> int:
        return self.pairs.shape[0]

    def has_neighbors(self) -> np.ndarray:
        return self.degrees > 0

    def neighbor_mean(self, values: np.ndarray) -> np.ndarray:
        """Row-normalized average of ``values`` over each unit's neighbors.

        Units without neighbors get 0.
        """
        values = np.asarray(values, dtype=float)
        sums = self.pairs @ values
        out = np.zeros_like(sums)
        nz = self.degrees > 0
        out[nz] = sums[nz] / self.degrees[nz]
        return out

    def matvec(self, values: np.ndarray) -> np.ndarray:
        """A @ values with the row-normalized weights when available."""
        mat = self.weights if self.row_normalized else self.pairs
        return mat @ np.asarray(values, dtype=float)

    def to_edge_list(self) -> list[tuple[int, int, float]]:
        """(i, j, weight) triples for debugging or export."""
        mat = (self.weights if self.row_normalized else self.pairs).tocoo()
        return [(int(i), int(j), float(v)) for i, j, v in zip(mat.row, mat.col, mat.data)]


def build_adjacency(pop: Population, cutoff: float, row_normalize: bool = False,
                    metric: str = "chebyshev") -> Adjacency:
    """Neighborhood structure with units linked iff 0 < rho(i, j) <= cutoff."""
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    n = pop.n
    if cutoff == 0 or n < 2:
        pairs = sp.csr_matrix((n, n))
        return Adjacency(pairs, cutoff, metric, row_normalize)
    tree = cKDTree(pop.coords)
    idx = tree.query_pairs(cutoff, p=_METRIC_P[metric], output_type="ndarray")
    if len(idx) == 0:
        pairs = sp.csr_matrix((n, n))
    else:
        rows = np.concatenate([idx[:, 0], idx[:, 1]])
        cols = np.concatenate([idx[:, 1], idx[:, 0]])
        pairs = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return Adjacency(pairs, cutoff, metric, row_normalize)


def load_population(path, schema: ColumnSchema, delimiter: str = ",",
                    metadata: str = "") -> Population:
    """Read a delimited text file with a header row into a Population.

    Errors carry the data row (1-based, excluding the header) and column name.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in schema.required_columns() if c not in header]
        if missing:
            raise SchemaError(f"missing column(s) {missing} in {path.name}; "
                              f"header has {header}")
        rows = list(reader)
    if not rows:
        raise DataValidationError(f"{path.name} has no data rows")

    def parse(row, rownum, col):
        try:
            return float(row[col])
        except (TypeError, ValueError):
            raise DataValidationError(
                f"row {rownum}, column {col!r}: cannot parse {row[col]!r} as a number")

    ids, coords, z, w, y1, y2 = [], [], [], [], [], []
    cluster = [] if schema.cluster else None
    y0 = [] if schema.y0 else None
    for rownum, row in enumerate(rows, start=1):
        ids.append(row[schema.id])
        coords.append([parse(row, rownum, c) for c in schema.coords])
        z.append([parse(row, rownum, c) for c in schema.z])
        wval = parse(row, rownum, schema.w)
        if wval not in (0.0, 1.0):
            raise DataValidationError(
                f"row {rownum}, column {schema.w!r}: treatment must be 0/1, got {row[schema.w]!r}")
        w.append(int(wval))
        y1.append(parse(row, rownum, schema.y1))
        y2.append(parse(row, rownum, schema.y2))
        if cluster is not None:
            cluster.append(row[schema.cluster])
        if y0 is not None:
            y0.append(parse(row, rownum, schema.y0))
    return Population(ids, coords, z, schema.z, w, y1, y2, cluster, y0,
                      metadata=metadata or str(path))


def save_population(pop: Population, path, schema: Optional[ColumnSchema] = None,
                    delimiter: str = ",") -> ColumnSchema:
    """Write a Population back to delimited text; returns the schema used.

    Round-trips with :func:`load_population` (floats written with repr
    precision).
    """
    if schema is None:
        schema = ColumnSchema(
            id="id",
            coords=tuple(f"x{k + 1}" for k in range(pop.d)),
            z=pop.z_names,
            w="w", y1="y1", y2="y2",
            cluster=None if pop.cluster is None else "cluster",
            y0=None if pop.y0 is None else "y0")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(schema.required_columns())
        for i in range(pop.n):
            row = [pop.ids[i]]
            row += [repr(float(v)) for v in pop.coords[i]]
            row += [repr(float(v)) for v in pop.z[i]]
            row += [int(pop.w[i]), repr(float(pop.y1[i])), repr(float(pop.y2[i]))]
            if schema.cluster is not None:
                row.append(pop.cluster[i])
            if schema.y0 is not None:
                row.append(repr(float(pop.y0[i])))
            writer.writerow(row)
    return schema
