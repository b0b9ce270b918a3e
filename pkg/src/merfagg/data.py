"""Survey, aggregate and population containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OutOfSampleError(KeyError):
    """Raised when an estimator needs sample data for an area that has none."""


@dataclass(frozen=True)
class SurveyDataset:
    """Unit-level survey records partitioned into areas.

    Parameters
    ----------
    area : array-like, shape (n,)
        Area label of each record.
    y : array-like, shape (n,)
        Response.
    X : array-like, shape (n, p)
        Covariates.
    covariate_names : sequence of str, optional
        Defaults to ``x1, ..., xp``.
    """

    area: np.ndarray
    y: np.ndarray
    X: np.ndarray
    covariate_names: tuple = ()
    areas: tuple = field(init=False)
    codes: np.ndarray = field(init=False, repr=False)
    rows: dict = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        area = np.asarray(self.area)
        if not (len(area) == len(y) == X.shape[0]):
            raise ValueError("area, y and X must have the same number of rows")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("covariate_names does not match the number of columns")
        areas, codes = np.unique(area, return_inverse=True)
        areas = tuple(a.item() if hasattr(a, "item") else a for a in areas)
        rows = {a: np.flatnonzero(codes == k) for k, a in enumerate(areas)}
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", np.ascontiguousarray(X))
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "codes", codes.astype(np.int64))
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.codes, minlength=self.n_areas)

    def n_i(self, area_id) -> int:
        rows = self.rows.get(area_id)
        return 0 if rows is None else len(rows)

    def area_rows(self, area_id) -> np.ndarray:
        if area_id not in self.rows:
            raise OutOfSampleError(area_id)
        return self.rows[area_id]

    def with_response(self, y) -> "SurveyDataset":
        return SurveyDataset(self.area, y, self.X, self.covariate_names)


@dataclass(frozen=True)
class AggregateTable:
    """Per-area population size and covariate means."""

    area: tuple
    N: np.ndarray
    means: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        N = np.asarray(self.N, dtype=np.int64).ravel()
        area = tuple(a.item() if hasattr(a, "item") else a for a in self.area)
        if not (len(area) == len(N) == means.shape[0]):
            raise ValueError("area, N and means must have the same length")
        if len(set(area)) != len(area):
            raise ValueError("duplicate area in aggregate table")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(means.shape[1]))
        if len(names) != means.shape[1]:
            raise ValueError("covariate_names does not match the number of columns")
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "_index", {a: k for k, a in enumerate(area)})

    def __contains__(self, area_id):
        return area_id in self._index

    def index(self, area_id) -> int:
        return self._index[area_id]

    def mean(self, area_id) -> np.ndarray:
        return self.means[self._index[area_id]]

    def size(self, area_id) -> int:
        return int(self.N[self._index[area_id]])

    def check_against(self, survey: SurveyDataset) -> None:
        """Validate covariate order and N_i >= n_i for every sampled area."""
        if tuple(survey.covariate_names) != tuple(self.covariate_names):
            raise ValueError(
                "covariate names differ between survey and aggregates: "
                f"{list(survey.covariate_names)} vs {list(self.covariate_names)}")
        for a in survey.areas:
            if a not in self:
                raise ValueError(f"survey area {a!r} missing from aggregates")
            if self.size(a) < survey.n_i(a):
                raise ValueError(f"area {a!r}: N={self.size(a)} < n={survey.n_i(a)}")

    def out_of_sample(self, survey: SurveyDataset) -> list:
        return [a for a in self.area if survey.n_i(a) == 0]


@dataclass(frozen=True)
class PopulationDataset:
    """Unit-level covariates for every population unit."""

    area: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        area = np.asarray(self.area)
        if len(area) != X.shape[0]:
            raise ValueError("area and X must have the same number of rows")
        object.__setattr__(self, "X", np.ascontiguousarray(X))
        object.__setattr__(self, "area", area)

    def area_rows(self, area_id) -> np.ndarray:
        rows = np.flatnonzero(self.area == area_id)
        if len(rows) == 0:
            raise KeyError(f"no population units for area {area_id!r}")
        return rows

    def aggregate(self, area_ids=None) -> AggregateTable:
        """Area sizes and covariate means, in ``area_ids`` order."""
        areas, codes = np.unique(self.area, return_inverse=True)
        N = np.bincount(codes)
        sums = np.zeros((len(areas), self.X.shape[1]))
        np.add.at(sums, codes, self.X)
        table = AggregateTable(tuple(areas), N, sums / N[:, None])
        if area_ids is None:
            return table
        idx = [table.index(a) for a in area_ids]
        return AggregateTable(tuple(area_ids), table.N[idx], table.means[idx])
