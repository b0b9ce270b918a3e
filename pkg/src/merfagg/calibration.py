"""Empirical-likelihood calibration weights for area-level aggregates.

Weights maximise ``sum(log w_j)`` subject to ``sum(w_j) = 1``, ``w_j > 0``
and ``sum(w_j * (x_j - xbar_pop)) = 0``. They take the form
``w_j = 1 / (n (1 + lam' z_j))``, where ``lam`` solves the dual score
equation. When an area's constraints are infeasible, :func:`calibrate_area`
falls back along a fixed ladder: collinearity pruning, donor augmentation,
backward covariate reduction, and finally uniform weights.
"""

from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import AggregateTable, SurveyDataset

logger = logging.getLogger(__name__)


class ELInfeasible(ArithmeticError):
    """The zero vector is not interior to the hull of the centred rows,
    or the Newton solve could not reach the score tolerance."""


class Provenance(str, enum.Enum):
    FULL = "Full"
    COLLINEARITY_PRUNED = "CollinearityPruned"
    AUGMENTED = "Augmented"
    REDUCED = "Reduced"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class ElConfig:
    newton_tol: float = 1e-10
    max_newton_iter: int = 100
    min_covariates_floor: int = 3
    augmentation_count: int = 10
    collinearity_tol: float = 1e-8
    standardize_donor_distance: bool = False
    augmented_rows_in_estimate: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.newton_tol > 0 and self.collinearity_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_newton_iter < 1:
            raise ValueError("max_newton_iter must be >= 1")
        if self.min_covariates_floor < 1:
            raise ValueError("min_covariates_floor must be >= 1")
        if self.augmentation_count < 0:
            raise ValueError("augmentation_count must be >= 0")


@dataclass(frozen=True)
class CalibrationResult:
    """Calibration weights for one area.

    ``rows`` indexes the survey rows the weights apply to: the area's own
    sample first, then any rows borrowed from ``donor_area``.
    """

    area_id: object
    weights: np.ndarray
    lam: np.ndarray
    covariates_used: tuple
    provenance: Provenance
    rows: np.ndarray
    n_own: int
    donor_area: object = None
    attempts: tuple = field(default=(), compare=False)

    @property
    def label(self) -> str:
        if self.provenance is Provenance.REDUCED:
            return f"Reduced({len(self.covariates_used)})"
        return self.provenance.value

    @property
    def augmented(self) -> bool:
        return self.donor_area is not None


def solve_el_weights(x_area, target_mean, config: ElConfig | None = None):
    """Solve for EL calibration weights and the Lagrange multiplier.

    Parameters
    ----------
    x_area : array-like, shape (n, p)
    target_mean : array-like, shape (p,)
    config : ElConfig, optional

    Returns
    -------
    weights : ndarray, shape (n,)
        Positive and summing to one.
    lam : ndarray, shape (p,)
        Multiplier in the units of ``x_area``.

    Raises
    ------
    ELInfeasible
        If the constraints cannot be met.
    """
    config = config or ElConfig()
    x = np.asarray(x_area, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    target = np.asarray(target_mean, dtype=np.float64).ravel()
    n, p = x.shape
    if n == 0:
        raise ELInfeasible("no observations")
    if target.shape[0] != p:
        raise ValueError(f"target has {target.shape[0]} entries, x has {p} columns")
    if not (np.isfinite(x).all() and np.isfinite(target).all()):
        raise ValueError("missing or non-finite values")
    uniform = np.full(n, 1.0 / n)
    if p == 0:
        return uniform, np.zeros(0)
    z = x - target
    if not z.any():
        return uniform, np.zeros(p)
    if p == 1 and not (x[:, 0].min() < target[0] < x[:, 0].max()):
        raise ELInfeasible("target outside the open range of the sample")

    scale = np.sqrt(np.mean(z * z, axis=0))
    if (scale == 0).any():
        raise ELInfeasible("constraint column identically zero")
    zs = z / scale
    lower = 1e-12 / n
    lam = np.zeros(p)
    d = np.ones(n)
    objective = 0.0
    for _ in range(config.max_newton_iter):
        inv = 1.0 / d
        score = zs.T @ inv
        if np.max(np.abs(score)) <= config.newton_tol:
            # an unbounded dual also drives the score to zero; at a genuine
            # stationary point mean(1/d) = 1
            if abs(inv.mean() - 1.0) > 1e-6:
                raise ELInfeasible("dual unbounded: target outside the convex hull")
            break
        hess = (zs * (inv * inv)[:, None]).T @ zs
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise ELInfeasible("singular constraint matrix") from None
        if not np.isfinite(step).all():
            raise ELInfeasible("non-finite Newton step")
        # backtracking keeps 1 + lam'z > eps/n and decreases -sum(log d)
        t = 1.0
        slope = float(score @ step)
        # near the optimum the decrease sinks below rounding in sum(log d)
        noise = 1e-13 * (n + abs(objective))
        for _ in range(60):
            cand = lam + t * step
            d_new = 1.0 + zs @ cand
            if d_new.min() > lower:
                obj_new = -float(np.sum(np.log(d_new)))
                if obj_new <= objective - 1e-4 * t * slope + noise:
                    break
            t *= 0.5
        else:
            raise ELInfeasible("line search failed")
        lam, d, objective = cand, d_new, obj_new
    else:
        raise ELInfeasible(f"no convergence in {config.max_newton_iter} Newton steps")

    w = 1.0 / (n * d)
    w = w / w.sum()
    return w, lam / scale


def independent_columns(z, ranking, tol=1e-8) -> tuple:
    """Greedy maximal set of linearly independent columns of ``z``.

    Columns are visited in ``ranking`` order (most important first) and
    kept when they raise the numerical rank. Returned sorted ascending.
    """
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=0)
    kept = []
    for k in ranking:
        if norms[k] == 0:
            continue
        cand = kept + [k]
        zc = z[:, cand] / norms[cand]
        s = np.linalg.svd(zc, compute_uv=False)
        if s[-1] > tol * s[0] and len(s) == len(cand):
            kept = cand
    return tuple(sorted(kept))


def nearest_donor(area_id, survey: SurveyDataset, aggregates: AggregateTable,
                  standardize: bool = False):
    """Sampled area whose aggregate covariate means are closest to ``area_id``'s."""
    candidates = [a for a in aggregates.area if a != area_id and survey.n_i(a) > 0]
    if not candidates:
        raise ValueError(f"no donor area available for {area_id!r}")
    means = aggregates.means
    if standardize:
        sd = means.std(axis=0)
        sd[sd == 0] = 1.0
        means = means / sd
    target = means[aggregates.index(area_id)]
    dist = [float(np.sum((means[aggregates.index(a)] - target) ** 2)) for a in candidates]
    return candidates[int(np.argmin(dist))]


def area_seed(seed: int, area_id) -> np.random.Generator:
    key = zlib.crc32(str(area_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def calibrate_area(area_id, survey: SurveyDataset, aggregates: AggregateTable,
                   importance_ranking, config: ElConfig | None = None) -> CalibrationResult:
    """Calibration weights for one area, following the fallback ladder.

    Rungs, first success wins: (i) all covariates; (ii) drop perfectly
    collinear constraint columns; (iii) borrow ``augmentation_count`` rows
    (with replacement) from the nearest donor area; (iv) drop covariates
    from the least important upward, down to ``min_covariates_floor``;
    (v) uniform weights.
    """
    config = config or ElConfig()
    target = aggregates.mean(area_id)
    p = survey.p
    own = survey.rows.get(area_id, np.zeros(0, dtype=np.int64))
    ranking = list(importance_ranking)
    if sorted(ranking) != list(range(p)):
        raise ValueError("importance_ranking must be a permutation of the covariates")
    attempts = []

    def attempt(rows, cols, provenance, donor=None):
        attempts.append((provenance.value, tuple(cols), len(rows)))
        w, lam = solve_el_weights(survey.X[np.ix_(rows, cols)], target[list(cols)], config)
        return CalibrationResult(area_id, w, lam, tuple(cols), provenance, rows,
                                 len(own), donor, tuple(attempts))

    all_cols = tuple(range(p))
    if len(own):
        try:
            return attempt(own, all_cols, Provenance.FULL)
        except ELInfeasible:
            pass
        kept = independent_columns(survey.X[own] - target, ranking, config.collinearity_tol)
        if len(kept) < p:
            try:
                return attempt(own, kept, Provenance.COLLINEARITY_PRUNED)
            except ELInfeasible:
                pass

    rows, donor = own, None
    if config.augmentation_count > 0:
        donor = nearest_donor(area_id, survey, aggregates, config.standardize_donor_distance)
        rng = area_seed(config.seed, area_id)
        extra = rng.choice(survey.rows[donor], size=config.augmentation_count, replace=True)
        rows = np.concatenate([own, extra]).astype(np.int64)
        kept = independent_columns(survey.X[rows] - target, ranking, config.collinearity_tol)
        try:
            return attempt(rows, kept, Provenance.AUGMENTED, donor)
        except ELInfeasible:
            pass
    elif len(own) == 0:
        raise ValueError(f"area {area_id!r} is out of sample and augmentation is disabled")

    for k in range(p - 1, config.min_covariates_floor - 1, -1):
        cols = tuple(sorted(ranking[:k]))
        try:
            return attempt(rows, cols, Provenance.REDUCED, donor)
        except ELInfeasible:
            pass

    if len(own):
        rows, donor = own, None
    n = len(rows)
    logger.info("area %r: calibration failed on every rung; uniform weights", area_id)
    return CalibrationResult(area_id, np.full(n, 1.0 / n), np.zeros(0), (),
                             Provenance.UNIFORM, rows, len(own), donor, tuple(attempts))


def calibrate_all(survey: SurveyDataset, aggregates: AggregateTable, importance_ranking,
                  config: ElConfig | None = None) -> dict:
    """Calibrate every area of ``aggregates``, keyed by area id."""
    return {a: calibrate_area(a, survey, aggregates, importance_ranking, config)
            for a in aggregates.area}
