"""Mixed effects random forest fit for a random-intercept model.

Alternates between growing a forest on responses net of the current area
effects and updating the area effects and variance components from the
forest's out-of-bag residuals, using EM updates for a scalar random
intercept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import SurveyDataset
from .forest import ForestConfig, fit_forest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MerfConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    max_iterations: int = 30
    convergence_tol: float = 1e-4
    variance_floor: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")


@dataclass(frozen=True)
class IterationRecord:
    sigma2_u: float
    sigma2_e: float
    criterion: float


@dataclass
class FittedMerf:
    """Result of :func:`fit_merf`.

    ``random_effects`` and ``gamma`` are aligned with ``areas`` (the
    survey's sorted area labels). ``oob_predictions`` and
    ``fitted_values`` are forest predictions for the survey rows.
    """

    forest: object
    areas: tuple
    random_effects: np.ndarray
    sigma2_u: float
    sigma2_e: float
    gamma: np.ndarray
    oob_predictions: np.ndarray
    codes: np.ndarray
    y: np.ndarray
    converged: bool
    iterations_used: int
    trajectory: list

    def __post_init__(self):
        self._effects = {a: float(u) for a, u in zip(self.areas, self.random_effects)}

    def effect(self, area_id) -> float:
        """Predicted random effect; zero for areas without sample data."""
        return self._effects.get(area_id, 0.0)

    @property
    def fitted_values(self) -> np.ndarray:
        return self.forest.fitted_values

    def predict_fixed(self, X) -> np.ndarray:
        return self.forest.predict(X)

    @property
    def oob_residuals(self) -> np.ndarray:
        """``y - f_oob(x) - u_i`` for every survey row."""
        return self.y - self.oob_predictions - self.random_effects[self.codes]

    def importance_ranking(self) -> list[int]:
        return self.forest.importance_ranking()


def shrinkage(sigma2_u, sigma2_e, n_i):
    """gamma_i = s2u / (s2u + s2e / n_i)."""
    n_i = np.asarray(n_i, dtype=np.float64)
    return sigma2_u / (sigma2_u + sigma2_e / n_i)


def convergence_criterion(resid, codes, u, sigma2_u, sigma2_e, floor=0.0) -> float:
    """Generalised log-likelihood of the current iterate.

    ``resid`` is ``y - f_oob(x)``. When ``sigma2_u`` sits at the floor the
    random-effect penalty and its log-determinant are dropped.
    """
    eps = resid - u[codes]
    n_i = np.bincount(codes, minlength=len(u))
    gll = float(np.dot(eps, eps) / sigma2_e + n_i.sum() * np.log(sigma2_e))
    if sigma2_u > floor:
        gll += float(np.dot(u, u) / sigma2_u + len(u) * np.log(sigma2_u))
    return gll


def relative_change(current: float, previous: float) -> float:
    if previous == current:
        return 0.0
    return abs(current - previous) / abs(previous)


def em_update(resid, codes, u, sigma2_u, sigma2_e):
    """One EM step for (sigma2_e, sigma2_u) given new effects ``u``."""
    D = len(u)
    n_i = np.bincount(codes, minlength=D).astype(np.float64)
    eps = resid - u[codes]
    sse_i = np.bincount(codes, weights=eps * eps, minlength=D)
    denom = sigma2_e + n_i * sigma2_u
    tr_vinv = (n_i - 1.0) / sigma2_e + 1.0 / denom
    s2e = float(np.sum(sse_i + sigma2_e * (n_i - sigma2_e * tr_vinv)) / n_i.sum())
    s2u = float(np.sum(u * u + sigma2_u * (1.0 - sigma2_u * n_i / denom)) / D)
    return s2u, s2e


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1, np.uint64)[0])


def fit_merf(survey: SurveyDataset, config: MerfConfig | None = None,
             learner: Callable | None = None, init: tuple | None = None) -> FittedMerf:
    """Fit y = f(x) + u_i + e by alternating forest and random-effect steps.

    Parameters
    ----------
    survey : SurveyDataset
    config : MerfConfig
    learner : callable, optional
        ``learner(X, y, seed)`` returning an object with ``oob_predictions``,
        ``fitted_values``, ``predict`` and ``importance_ranking``. Defaults
        to :func:`fit_forest` with ``config.forest``; test doubles plug in
        here.
    init : (sigma2_u, sigma2_e), optional
        Starting variance components; defaults to half the sample variance
        of y for both.
    """
    config = config or MerfConfig()
    if survey.n_areas < 2:
        raise ValueError("at least two areas are needed to identify sigma2_u")
    y = survey.y
    if not np.isfinite(y).all():
        raise ValueError("responses must be finite")
    codes = survey.codes
    D = survey.n_areas
    n_i = survey.sizes.astype(np.float64)
    floor = config.variance_floor

    if learner is None:
        def learner(X, target, seed):
            return fit_forest(X, target, replace(config.forest, seed=seed))

    if init is None:
        half = float(np.var(y, ddof=1)) / 2.0 if len(y) > 1 else 1.0
        s2u, s2e = max(half, floor), max(half, floor)
    else:
        s2u, s2e = float(init[0]), float(init[1])
    u = np.zeros(D)
    trajectory = []
    previous = None
    converged = False
    model = resid = None
    it = 0

    for it in range(1, config.max_iterations + 1):
        model = learner(survey.X, y - u[codes], iteration_seed(config.forest.seed, it))
        resid = y - model.oob_predictions
        rbar = np.bincount(codes, weights=resid, minlength=D) / n_i
        u = shrinkage(s2u, s2e, n_i) * rbar
        s2u, s2e = em_update(resid, codes, u, s2u, s2e)
        s2u = max(s2u, floor)
        if not (np.isfinite(s2u) and np.isfinite(s2e) and s2e > 0):
            raise FloatingPointError(f"variance components diverged at iteration {it}")
        crit = convergence_criterion(resid, codes, u, s2u, s2e, floor)
        trajectory.append(IterationRecord(s2u, s2e, crit))
        if previous is not None and relative_change(crit, previous) < config.convergence_tol:
            converged = True
            break
        previous = crit

    if not converged:
        logger.info("MERF stopped after %d iterations without converging", it)

    # final effects use the final variance components
    gamma = shrinkage(s2u, s2e, n_i)
    rbar = np.bincount(codes, weights=resid, minlength=D) / n_i
    u = gamma * rbar
    return FittedMerf(
        forest=model, areas=survey.areas, random_effects=u, sigma2_u=s2u,
        sigma2_e=s2e, gamma=gamma, oob_predictions=model.oob_predictions,
        codes=codes, y=y, converged=converged, iterations_used=it,
        trajectory=trajectory)
