"""Area-level point estimators.

Direct sample means, the nested-error (BHF) EBLUP fitted by maximum
likelihood, the calibrated MERF estimator using aggregate covariate means,
the MERF estimator using unit-level population covariates, and a smearing
variant with an area distribution function and quantiles.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .calibration import CalibrationResult
from .data import AggregateTable, PopulationDataset, SurveyDataset


class EstimatorTag(str, enum.Enum):
    DIRECT = "Direct"
    BHF = "BHF"
    MERF_IND = "MerfInd"
    MERF_AGG = "MerfAgg"
    MERF_AGG_SMEAR = "MerfAggSmear"


@dataclass(frozen=True)
class AreaEstimate:
    area_id: object
    estimator: EstimatorTag
    value: float
    provenance: CalibrationResult | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"non-finite {self.estimator.value} estimate "
                                     f"for area {self.area_id!r}")


# -- direct -------------------------------------------------------------------

def estimate_direct(survey: SurveyDataset, area_id) -> AreaEstimate:
    rows = survey.area_rows(area_id)
    return AreaEstimate(area_id, EstimatorTag.DIRECT, float(np.mean(survey.y[rows])))


# -- BHF ----------------------------------------------------------------------

@dataclass(frozen=True)
class BhfFit:
    """Nested-error regression fit.

    ``beta[0]`` is the intercept. ``resid_means`` holds
    ``ybar_i - xbar_i' beta`` for each sampled area, aligned with ``areas``.
    """

    beta: np.ndarray
    sigma2_u: float
    sigma2_e: float
    areas: tuple
    sizes: np.ndarray
    resid_means: np.ndarray
    loglik: float

    def gamma(self) -> np.ndarray:
        if self.sigma2_u == 0.0:
            return np.zeros(len(self.sizes))
        return self.sigma2_u / (self.sigma2_u + self.sigma2_e / self.sizes)

    def predict_area(self, area_id, xbar_pop) -> float:
        synthetic = float(self.beta[0] + np.dot(xbar_pop, self.beta[1:]))
        try:
            k = self.areas.index(area_id)
        except ValueError:
            return synthetic
        return synthetic + float(self.gamma()[k] * self.resid_means[k])


def _profile(psi, Z, y, codes, n_i):
    """GLS fit for a fixed ratio psi = s2u / s2e via the Fuller-Battese transform."""
    alpha = 1.0 - np.sqrt(1.0 / (1.0 + n_i * psi))
    zbar = np.zeros((len(n_i), Z.shape[1]))
    np.add.at(zbar, codes, Z)
    zbar /= n_i[:, None]
    ybar = np.bincount(codes, weights=y) / n_i
    a = alpha[codes]
    Zt = Z - a[:, None] * zbar[codes]
    yt = y - a * ybar[codes]
    beta, *_ = np.linalg.lstsq(Zt, yt, rcond=None)
    r = yt - Zt @ beta
    return beta, float(r @ r)


def fit_bhf(survey: SurveyDataset, sigma2_u: float | None = None) -> BhfFit:
    """Fit ``y = b0 + x'b + u_i + e`` by maximum likelihood.

    The likelihood is profiled over ``psi = sigma2_u / sigma2_e``; ``psi``
    is located by a log-scale grid refined with a bounded Brent search.
    Passing ``sigma2_u`` fixes that component instead (``0`` gives OLS).
    """
    n, p = survey.n, survey.p
    if survey.n_areas < 2:
        raise ValueError("BHF needs at least two areas")
    if n < p + 2:
        raise ValueError(f"BHF needs at least p + 2 = {p + 2} rows, got {n}")
    Z = np.column_stack([np.ones(n), survey.X])
    if np.linalg.matrix_rank(Z) < p + 1:
        raise np.linalg.LinAlgError("rank-deficient design matrix")
    y, codes = survey.y, survey.codes
    n_i = survey.sizes.astype(np.float64)
    scale = float(np.var(y)) or 1.0

    def nll(psi):
        _, rss = _profile(psi, Z, y, codes, n_i)
        s2e = max(rss / n, 1e-300 * scale)
        return 0.5 * n * np.log(s2e) + 0.5 * float(np.sum(np.log1p(n_i * psi)))

    if sigma2_u is not None:
        if sigma2_u < 0:
            raise ValueError("sigma2_u must be nonnegative")
        beta, rss = _profile(0.0, Z, y, codes, n_i)
        s2e = rss / n
        psi = sigma2_u / s2e if s2e > 0 else 0.0
        if psi > 0:
            beta, rss = _profile(psi, Z, y, codes, n_i)
            s2e = rss / n
            psi = sigma2_u / s2e if s2e > 0 else 0.0
        s2u = float(sigma2_u)
    else:
        beta, rss = _profile(0.0, Z, y, codes, n_i)
        if rss <= 1e-24 * scale * n:
            # exact linear fit: no error variance left to apportion
            psi, s2u, s2e = 0.0, 0.0, 0.0
        else:
            grid = np.concatenate([[0.0], np.exp(np.linspace(-15.0, 12.0, 55))])
            values = np.array([nll(g) for g in grid])
            k = int(np.argmin(values))
            lo = grid[max(k - 1, 0)]
            hi = grid[min(k + 1, len(grid) - 1)]
            res = minimize_scalar(nll, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10 * max(hi, 1e-12)})
            psi = float(res.x) if res.fun <= values[k] else float(grid[k])
            beta, rss = _profile(psi, Z, y, codes, n_i)
            s2e = rss / n
            s2u = psi * s2e
    xbar = np.zeros((survey.n_areas, p))
    np.add.at(xbar, codes, survey.X)
    xbar /= n_i[:, None]
    ybar = np.bincount(codes, weights=y) / n_i
    resid_means = ybar - beta[0] - xbar @ beta[1:]
    ll = -nll(psi) if s2e > 0 else np.inf
    return BhfFit(beta, float(s2u), float(s2e), survey.areas, n_i, resid_means, ll)


def estimate_bhf(survey: SurveyDataset, aggregates: AggregateTable, area_id,
                 fit: BhfFit | None = None) -> AreaEstimate:
    """``xbar_pop' beta + gamma_i (ybar_i - xbar_i' beta)``; synthetic part only
    for areas without sample data."""
    fit = fit or fit_bhf(survey)
    value = fit.predict_area(area_id, aggregates.mean(area_id))
    return AreaEstimate(area_id, EstimatorTag.BHF, value)


# -- MERF ---------------------------------------------------------------------

def _check_calibration(calib, area_id):
    if calib is None:
        raise KeyError(f"no calibration weights for area {area_id!r}")
    if calib.area_id != area_id:
        raise ValueError(f"calibration is for area {calib.area_id!r}, not {area_id!r}")


def estimation_weights(calib: CalibrationResult, include_augmented: bool):
    """Weights and survey rows entering the weighted sum."""
    if include_augmented or calib.n_own == 0 or not calib.augmented:
        return calib.weights, calib.rows
    w = calib.weights[:calib.n_own]
    return w / w.sum(), calib.rows[:calib.n_own]


def merf_agg_value(fitted, calib: CalibrationResult, include_augmented: bool = True) -> float:
    """``sum_j w_j (f(x_j) + u_i)`` with in-sample forest predictions."""
    w, rows = estimation_weights(calib, include_augmented)
    return float(np.dot(w, fitted.fitted_values[rows]) + fitted.effect(calib.area_id))


def estimate_merf_agg(fitted, calib: CalibrationResult, survey: SurveyDataset, area_id,
                      include_augmented: bool = True) -> AreaEstimate:
    """Calibrated MERF area mean.

    Out-of-sample areas carry a zero random effect and predictions at the
    donor rows recorded in ``calib``.
    """
    _check_calibration(calib, area_id)
    return AreaEstimate(area_id, EstimatorTag.MERF_AGG,
                        merf_agg_value(fitted, calib, include_augmented), calib)


def estimate_merf_ind(fitted, population: PopulationDataset, area_id) -> AreaEstimate:
    """Mean forest prediction over the area's population units plus ``u_i``."""
    if population is None:
        raise ValueError("unit-level population covariates are required")
    rows = population.area_rows(area_id)
    value = float(np.mean(fitted.predict_fixed(population.X[rows]))) + fitted.effect(area_id)
    return AreaEstimate(area_id, EstimatorTag.MERF_IND, value)


def merf_ind_all(fitted, population: PopulationDataset, area_ids) -> dict:
    """MERFind for many areas with a single forest pass over the population."""
    pred = fitted.predict_fixed(population.X)
    areas, codes = np.unique(population.area, return_inverse=True)
    means = np.bincount(codes, weights=pred) / np.bincount(codes)
    lookup = {(a.item() if hasattr(a, "item") else a): m for a, m in zip(areas, means)}
    out = {}
    for a in area_ids:
        if a not in lookup:
            raise KeyError(f"no population units for area {a!r}")
        out[a] = AreaEstimate(a, EstimatorTag.MERF_IND, float(lookup[a]) + fitted.effect(a))
    return out


# -- smearing -----------------------------------------------------------------

def _smear_draws(fitted, calib: CalibrationResult, R: int, seed: int) -> np.ndarray:
    """``(len(calib.rows), R)`` residuals drawn from the pooled OOB residuals."""
    if R < 1:
        raise ValueError("R must be >= 1")
    pool = fitted.oob_residuals
    if len(pool) == 0:
        raise ValueError("empty residual pool")
    key = zlib.crc32(str(calib.area_id).encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), key]))
    return pool[rng.integers(0, len(pool), size=(len(calib.rows), R))]


def estimate_merf_agg_smear(fitted, calib: CalibrationResult, survey: SurveyDataset,
                            area_id, R: int = 200, seed: int = 0) -> AreaEstimate:
    """Weighted mean of predictions averaged over ``R`` smeared residuals per row."""
    _check_calibration(calib, area_id)
    draws = _smear_draws(fitted, calib, R, seed)
    base = fitted.fitted_values[calib.rows] + fitted.effect(area_id)
    value = float(np.dot(calib.weights, base + draws.mean(axis=1)))
    return AreaEstimate(area_id, EstimatorTag.MERF_AGG_SMEAR, value, calib)


class AreaDistribution:
    """Discrete area distribution: sampled responses plus smeared predictions.

    Each sampled response carries mass ``1/N_i``; each smeared prediction
    for calibration row j carries ``(N_i - n_i) w_j / (R N_i)``, so the
    total mass is one.
    """

    def __init__(self, atoms, masses):
        order = np.argsort(atoms, kind="stable")
        self.atoms = np.asarray(atoms, dtype=np.float64)[order]
        self.masses = np.asarray(masses, dtype=np.float64)[order]
        self._cum = np.cumsum(self.masses)

    def cdf(self, t) -> np.ndarray | float:
        k = np.searchsorted(self.atoms, t, side="right")
        cum = np.concatenate([[0.0], self._cum])
        out = np.minimum(cum[k], 1.0)
        return float(out) if np.ndim(t) == 0 else out

    def quantile(self, phi) -> float:
        """Smallest atom t with F(t) >= phi."""
        if not 0.0 < phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")
        k = int(np.searchsorted(self._cum, phi - 1e-12 * self._cum[-1], side="left"))
        return float(self.atoms[min(k, len(self.atoms) - 1)])

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.masses))


def area_distribution(fitted, calib: CalibrationResult, survey: SurveyDataset,
                      aggregates: AggregateTable, area_id, R: int = 200,
                      seed: int = 0) -> AreaDistribution:
    _check_calibration(calib, area_id)
    N = aggregates.size(area_id)
    own = survey.rows.get(area_id, np.zeros(0, dtype=np.int64))
    n = len(own)
    if N < n:
        raise ValueError(f"area {area_id!r}: N={N} < n={n}")
    draws = _smear_draws(fitted, calib, R, seed)
    smeared = fitted.fitted_values[calib.rows][:, None] + fitted.effect(area_id) + draws
    mass = (N - n) * calib.weights / (R * N)
    atoms = np.concatenate([survey.y[own], smeared.ravel()])
    masses = np.concatenate([np.full(n, 1.0 / N), np.repeat(mass, R)])
    return AreaDistribution(atoms, masses)


def estimate_area_cdf(fitted, calib, survey, aggregates, area_id, t, R=200, seed=0):
    return area_distribution(fitted, calib, survey, aggregates, area_id, R, seed).cdf(t)


def estimate_area_quantile(fitted, calib, survey, aggregates, area_id, phi, R=200, seed=0):
    if not 0.0 < phi < 1.0:
        raise ValueError("phi must lie in (0, 1)")
    return area_distribution(fitted, calib, survey, aggregates, area_id, R, seed).quantile(phi)
