"""Non-parametric bootstrap MSE for calibrated MERF area means.

Residuals of the fitted model are split into area-level and unit-level
pools, centred and rescaled to their target variances, then resampled to
build pseudo-true area means and bootstrap survey responses. The model is
refitted on each bootstrap sample with the original calibration weights.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import AggregateTable, SurveyDataset
from .estimators import estimation_weights, merf_agg_value
from .merf import MerfConfig, fit_merf, shrinkage

logger = logging.getLogger(__name__)


def oob_level1_variance(level1: np.ndarray, fitted) -> float:
    """Default bias-corrected unit-level variance: population variance of the
    OOB level-1 residuals."""
    return float(np.var(level1))


def rescale_pool(values, target_variance: float, what: str = "pool") -> np.ndarray:
    """Centre ``values`` and rescale them to population variance ``target_variance``."""
    values = np.asarray(values, dtype=np.float64)
    centred = values - values.mean()
    sd = float(np.sqrt(np.mean(centred * centred)))
    if target_variance < 0:
        raise ValueError(f"{what}: negative target variance")
    if sd == 0.0:
        if target_variance == 0.0:
            return centred
        raise ValueError(f"{what}: residuals are constant, cannot rescale to "
                         f"variance {target_variance:g}")
    return centred * (np.sqrt(target_variance) / sd)


@dataclass(frozen=True)
class ResidualDecomposition:
    """Residual pools feeding the bootstrap.

    ``marginal`` is ``y - f_oob(x)`` per survey row, ``level2`` its area
    means (aligned with the survey's sorted areas) and ``level1`` the
    within-area deviations.
    """

    marginal: np.ndarray
    level2: np.ndarray
    level1: np.ndarray
    level1_scaled_centered: np.ndarray
    level2_scaled_centered: np.ndarray
    sigma2_bc_e: float


def decompose_residuals(fitted, survey: SurveyDataset,
                        sigma2_bc: Callable = oob_level1_variance) -> ResidualDecomposition:
    codes = survey.codes
    marginal = survey.y - fitted.oob_predictions
    level2 = np.bincount(codes, weights=marginal, minlength=survey.n_areas) / survey.sizes
    level1 = marginal - level2[codes]
    s2bc = float(sigma2_bc(level1, fitted))
    if not (np.isfinite(s2bc) and s2bc >= 0):
        raise ValueError(f"invalid bias-corrected variance {s2bc!r}")
    return ResidualDecomposition(
        marginal=marginal, level2=level2, level1=level1,
        level1_scaled_centered=rescale_pool(level1, s2bc, "level-1 residuals"),
        level2_scaled_centered=rescale_pool(level2, fitted.sigma2_u, "level-2 residuals"),
        sigma2_bc_e=s2bc)


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 200
    seed: int = 0
    refit_merf_per_replicate: bool = True
    n_jobs: int = 1
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")


@dataclass(frozen=True)
class MseReport:
    """Per-area bootstrap MSE, aligned with ``areas``.

    ``pseudo_true`` and ``replicates`` are ``(B, D)`` arrays; rows of
    failed replicates are NaN.
    """

    areas: tuple
    estimates: np.ndarray
    mse: np.ndarray
    pseudo_true: np.ndarray
    replicates: np.ndarray
    n_failed: int

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    @property
    def cv(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.estimates != 0, self.rmse / np.abs(self.estimates), np.nan)

    def as_dict(self) -> dict:
        return {a: (float(m), float(c)) for a, m, c in zip(self.areas, self.mse, self.cv)}


def _fixed_part(fitted, calib, include_augmented) -> float:
    w, rows = estimation_weights(calib, include_augmented)
    return float(np.dot(w, fitted.fitted_values[rows]))


def replicate_rng(seed: int, b: int, area_id) -> np.random.Generator:
    key = zlib.crc32(str(area_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b), key]))


def _replicate(b, fitted, calibrations, areas, survey, aggregates, decomp,
               fixed_part, config, merf_config, learner, include_augmented):
    """Pseudo-true means and refitted estimates for replicate ``b``."""
    level1 = decomp.level1_scaled_centered
    level2 = decomp.level2_scaled_centered
    y_b = np.empty(survey.n)
    truth = np.empty(len(areas))
    for k, a in enumerate(areas):
        rng = replicate_rng(config.seed, b, a)
        n = survey.n_i(a)
        N = aggregates.size(a)
        r_star = level1[rng.integers(0, len(level1), size=n)]
        e_draw = level1[rng.integers(0, len(level1))]
        u = float(level2[rng.integers(0, len(level2))])
        if N > n:
            # standardised draw times sd_bc / sqrt(N - n): mean of N - n unit errors
            e_bar = e_draw / np.sqrt(N - n)
            E = (n / N) * (r_star.mean() if n else 0.0) + ((N - n) / N) * e_bar
        else:
            E = r_star.mean()
        truth[k] = fixed_part[k] + u + E
        if n:
            rows = survey.rows[a]
            y_b[rows] = fitted.oob_predictions[rows] + u + r_star
    boot = survey.with_response(y_b)

    if config.refit_merf_per_replicate:
        cfg = replace(merf_config, forest=replace(
            merf_config.forest, seed=int(np.random.SeedSequence(
                [int(config.seed), int(b), 0x5EED]).generate_state(1, np.uint64)[0])))
        refit = fit_merf(boot, cfg, learner=learner)
        est = np.array([merf_agg_value(refit, calibrations[a], include_augmented)
                        for a in areas])
    else:
        # keep f-hat, re-predict the random effects only
        resid = y_b - fitted.oob_predictions
        rbar = np.bincount(boot.codes, weights=resid, minlength=boot.n_areas) / boot.sizes
        u_new = dict(zip(boot.areas, shrinkage(fitted.sigma2_u, fitted.sigma2_e, boot.sizes) * rbar))
        est = np.array([fixed_part[k] + u_new.get(a, 0.0) for k, a in enumerate(areas)])
    return truth, est


def run_bootstrap(fitted, calibrations: dict, survey: SurveyDataset,
                  aggregates: AggregateTable, config: BootstrapConfig | None = None,
                  merf_config: MerfConfig | None = None, learner=None,
                  sigma2_bc: Callable = oob_level1_variance,
                  include_augmented: bool = True) -> MseReport:
    """Bootstrap MSE of the calibrated MERF estimate for every calibrated area.

    Parameters
    ----------
    fitted : FittedMerf
    calibrations : dict
        Area id to CalibrationResult; the weights are reused unchanged in
        every replicate.
    survey, aggregates
    config : BootstrapConfig
    merf_config : MerfConfig
        Configuration of the per-replicate refit.
    learner : callable, optional
        Passed through to :func:`fit_merf`.
    sigma2_bc : callable
        ``sigma2_bc(level1, fitted)`` giving the unit-level variance the
        level-1 pool is scaled to.
    include_augmented : bool
        Whether donor rows of augmented areas enter the weighted sums.

    Raises
    ------
    RuntimeError
        If more than ``max_failure_rate`` of the replicates fail.
    """
    config = config or BootstrapConfig()
    merf_config = merf_config or MerfConfig()
    areas = tuple(calibrations)
    missing = [a for a in survey.areas if a not in calibrations]
    if missing:
        raise ValueError(f"no calibration for sampled areas {missing[:5]}")
    for a in areas:
        if aggregates.size(a) < survey.n_i(a):
            raise ValueError(f"area {a!r}: N < n")
    decomp = decompose_residuals(fitted, survey, sigma2_bc)
    estimates = np.array([merf_agg_value(fitted, calibrations[a], include_augmented)
                          for a in areas])
    fixed_part = np.array([_fixed_part(fitted, calibrations[a], include_augmented)
                           for a in areas])
    args = (fitted, calibrations, areas, survey, aggregates, decomp, fixed_part,
            config, merf_config, learner, include_augmented)

    if config.n_jobs == 1:
        results = [_safe_replicate(b, args) for b in range(config.B)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_safe_replicate)(b, args) for b in range(config.B))

    D = len(areas)
    truth = np.full((config.B, D), np.nan)
    reps = np.full((config.B, D), np.nan)
    failed = 0
    for b, res in enumerate(results):
        if res is None:
            failed += 1
            continue
        truth[b], reps[b] = res
    if failed > config.max_failure_rate * config.B:
        raise RuntimeError(f"{failed} of {config.B} bootstrap replicates failed")
    ok = ~np.isnan(truth[:, 0]) if D else np.zeros(0, bool)
    mse = np.mean((reps[ok] - truth[ok]) ** 2, axis=0)
    return MseReport(areas, estimates, mse, truth, reps, failed)


def _safe_replicate(b, args):
    try:
        return _replicate(b, *args)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
