"""Model-based simulation: synthetic populations, stratified samples, metrics.

Four data-generating scenarios share a population of 50 areas with 1000
units each. Every replicate draws a fresh population, takes a stratified
simple random sample with a fixed per-area plan, runs the requested
estimators and records estimates against the true area means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bootstrap import BootstrapConfig, run_bootstrap
from .calibration import ElConfig, calibrate_all
from .data import PopulationDataset, SurveyDataset
from .estimators import estimate_direct, fit_bhf, merf_agg_value, merf_ind_all
from .forest import ForestConfig
from .merf import MerfConfig, fit_merf

logger = logging.getLogger(__name__)

# Per-area sample sizes: min 5, max 50, median 21, total 1229.
SAMPLE_SIZE_PLAN = (
    9, 48, 42, 9, 12, 34, 26, 12, 39, 10, 21, 35, 5, 12, 39, 49, 18, 28, 50, 21,
    36, 45, 42, 7, 21, 13, 46, 9, 7, 41, 19, 30, 43, 21, 49, 22, 10, 19, 21, 25,
    27, 28, 11, 9, 7, 14, 12, 46, 20, 10,
)

SCENARIOS = ("normal", "pareto", "interaction", "logscale")
ESTIMATORS = ("Direct", "BHF", "MerfInd", "MerfAgg", "Oracle")

# scenario: (sd x1, sd x2, mu half-width, sd v, sd e)
_PARAMS = {
    "normal": (3.0, 3.0, 1.0, 500.0, 1000.0),
    "pareto": (3.0, 3.0, 1.0, 500.0, None),
    "interaction": (2.0, 1.0, 7.0, 500.0, 1000.0),
    "logscale": (1.0, 1.0, 3.0, 0.15, 0.25),
}
PARETO_SHAPE = 3.0
PARETO_SCALE = 800.0


def scenario_response(name, x1, x2, v, e):
    """Response of scenario ``name`` given covariates, area effect and error."""
    if name in ("normal", "pareto"):
        return 5000.0 - 500.0 * x1 - 500.0 * x2 + v + e
    if name == "interaction":
        return 1000.0 + 100.0 * x1 * x2 + 75.0 * x2 + v + e
    if name == "logscale":
        return np.exp(7.5 - 0.25 * x1 - 0.25 * x2 + v + e)
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def centred_pareto(rng, size, shape=PARETO_SHAPE, scale=PARETO_SCALE):
    """Pareto type I draws minus their mean ``shape * scale / (shape - 1)``."""
    return (rng.pareto(shape, size) + 1.0) * scale - shape * scale / (shape - 1.0)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "normal"
    D: int = 50
    N_i: int = 1000
    M: int = 50
    sample_size_plan: tuple = SAMPLE_SIZE_PLAN
    seed: int = 0

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; choose from {SCENARIOS}")
        if len(self.sample_size_plan) != self.D:
            raise ValueError("sample_size_plan must have one entry per area")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if min(self.sample_size_plan) < 1 or max(self.sample_size_plan) > self.N_i:
            raise ValueError("planned sample sizes must lie in [1, N_i]")

    @property
    def N(self) -> int:
        return self.D * self.N_i

    @property
    def areas(self) -> tuple:
        return tuple(range(1, self.D + 1))


@dataclass(frozen=True)
class Population:
    units: PopulationDataset
    y: np.ndarray
    true_means: np.ndarray


def replicate_seed(spec: ScenarioSpec, m: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(spec.seed), SCENARIOS.index(spec.name), int(m), stream])


def generate_population(spec: ScenarioSpec, m: int, rng=None) -> Population:
    """Draw the finite population for replicate ``m``."""
    rng = rng or np.random.default_rng(replicate_seed(spec, m, 0))
    sd1, sd2, half, sd_v, sd_e = _PARAMS[spec.name]
    D, N_i = spec.D, spec.N_i
    area = np.repeat(np.arange(1, D + 1), N_i)
    mu1 = rng.uniform(-half, half, D)
    mu2 = rng.uniform(-half, half, D)
    v = rng.normal(0.0, sd_v, D)
    x1 = rng.normal(np.repeat(mu1, N_i), sd1)
    x2 = rng.normal(np.repeat(mu2, N_i), sd2)
    e = centred_pareto(rng, D * N_i) if sd_e is None else rng.normal(0.0, sd_e, D * N_i)
    y = scenario_response(spec.name, x1, x2, np.repeat(v, N_i), e)
    true_means = y.reshape(D, N_i).mean(axis=1)
    return Population(PopulationDataset(area, np.column_stack([x1, x2])), y, true_means)


def draw_sample(population: Population, sample_size_plan, rng) -> SurveyDataset:
    """Stratified simple random sample without replacement, areas as strata."""
    units = population.units
    areas = np.unique(units.area)
    if len(areas) != len(sample_size_plan):
        raise ValueError(f"plan has {len(sample_size_plan)} entries for {len(areas)} areas")
    picked = []
    for a, n in zip(areas, sample_size_plan):
        rows = np.flatnonzero(units.area == a)
        if n > len(rows):
            raise ValueError(f"area {a}: sample size {n} exceeds population {len(rows)}")
        picked.append(np.sort(rng.choice(rows, size=int(n), replace=False)))
    idx = np.concatenate(picked)
    return SurveyDataset(units.area[idx], population.y[idx], units.X[idx])


def simulation_merf_config(num_trees: int = 500) -> MerfConfig:
    return MerfConfig(forest=ForestConfig(num_trees=num_trees, split_candidates=1))


@dataclass
class StudyResult:
    """Raw replicate output: ``estimates[tag]`` and ``truth`` are (M, D)."""

    spec: ScenarioSpec
    truth: np.ndarray
    estimates: dict
    mse_estimates: np.ndarray | None = None
    provenance: list = field(default_factory=list)

    def metrics(self) -> "MetricsTable":
        return MetricsTable.from_result(self)


def _run_replicate(spec, m, estimators, merf_config, el_config, bootstrap):
    pop = generate_population(spec, m)
    sample = draw_sample(pop, spec.sample_size_plan,
                         np.random.default_rng(replicate_seed(spec, m, 1)))
    aggregates = pop.units.aggregate(spec.areas)
    areas = spec.areas
    out = {}
    mse = None
    labels = {}
    if "Oracle" in estimators:
        out["Oracle"] = pop.true_means.copy()
    if "Direct" in estimators:
        out["Direct"] = np.array([estimate_direct(sample, a).value for a in areas])
    if "BHF" in estimators:
        bhf = fit_bhf(sample)
        out["BHF"] = np.array([bhf.predict_area(a, aggregates.mean(a)) for a in areas])
    if "MerfAgg" in estimators or "MerfInd" in estimators:
        seed = int(replicate_seed(spec, m, 2).generate_state(1, np.uint64)[0])
        cfg = replace(merf_config, forest=replace(merf_config.forest, seed=seed))
        fitted = fit_merf(sample, cfg)
        if "MerfInd" in estimators:
            ind = merf_ind_all(fitted, pop.units, areas)
            out["MerfInd"] = np.array([ind[a].value for a in areas])
        if "MerfAgg" in estimators:
            calib = calibrate_all(sample, aggregates, fitted.importance_ranking(), el_config)
            labels = {a: c.label for a, c in calib.items()}
            include = el_config.augmented_rows_in_estimate
            out["MerfAgg"] = np.array([merf_agg_value(fitted, calib[a], include)
                                       for a in areas])
            if bootstrap is not None:
                bcfg = replace(bootstrap, seed=int(
                    replicate_seed(spec, m, 3).generate_state(1, np.uint64)[0]))
                report = run_bootstrap(fitted, calib, sample, aggregates, bcfg, cfg,
                                       include_augmented=include)
                mse = report.mse
    return pop.true_means, out, mse, labels


def run_study(spec: ScenarioSpec, estimators=("Direct", "BHF", "MerfAgg"),
              merf_config: MerfConfig | None = None, el_config: ElConfig | None = None,
              bootstrap: BootstrapConfig | None = None, n_jobs: int = 1) -> StudyResult:
    """Run ``spec.M`` replicates and collect estimates against the truth.

    Any estimator failure aborts the study with the replicate number.
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}; choose from {ESTIMATORS}")
    if bootstrap is not None and "MerfAgg" not in estimators:
        raise ValueError("bootstrap MSE needs the MerfAgg estimator")
    merf_config = merf_config or simulation_merf_config()
    el_config = el_config or ElConfig()

    def one(m):
        try:
            return _run_replicate(spec, m, estimators, merf_config, el_config, bootstrap)
        except Exception as exc:
            raise RuntimeError(f"{spec.name} replicate {m}: {exc}") from exc

    if n_jobs == 1:
        results = []
        for m in range(spec.M):
            results.append(one(m))
            logger.info("%s: replicate %d/%d done", spec.name, m + 1, spec.M)
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(one)(m) for m in range(spec.M))

    truth = np.stack([r[0] for r in results])
    est = {tag: np.stack([r[1][tag] for r in results]) for tag in estimators}
    mse = np.stack([r[2] for r in results]) if bootstrap is not None else None
    return StudyResult(spec, truth, est, mse, [r[3] for r in results])


# -- metrics ------------------------------------------------------------------

def point_metrics(est, truth):
    """Per-area RMSE, RB and RRMSE over replicates (rows)."""
    err = np.asarray(est) - np.asarray(truth)
    rel = err / truth
    return (np.sqrt(np.mean(err ** 2, axis=0)), np.mean(rel, axis=0),
            np.sqrt(np.mean(rel ** 2, axis=0)))


def mse_metrics(mse_est, rmse_empirical):
    """Per-area RB-RMSE and RRMSE-RMSE of bootstrap MSE estimates."""
    mse_est = np.asarray(mse_est)
    rb = (np.sqrt(np.mean(mse_est, axis=0)) - rmse_empirical) / rmse_empirical
    rr = np.sqrt(np.mean((np.sqrt(mse_est) - rmse_empirical) ** 2, axis=0)) / rmse_empirical
    return rb, rr


METRIC_COLUMNS = ("rmse", "rb", "rrmse", "rb_rmse", "rrmse_rmse")


@dataclass
class MetricsTable:
    """Per-area metrics per estimator; ``columns[tag][metric]`` is length D."""

    scenario: str
    areas: tuple
    columns: dict

    @classmethod
    def from_result(cls, result: StudyResult) -> "MetricsTable":
        cols = {}
        for tag, est in result.estimates.items():
            rmse, rb, rrmse = point_metrics(est, result.truth)
            cols[tag] = {"rmse": rmse, "rb": rb, "rrmse": rrmse}
        if result.mse_estimates is not None:
            rb, rr = mse_metrics(result.mse_estimates, cols["MerfAgg"]["rmse"])
            cols["MerfAgg"]["rb_rmse"] = rb
            cols["MerfAgg"]["rrmse_rmse"] = rr
        return cls(result.spec.name, result.spec.areas, cols)

    def median(self, tag, metric) -> float:
        return float(np.median(self.columns[tag][metric]))

    def mean(self, tag, metric) -> float:
        return float(np.mean(self.columns[tag][metric]))

    def rows(self):
        """Per-area rows: scenario, estimator, area_id and the metric columns."""
        for tag, cols in self.columns.items():
            for k, a in enumerate(self.areas):
                yield [self.scenario, tag, a] + [
                    cols[c][k] if c in cols else None for c in METRIC_COLUMNS]

    def summary_rows(self):
        """scenario, estimator, metric, median, mean."""
        for tag, cols in self.columns.items():
            for c in METRIC_COLUMNS:
                if c in cols:
                    yield [self.scenario, tag, c, self.median(tag, c), self.mean(tag, c)]


def export_csv(spec: ScenarioSpec, m: int, out_dir) -> tuple:
    """Write replicate ``m``'s sample and aggregates as ``survey.csv`` and
    ``aggregates.csv`` in the command-line input schemas."""
    import csv
    from pathlib import Path

    pop = generate_population(spec, m)
    sample = draw_sample(pop, spec.sample_size_plan,
                         np.random.default_rng(replicate_seed(spec, m, 1)))
    agg = pop.units.aggregate(spec.areas)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sample.covariate_names
    paths = (out / "survey.csv", out / "aggregates.csv")
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "y", *names])
        for a, y, x in zip(sample.area, sample.y, sample.X):
            w.writerow([a, repr(float(y)), *(repr(float(v)) for v in x)])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "N", *names])
        for a, N, mean in zip(agg.area, agg.N, agg.means):
            w.writerow([a, int(N), *(repr(float(v)) for v in mean)])
    return paths
