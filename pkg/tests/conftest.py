import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from merfagg.data import PopulationDataset, SurveyDataset
from merfagg.merf import FittedMerf, shrinkage
from merfagg.simulation import ScenarioSpec, draw_sample, generate_population, replicate_seed

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def scenario_draw(name="normal", seed=1, m=0):
    """Population and stratified sample of one seeded scenario replicate."""
    spec = ScenarioSpec(name, seed=seed)
    pop = generate_population(spec, m)
    sample = draw_sample(pop, spec.sample_size_plan,
                         np.random.default_rng(replicate_seed(spec, m, 1)))
    return spec, pop, sample


@pytest.fixture(scope="session")
def normal_draw():
    return scenario_draw("normal", seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_survey(sizes, p=2, seed=0, effect_sd=1.0, noise_sd=1.0, f=None):
    """Small synthetic survey: areas 0..D-1 with the given sample sizes."""
    g = np.random.default_rng(seed)
    area = np.repeat(np.arange(len(sizes)), sizes)
    X = g.normal(size=(len(area), p))
    u = g.normal(0.0, effect_sd, len(sizes))
    fx = X[:, 0] * 2.0 if f is None else f(X)
    y = fx + u[area] + g.normal(0.0, noise_sd, len(area))
    return SurveyDataset(area, y, X)


class StubModel:
    """Learner double that predicts a fixed function of X."""

    def __init__(self, X, f):
        self.oob_predictions = f(X)
        self.fitted_values = self.oob_predictions
        self._f = f
        self.importance = np.ones(X.shape[1])

    def predict(self, X):
        return self._f(X)

    def importance_ranking(self):
        return list(range(len(self.importance)))


def stub_learner(f):
    return lambda X, target, seed: StubModel(X, f)


def f_lin(X):
    return 3.0 + 2.0 * X[:, 0] - X[:, 1]


def fitted_stub(survey, f, u, oob_noise=None, s2u=1.0, s2e=1.0):
    """FittedMerf whose OOB residuals are exactly ``oob_noise`` (default zero)."""
    model = StubModel(survey.X, f)
    u = np.asarray(u, dtype=float)
    oob = model.oob_predictions
    noise = np.zeros(survey.n) if oob_noise is None else oob_noise
    y = oob + u[survey.codes] + noise
    gamma = shrinkage(s2u, s2e, survey.sizes)
    return FittedMerf(model, survey.areas, u, s2u, s2e, gamma, oob, survey.codes, y,
                      True, 1, [])


def small_world(seed=0, sizes=(8, 10, 12, 9), N=200):
    """Population, a sample taken from its first rows, and aggregates."""
    g = np.random.default_rng(seed)
    D = len(sizes)
    parea = np.repeat(np.arange(D), N)
    PX = g.normal(size=(D * N, 2))
    pop = PopulationDataset(parea, PX)
    rows = np.concatenate([np.flatnonzero(parea == a)[:n] for a, n in enumerate(sizes)])
    survey = SurveyDataset(parea[rows], np.zeros(len(rows)), PX[rows])
    return pop, survey, pop.aggregate(list(range(D)))


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
