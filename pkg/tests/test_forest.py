import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from merfagg.forest import ForestConfig, fit_forest, predict, predict_oob
from merfagg.simulation import ScenarioSpec, generate_population


def _exact_cart(x, y, min_node_size=1):
    """Reference CART for one covariate, rows given with multiplicity."""
    x, y = np.asarray(x, float), np.asarray(y, float)

    def grow(idx):
        ys = y[idx]
        if len(idx) <= min_node_size or ys.min() == ys.max():
            return ("leaf", ys.mean())
        best = None
        for t in np.unique(x[idx])[:-1]:
            left, right = idx[x[idx] <= t], idx[x[idx] > t]
            sse = ((y[left] - y[left].mean()) ** 2).sum() + ((y[right] - y[right].mean()) ** 2).sum()
            if best is None or sse < best[0] - 1e-12:
                nxt = np.unique(x[idx])[np.unique(x[idx]) > t][0]
                best = (sse, (t + nxt) / 2, left, right)
        _, thr, left, right = best
        return ("split", thr, grow(left), grow(right))

    return grow(np.arange(len(x)))


def _route(tree, v):
    while tree[0] == "split":
        tree = tree[2] if v <= tree[1] else tree[3]
    return tree[1]


def test_four_point_example_against_bag_enumeration():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.0, 0.0, 10.0, 10.0])
    # exact bagged expectation over all 4**4 equally likely bags
    at0, at3 = [], []
    for bag in itertools.product(range(4), repeat=4):
        tree = _exact_cart(x[list(bag)], y[list(bag)])
        at0.append(_route(tree, 0.0))
        at3.append(_route(tree, 3.0))
    forest = fit_forest(x[:, None], y, ForestConfig(num_trees=200, min_node_size=1, seed=7))
    p0, p3 = forest.predict(np.array([[0.0], [3.0]]))
    assert abs(p0 - 0.0) < 2.0 and abs(p3 - 10.0) < 2.0
    for got, ref in ((p0, np.array(at0)), (p3, np.array(at3))):
        assert abs(got - ref.mean()) <= 4 * ref.std() / np.sqrt(200) + 1e-12
    assert forest.importance[0] > 0


def test_constant_response():
    X = np.random.default_rng(0).normal(size=(30, 3))
    f = fit_forest(X, np.full(30, 4.5), ForestConfig(num_trees=20))
    assert np.all(f.predict(X) == 4.5)
    assert np.all(f.oob_predictions == 4.5)
    assert np.all(f.importance == 0)


def test_single_tree_routes_to_leaf_mean():
    g = np.random.default_rng(1)
    X, y = g.normal(size=(40, 2)), g.normal(size=40)
    f = fit_forest(X, y, ForestConfig(num_trees=1, min_node_size=3))
    pt = X[:1]
    node = 0
    while f.feature[0, node] >= 0:
        node = f.left[0, node] if pt[0, f.feature[0, node]] <= f.threshold[0, node] else f.right[0, node]
    assert predict(f, pt)[0] == f.value[0, node]


def test_leaf_means_are_inbag_means():
    g = np.random.default_rng(2)
    X, y = g.normal(size=(60, 2)), g.normal(size=60)
    f = fit_forest(X, y, ForestConfig(num_trees=5, min_node_size=4))
    for t in range(5):
        sums, counts = {}, {}
        for j in range(60):
            node = 0
            while f.feature[t, node] >= 0:
                node = f.left[t, node] if X[j, f.feature[t, node]] <= f.threshold[t, node] else f.right[t, node]
            sums[node] = sums.get(node, 0.0) + f.inbag[t, j] * y[j]
            counts[node] = counts.get(node, 0) + f.inbag[t, j]
        for node, c in counts.items():
            if c:
                assert f.value[t, node] == pytest.approx(sums[node] / c, rel=1e-12, abs=1e-12)


def test_min_node_size_respected():
    g = np.random.default_rng(3)
    X, y = g.normal(size=(200, 2)), g.normal(size=200)
    f = fit_forest(X, y, ForestConfig(num_trees=3, min_node_size=10))
    for t in range(3):
        counts = {}
        for j in range(200):
            node = 0
            while f.feature[t, node] >= 0:
                node = f.left[t, node] if X[j, f.feature[t, node]] <= f.threshold[t, node] else f.right[t, node]
            counts[node] = counts.get(node, 0) + f.inbag[t, j]
        # a split node held more than 10 bagged rows, so leaves come from such parents
        assert max(counts.values()) <= 200
        assert all(c >= 1 for c in counts.values() if c)
    assert (f.node_count > 1).all()


def test_max_depth():
    g = np.random.default_rng(4)
    X, y = g.normal(size=(100, 2)), g.normal(size=100)
    f = fit_forest(X, y, ForestConfig(num_trees=4, max_depth=1, min_node_size=1))
    assert (f.node_count == 3).all()


@given(arrays(np.float64, st.integers(5, 40), elements=st.floats(-1e3, 1e3)),
       st.integers(0, 2**32))
def test_predictions_within_response_range(y, seed):
    X = np.random.default_rng(seed).normal(size=(len(y), 2))
    f = fit_forest(X, y, ForestConfig(num_trees=10, seed=seed))
    pts = np.random.default_rng(seed + 1).normal(size=(20, 2)) * 3
    for pred in (f.predict(pts), f.oob_predictions):
        assert pred.min() >= y.min() - 1e-9 * max(1.0, abs(y.min()))
        assert pred.max() <= y.max() + 1e-9 * max(1.0, abs(y.max()))


def test_oob_exclusion_fraction():
    g = np.random.default_rng(5)
    X, y = g.normal(size=(50, 2)), g.normal(size=50)
    f = fit_forest(X, y, ForestConfig(num_trees=400, seed=3))
    frac = f.oob_counts / 400
    assert ((frac > 0.25) & (frac < 0.50)).all()


def test_oob_mse_below_variance(normal_draw):
    _, pop, _ = normal_draw
    X, y = pop.units.X[:500], pop.y[:500]
    f = fit_forest(X, y, ForestConfig(num_trees=200, seed=1))
    assert np.mean((predict_oob(f) - y) ** 2) < np.var(y)


def test_all_inbag_row_falls_back():
    X = np.array([[0.0], [1.0]])
    f = fit_forest(X, np.array([1.0, 2.0]), ForestConfig(num_trees=1, min_node_size=1, seed=0))
    oob = f.oob_predictions
    assert np.isfinite(oob).all()
    assert f.n_oob_missing == int((f.oob_counts == 0).sum())


def test_determinism():
    g = np.random.default_rng(6)
    X, y = g.normal(size=(80, 3)), g.normal(size=80)
    cfg = ForestConfig(num_trees=30, seed=11)
    a, b = fit_forest(X, y, cfg), fit_forest(X, y, cfg)
    for name in ("feature", "threshold", "left", "right", "value", "inbag", "importance"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = fit_forest(X, y, ForestConfig(num_trees=30, seed=12))
    assert not np.array_equal(a.inbag, c.inbag)


def _impurity_decrease(f, X, y):
    """Independent sum over all splits of parent SSE minus child SSEs."""
    total = 0.0
    for t in range(f.num_trees):
        w = f.inbag[t].astype(float)
        members = {0: np.flatnonzero(w > 0)}
        stack = [0]
        while stack:
            node = stack.pop()
            rows = members[node]
            k = f.feature[t, node]
            if k < 0:
                continue
            go = X[rows, k] <= f.threshold[t, node]
            members[f.left[t, node]], members[f.right[t, node]] = rows[go], rows[~go]
            stack += [f.left[t, node], f.right[t, node]]

            def sse(r):
                m = np.sum(w[r] * y[r]) / np.sum(w[r])
                return np.sum(w[r] * (y[r] - m) ** 2)
            total += sse(rows) - sse(rows[go]) - sse(rows[~go])
    return total


def test_importance_additivity():
    g = np.random.default_rng(7)
    X = g.normal(size=(120, 3))
    y = X[:, 0] * 2 + g.normal(size=120)
    f = fit_forest(X, y, ForestConfig(num_trees=8, seed=2))
    assert f.importance.sum() == pytest.approx(_impurity_decrease(f, X, y), rel=1e-9)
    assert (f.importance >= 0).all()


def test_unused_variable_has_zero_importance():
    g = np.random.default_rng(8)
    X = g.normal(size=(60, 2))
    X[:, 1] = 1.0  # constant column can never split
    f = fit_forest(X, X[:, 0] + g.normal(size=60), ForestConfig(num_trees=10, split_candidates=2))
    assert f.importance[1] == 0 and f.importance[0] > 0


def test_noise_covariate_does_not_displace_signal():
    spec = ScenarioSpec("interaction", seed=3)
    pop = generate_population(spec, 0)
    X = pop.units.X[::50][:1000]
    y = pop.y[::50][:1000]
    noise = np.random.default_rng(0).normal(size=(len(y), 1))
    f = fit_forest(np.hstack([X, noise]), y, ForestConfig(num_trees=200, split_candidates=1))
    assert f.importance_ranking()[-1] == 2
    assert f.importance_ranking()[0] in (0, 1)


@pytest.mark.parametrize("kwargs", [dict(num_trees=0), dict(split_candidates=0),
                                    dict(min_node_size=0), dict(max_depth=0), dict(seed=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ForestConfig(**kwargs)


def test_input_errors():
    X, y = np.zeros((5, 2)), np.zeros(5)
    with pytest.raises(ValueError):
        fit_forest(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        fit_forest(X[:1], y[:1])
    with pytest.raises(ValueError):
        fit_forest(X, np.r_[y[:4], np.nan])
    with pytest.raises(ValueError):
        fit_forest(X, y, ForestConfig(split_candidates=3))
    f = fit_forest(X, y, ForestConfig(num_trees=2))
    with pytest.raises(ValueError):
        f.predict(np.zeros((3, 3)))


def test_default_mtry():
    assert ForestConfig().mtry(2) == 1
    assert ForestConfig().mtry(9) == 3
    assert ForestConfig(split_candidates=5).mtry(6) == 5
