"""Time the compiled and numpy forest kernels on a simulation-sized problem.

    python3 benchmarks/bench_forest.py --trees 50 --repeat 3

Both backends grow the same forest from the same seeds; the script checks
the outputs agree bit for bit before reporting timings.
"""

import argparse
import time

import numpy as np

from merfagg import _forest_py
from merfagg.forest import tree_seeds
from merfagg.simulation import ScenarioSpec, draw_sample, generate_population, replicate_seed

try:
    from merfagg import _forest_cy
except ImportError:
    _forest_cy = None


def problem(seed):
    spec = ScenarioSpec("normal", seed=seed)
    pop = generate_population(spec, 0)
    s = draw_sample(pop, spec.sample_size_plan, np.random.default_rng(replicate_seed(spec, 0, 1)))
    order = np.ascontiguousarray(
        np.stack([np.argsort(s.X[:, f], kind="stable") for f in range(s.p)]).astype(np.int32))
    return s.X, s.y, order, pop.units.X


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--mtry", type=int, default=1)
    ap.add_argument("--min-node-size", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    X, y, order, Xpop = problem(args.seed)
    seeds = tree_seeds(args.seed, args.trees)
    backends = [("python", _forest_py)]
    if _forest_cy is not None:
        backends.insert(0, ("cython", _forest_cy))
    print(f"n={len(y)} p={X.shape[1]} trees={args.trees} predict rows={len(Xpop)}")
    print(f"{'backend':<8} {'build s':>10} {'predict s':>10} {'oob s':>10}")
    results = {}
    for name, k in backends:
        tb, forest = best_of(lambda: k.build_forest(X, y, order, seeds, args.mtry,
                                                    args.min_node_size, -1), args.repeat)
        tables = [np.ascontiguousarray(a) for a in forest[:5]]
        tp, pred = best_of(lambda: k.predict(*tables, Xpop), args.repeat)
        to, oob = best_of(lambda: k.predict_oob(*tables, X, forest[6]), args.repeat)
        results[name] = (tb, tp, to, pred, oob[0])
        print(f"{name:<8} {tb:10.4f} {tp:10.4f} {to:10.4f}")
    if len(results) == 2:
        c, p = results["cython"], results["python"]
        same = np.array_equal(c[3], p[3]) and np.array_equal(c[4], p[4])
        print(f"speed-up build x{p[0] / c[0]:.1f}, predict x{p[1] / c[1]:.1f}, "
              f"oob x{p[2] / c[2]:.1f}; identical predictions: {same}")
        if not same:
            raise SystemExit("backends disagree")


if __name__ == "__main__":
    main()
