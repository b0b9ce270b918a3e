"""Pure-Python (numpy) tree-growing and prediction kernels.

Mirrors ``_forest_cy`` operation for operation so both backends produce
bit-identical forests. Any change here must be reflected there.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TWO_M53 = 1.0 / 9007199254740992.0


def _mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class _Stream:
    """Splitmix64 counter stream; ``bounded`` maps a draw onto ``range(n)``."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def bounded(self, n):
        self.state = (self.state + _GAMMA) & _MASK
        u = float(_mix(self.state) >> 11) * _TWO_M53
        return int(u * float(n))

    def bounded_many(self, count, n):
        k = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + k * np.uint64(_GAMMA)
            z = _mix_array(states)
        self.state = (self.state + count * _GAMMA) & _MASK
        u = (z >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return (u * float(n)).astype(np.int64)


def _grow_tree(X, y, order, seed, mtry, min_node_size, max_depth, M):
    n, p = X.shape
    feature = np.full(M, -1, dtype=np.int32)
    threshold = np.zeros(M)
    left = np.full(M, -1, dtype=np.int32)
    right = np.full(M, -1, dtype=np.int32)
    value = np.zeros(M)
    importance = np.zeros(p)

    rng = _Stream(seed)
    draws = rng.bounded_many(n, n)
    inbag = np.bincount(draws, minlength=n).astype(np.int32)

    # each bagged row appears once, weighted by its multiplicity
    sorted_ = [order[f][inbag[order[f]] > 0] for f in range(p)]
    wt = inbag.astype(np.float64)

    stack = [(0, 0, len(sorted_[0]), 0)]
    next_id = 1
    while stack:
        node, start, end, depth = stack.pop()
        # node order for the leaf mean is feature 0's sorted order
        seg0 = sorted_[0][start:end]
        ys = y[seg0]
        m = int(inbag[seg0].sum())
        mean = np.cumsum(wt[seg0] * ys)[-1] / float(m)
        value[node] = mean

        if m <= min_node_size or ys.min() == ys.max():
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        perm = list(range(p))
        for k in range(mtry):
            j = k + rng.bounded(p - k)
            perm[k], perm[j] = perm[j], perm[k]
        candidates = sorted(perm[:mtry])

        best, best_f, best_k = 0.0, -1, -1
        for f in candidates:
            s = sorted_[f][start:end]
            # responses are centred on the node mean, so the right-hand sum is -sl
            sl = np.cumsum(wt[s] * (y[s] - mean))[:-1]
            nl = np.cumsum(inbag[s])[:-1].astype(np.float64)
            gain = (sl * sl) * (float(m) / (nl * (float(m) - nl)))
            xs = X[s, f]
            gain[~(xs[:-1] < xs[1:])] = -np.inf
            k = int(np.argmax(gain))
            if gain[k] > best:
                best, best_f, best_k = float(gain[k]), f, k

        if best_f < 0:
            continue

        s = sorted_[best_f][start:end]
        xa = X[s[best_k], best_f]
        xb = X[s[best_k + 1], best_f]
        thr = (xa + xb) * 0.5
        if thr >= xb:
            thr = xa

        nl = int((X[sorted_[0][start:end], best_f] <= thr).sum())
        for f in range(p):
            seg_f = sorted_[f][start:end]
            mask_f = X[seg_f, best_f] <= thr
            sorted_[f][start:end] = np.concatenate([seg_f[mask_f], seg_f[~mask_f]])

        feature[node] = best_f
        threshold[node] = thr
        left[node] = next_id
        right[node] = next_id + 1
        importance[best_f] += best
        stack.append((next_id + 1, start + nl, end, depth + 1))
        stack.append((next_id, start, start + nl, depth + 1))
        next_id += 2

    return feature, threshold, left, right, value, next_id, inbag, importance


def build_forest(X, y, order, tree_seeds, mtry, min_node_size, max_depth):
    n, p = X.shape
    T = len(tree_seeds)
    M = 2 * n
    out = {
        "feature": np.empty((T, M), dtype=np.int32),
        "threshold": np.empty((T, M)),
        "left": np.empty((T, M), dtype=np.int32),
        "right": np.empty((T, M), dtype=np.int32),
        "value": np.empty((T, M)),
        "inbag": np.empty((T, n), dtype=np.int32),
        "importance": np.zeros((T, p)),
    }
    node_count = np.empty(T, dtype=np.int32)
    for t in range(T):
        f, th, lf, rt, v, cnt, bag, imp = _grow_tree(
            X, y, order, int(tree_seeds[t]), mtry, min_node_size, max_depth, M)
        out["feature"][t] = f
        out["threshold"][t] = th
        out["left"][t] = lf
        out["right"][t] = rt
        out["value"][t] = v
        out["inbag"][t] = bag
        out["importance"][t] = imp
        node_count[t] = cnt
    return (out["feature"], out["threshold"], out["left"], out["right"],
            out["value"], node_count, out["inbag"], out["importance"])


def _leaves(feature, threshold, left, right, t, X):
    rows = np.arange(X.shape[0])
    node = np.zeros(X.shape[0], dtype=np.int64)
    f = feature[t, node]
    active = f >= 0
    while active.any():
        a = np.flatnonzero(active)
        na = node[a]
        go_left = X[rows[a], f[a]] <= threshold[t, na]
        node[a] = np.where(go_left, left[t, na], right[t, na])
        f = feature[t, node]
        active = f >= 0
    return node


def predict(feature, threshold, left, right, value, X):
    T = feature.shape[0]
    acc = np.zeros(X.shape[0])
    for t in range(T):
        acc = acc + value[t, _leaves(feature, threshold, left, right, t, X)]
    return acc / float(T)


def predict_oob(feature, threshold, left, right, value, X, inbag):
    T = feature.shape[0]
    m = X.shape[0]
    acc = np.zeros(m)
    counts = np.zeros(m, dtype=np.int32)
    for t in range(T):
        out = inbag[t] == 0
        if not out.any():
            continue
        leaf_vals = value[t, _leaves(feature, threshold, left, right, t, X[out])]
        acc[out] = acc[out] + leaf_vals
        counts[out] += 1
    pred = np.zeros(m)
    has = counts > 0
    pred[has] = acc[has] / counts[has]
    return pred, counts
