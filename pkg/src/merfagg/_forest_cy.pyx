# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tree-growing and prediction kernels.

Semantics must stay bit-identical to ``_forest_py``; the equivalence is
exercised in ``tests/test_kernels.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t, uint8_t
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _next(uint64_t* state) noexcept nogil:
    state[0] += GAMMA
    return _mix(state[0])


cdef inline Py_ssize_t _bounded(uint64_t* state, Py_ssize_t n) noexcept nogil:
    cdef double u = <double>(_next(state) >> 11) * TWO_M53
    return <Py_ssize_t>(u * <double>n)


cdef void _stable_partition(int32_t* arr, int32_t* buf, Py_ssize_t start,
                            Py_ssize_t end, uint8_t* goes_left) noexcept nogil:
    cdef Py_ssize_t k, nl = 0, nr = 0
    cdef int32_t idx
    cdef uint8_t g
    for k in range(start, end):
        idx = arr[k]
        g = goes_left[idx]
        arr[start + nl] = idx
        buf[nr] = idx
        nl += g
        nr += 1 - g
    for k in range(nr):
        arr[start + nl + k] = buf[k]


cdef Py_ssize_t _grow_tree(
    const double[:, ::1] X,
    const double[::1] y,
    const int32_t[:, ::1] order,
    uint64_t seed,
    Py_ssize_t mtry,
    Py_ssize_t min_node_size,
    Py_ssize_t max_depth,
    int32_t[::1] feature,
    double[::1] threshold,
    int32_t[::1] left,
    int32_t[::1] right,
    double[::1] value,
    int32_t[::1] inbag,
    double[::1] importance,
) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef uint64_t state = seed
    cdef Py_ssize_t i, k, f, t, j, start, end, m, depth, node, pos
    cdef Py_ssize_t next_id = 1, top = 0
    cdef Py_ssize_t best_f, best_k, idx, nxt, nl
    cdef double s, mean, ymin, ymax, yv, sl, gain, best, thr, xa, xb
    cdef int32_t tmp

    cdef int32_t* sorted_ = <int32_t*>malloc(n * p * sizeof(int32_t))
    cdef int32_t* buf = <int32_t*>malloc(n * sizeof(int32_t))
    cdef uint8_t* goes_left = <uint8_t*>malloc(n * sizeof(uint8_t))
    cdef int32_t* perm = <int32_t*>malloc(p * sizeof(int32_t))
    cdef uint8_t* chosen = <uint8_t*>malloc(p * sizeof(uint8_t))
    # stack entries: node, start, end, depth
    cdef Py_ssize_t* stack = <Py_ssize_t*>malloc(4 * (2 * n + 2) * sizeof(Py_ssize_t))

    for i in range(n):
        inbag[i] = 0
    for k in range(n):
        inbag[_bounded(&state, n)] += 1

    # each bagged row appears once, weighted by its multiplicity
    for f in range(p):
        pos = 0
        for k in range(n):
            i = order[f, k]
            if inbag[i] > 0:
                sorted_[f * n + pos] = <int32_t>i
                pos += 1

    stack[0] = 0
    stack[1] = 0
    stack[2] = pos
    stack[3] = 0
    top = 1

    while top > 0:
        top -= 1
        node = stack[4 * top]
        start = stack[4 * top + 1]
        end = stack[4 * top + 2]
        depth = stack[4 * top + 3]
        # node order for the leaf mean is feature 0's sorted order
        s = 0.0
        m = 0
        ymin = y[sorted_[start]]
        ymax = ymin
        for k in range(start, end):
            idx = sorted_[k]
            yv = y[idx]
            s += <double>inbag[idx] * yv
            m += inbag[idx]
            if yv < ymin:
                ymin = yv
            if yv > ymax:
                ymax = yv
        mean = s / <double>m
        value[node] = mean
        feature[node] = -1
        threshold[node] = 0.0
        left[node] = -1
        right[node] = -1

        if m <= min_node_size or ymin == ymax:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        for f in range(p):
            perm[f] = <int32_t>f
            chosen[f] = 0
        for k in range(mtry):
            j = k + _bounded(&state, p - k)
            tmp = perm[k]
            perm[k] = perm[j]
            perm[j] = tmp
            chosen[perm[k]] = 1

        best = 0.0
        best_f = -1
        best_k = -1
        for f in range(p):
            if not chosen[f]:
                continue
            # responses are centred on the node mean, so the right-hand sum is -sl
            sl = 0.0
            nl = 0
            for k in range(start, end - 1):
                idx = sorted_[f * n + k]
                nxt = sorted_[f * n + k + 1]
                sl += <double>inbag[idx] * (y[idx] - mean)
                nl += inbag[idx]
                if X[idx, f] < X[nxt, f]:
                    gain = (sl * sl) * (<double>m / (<double>nl * <double>(m - nl)))
                    if gain > best:
                        best = gain
                        best_f = f
                        best_k = k

        if best_f < 0:
            continue

        xa = X[sorted_[best_f * n + best_k], best_f]
        xb = X[sorted_[best_f * n + best_k + 1], best_f]
        thr = (xa + xb) * 0.5
        if thr >= xb:
            thr = xa

        nl = 0
        for k in range(start, end):
            idx = sorted_[k]
            goes_left[idx] = 1 if X[idx, best_f] <= thr else 0
            nl += goes_left[idx]
        # nl counts distinct rows here: it positions the child segments
        for f in range(p):
            _stable_partition(sorted_ + f * n, buf, start, end, goes_left)

        feature[node] = <int32_t>best_f
        threshold[node] = thr
        left[node] = <int32_t>next_id
        right[node] = <int32_t>(next_id + 1)
        importance[best_f] += best

        stack[4 * top] = next_id + 1
        stack[4 * top + 1] = start + nl
        stack[4 * top + 2] = end
        stack[4 * top + 3] = depth + 1
        top += 1
        stack[4 * top] = next_id
        stack[4 * top + 1] = start
        stack[4 * top + 2] = start + nl
        stack[4 * top + 3] = depth + 1
        top += 1
        next_id += 2

    free(sorted_)
    free(buf)
    free(goes_left)
    free(perm)
    free(chosen)
    free(stack)
    return next_id


def build_forest(const double[:, ::1] X, const double[::1] y,
                 const int32_t[:, ::1] order, const uint64_t[::1] tree_seeds,
                 Py_ssize_t mtry, Py_ssize_t min_node_size, Py_ssize_t max_depth):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t T = tree_seeds.shape[0]
    cdef Py_ssize_t M = 2 * n
    cdef Py_ssize_t t

    feature = np.empty((T, M), dtype=np.int32)
    threshold = np.empty((T, M), dtype=np.float64)
    left = np.empty((T, M), dtype=np.int32)
    right = np.empty((T, M), dtype=np.int32)
    value = np.empty((T, M), dtype=np.float64)
    inbag = np.empty((T, n), dtype=np.int32)
    importance = np.zeros((T, p), dtype=np.float64)
    node_count = np.empty(T, dtype=np.int32)

    cdef int32_t[:, ::1] fv = feature
    cdef double[:, ::1] tv = threshold
    cdef int32_t[:, ::1] lv = left
    cdef int32_t[:, ::1] rv = right
    cdef double[:, ::1] vv = value
    cdef int32_t[:, ::1] bv = inbag
    cdef double[:, ::1] iv = importance
    cdef int32_t[::1] nc = node_count

    with nogil:
        for t in range(T):
            nc[t] = <int32_t>_grow_tree(X, y, order, tree_seeds[t], mtry, min_node_size,
                                        max_depth, fv[t], tv[t], lv[t], rv[t], vv[t],
                                        bv[t], iv[t])

    return feature, threshold, left, right, value, node_count, inbag, importance


def predict(const int32_t[:, ::1] feature, const double[:, ::1] threshold,
            const int32_t[:, ::1] left, const int32_t[:, ::1] right,
            const double[:, ::1] value, const double[:, ::1] X):
    cdef Py_ssize_t T = feature.shape[0]
    cdef Py_ssize_t m = X.shape[0]
    cdef Py_ssize_t i, t, node
    cdef int32_t f
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for t in range(T):
            for i in range(m):
                node = 0
                f = feature[t, 0]
                while f >= 0:
                    if X[i, f] <= threshold[t, node]:
                        node = left[t, node]
                    else:
                        node = right[t, node]
                    f = feature[t, node]
                ov[i] += value[t, node]
        for i in range(m):
            ov[i] = ov[i] / <double>T
    return out


def predict_oob(const int32_t[:, ::1] feature, const double[:, ::1] threshold,
                const int32_t[:, ::1] left, const int32_t[:, ::1] right,
                const double[:, ::1] value, const double[:, ::1] X,
                const int32_t[:, ::1] inbag):
    cdef Py_ssize_t T = feature.shape[0]
    cdef Py_ssize_t m = X.shape[0]
    cdef Py_ssize_t i, t, node
    cdef int32_t f
    out = np.zeros(m, dtype=np.float64)
    counts = np.zeros(m, dtype=np.int32)
    cdef double[::1] ov = out
    cdef int32_t[::1] cv = counts
    with nogil:
        for t in range(T):
            for i in range(m):
                if inbag[t, i] != 0:
                    continue
                node = 0
                f = feature[t, 0]
                while f >= 0:
                    if X[i, f] <= threshold[t, node]:
                        node = left[t, node]
                    else:
                        node = right[t, node]
                    f = feature[t, node]
                ov[i] += value[t, node]
                cv[i] += 1
        for i in range(m):
            if cv[i] > 0:
                ov[i] = ov[i] / <double>cv[i]
    return out, counts
