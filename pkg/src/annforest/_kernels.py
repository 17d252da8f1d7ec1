"""Numba kernels for the hot loops: projection, routing, split sweeps, scoring."""

import numba
import numpy as np

_JIT = dict(nopython=True, nogil=True, cache=True)


@numba.jit(**_JIT)
def project_node(x, node, axis, dir_id, directions):
    a = axis[node]
    if a >= 0:
        return np.float64(x[a])
    dvec = directions[dir_id[node]]
    s = 0.0
    for j in range(x.shape[0]):
        s += x[j] * dvec[j]
    return s


@numba.jit(**_JIT)
def project_rows(X, idx, direction):
    # same summation order as project_node, so build and routing agree bit for bit
    out = np.empty(idx.shape[0], dtype=np.float64)
    for r in range(idx.shape[0]):
        row = X[idx[r]]
        s = 0.0
        for j in range(row.shape[0]):
            s += row[j] * direction[j]
        out[r] = s
    return out


@numba.jit(**_JIT)
def column_variance(X, idx):
    """Per-dimension population variance of ``X[idx]`` (two-pass, float64)."""
    n = idx.shape[0]
    d = X.shape[1]
    mean = np.zeros(d)
    for r in range(n):
        row = X[idx[r]]
        for j in range(d):
            mean[j] += row[j]
    for j in range(d):
        mean[j] /= n
    var = np.zeros(d)
    for r in range(n):
        row = X[idx[r]]
        for j in range(d):
            t = row[j] - mean[j]
            var[j] += t * t
    for j in range(d):
        var[j] /= n
    return var


@numba.jit(**_JIT)
def route_one(x, root, axis, dir_id, directions, threshold, left, right):
    code = root
    while code >= 0:
        if project_node(x, code, axis, dir_id, directions) <= threshold[code]:
            code = left[code]
        else:
            code = right[code]
    return -code - 1


@numba.jit(**_JIT)
def route_many(X, root, axis, dir_id, directions, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        out[i] = route_one(X[i], root, axis, dir_id, directions, threshold, left, right)
    return out


@numba.jit(**_JIT)
def route_forest(x, roots, axis, dir_id, directions, threshold, left, right):
    """Global leaf id of ``x`` in every tree of a flattened forest."""
    out = np.empty(roots.shape[0], dtype=np.int64)
    for t in range(roots.shape[0]):
        out[t] = route_one(x, roots[t], axis, dir_id, directions, threshold, left, right)
    return out


@numba.jit(**_JIT)
def best_split(X, idx, labels, dims, xlogx, cnt_parent, cnt_left, touched):
    """Sweep every sampled dimension and return the best multinomial split.

    Returns ``(dim, threshold, criterion, parent_criterion)``; ``dim`` is -1
    when no dimension has two distinct values.  ``cnt_parent`` and
    ``cnt_left`` must be zero on entry and are zero again on exit.
    """
    n = idx.shape[0]
    k = labels.shape[1]
    n_touched = 0
    for r in range(n):
        for c in range(k):
            j = labels[idx[r], c]
            if cnt_parent[j] == 0:
                touched[n_touched] = j
                n_touched += 1
            cnt_parent[j] += 1
    sum_parent = 0.0
    for t in range(n_touched):
        sum_parent += xlogx[cnt_parent[touched[t]]]
    parent_crit = sum_parent - xlogx[k * n]

    best_dim = -1
    best_thr = 0.0
    best_crit = -np.inf
    vals = np.empty(n, dtype=np.float64)
    for di in range(dims.shape[0]):
        dim = dims[di]
        for r in range(n):
            vals[r] = X[idx[r], dim]
        order = np.argsort(vals, kind="mergesort")
        sum_left = 0.0
        sum_right = sum_parent
        for pos in range(n - 1):
            p = idx[order[pos]]
            for c in range(k):
                j = labels[p, c]
                cl = cnt_left[j]
                cr = cnt_parent[j] - cl
                sum_left += xlogx[cl + 1] - xlogx[cl]
                sum_right += xlogx[cr - 1] - xlogx[cr]
                cnt_left[j] = cl + 1
            v0 = vals[order[pos]]
            v1 = vals[order[pos + 1]]
            if v0 < v1:
                n_left = pos + 1
                crit = (sum_left - xlogx[k * n_left]) + (sum_right - xlogx[k * (n - n_left)])
                if crit > best_crit:
                    best_crit = crit
                    best_dim = dim
                    best_thr = 0.5 * (v0 + v1)
        for t in range(n_touched):
            cnt_left[touched[t]] = 0
    for t in range(n_touched):
        cnt_parent[touched[t]] = 0
    return best_dim, best_thr, best_crit, parent_crit


@numba.jit(**_JIT)
def accumulate_scores(leaves, ptr, labels, counts, leaf_n, raw, acc, touched):
    """Add each landing leaf's counts (or counts / N_l) into a dense accumulator.

    Returns the number of touched labels, which are written to the front of
    ``touched`` in first-touch order.  Empty leaves hold no entries and so
    contribute nothing.
    """
    n_touched = 0
    for t in range(leaves.shape[0]):
        leaf = leaves[t]
        n_l = leaf_n[leaf]
        for e in range(ptr[leaf], ptr[leaf + 1]):
            j = labels[e]
            if acc[j] == 0.0:
                touched[n_touched] = j
                n_touched += 1
            if raw:
                acc[j] += counts[e]
            else:
                acc[j] += counts[e] / n_l
    return n_touched


@numba.jit(**_JIT)
def _normalize_step(w, v, tol):
    """Sign-aligned normalization of ``w`` in place; returns (ok, converged)."""
    d = v.shape[0]
    norm = 0.0
    dot = 0.0
    for i in range(d):
        norm += w[i] * w[i]
        dot += w[i] * v[i]
    norm = np.sqrt(norm)
    if norm == 0.0 or not np.isfinite(norm):
        return False, False
    sign = 1.0 if dot >= 0 else -1.0
    diff = 0.0
    for i in range(d):
        w[i] = sign * w[i] / norm
        diff += (w[i] - v[i]) ** 2
    return True, np.sqrt(diff) < tol


@numba.jit(**_JIT)
def power_iteration_rows(centered, v, tol, max_iter):
    """Like ``power_iteration`` on ``centered.T @ centered`` without forming it.

    Cheaper when the node has fewer points than dimensions.
    """
    n, d = centered.shape
    u = np.empty(n)
    w = np.empty(d)
    for _ in range(max_iter):
        for r in range(n):
            s = 0.0
            for j in range(d):
                s += centered[r, j] * v[j]
            u[r] = s
        for j in range(d):
            w[j] = 0.0
        for r in range(n):
            ur = u[r]
            for j in range(d):
                w[j] += centered[r, j] * ur
        ok, converged = _normalize_step(w, v, tol)
        if not ok:
            return v, False
        v = w.copy()
        if converged:
            return v, True
    return v, False


@numba.jit(**_JIT)
def power_iteration(cov, v, tol, max_iter):
    """Top eigenvector of symmetric ``cov`` from start ``v`` (unit norm).

    Returns ``(vector, converged)``; converged when successive iterates are
    within ``tol`` in Euclidean norm after sign alignment.
    """
    d = v.shape[0]
    w = np.empty(d)
    for _ in range(max_iter):
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += cov[i, j] * v[j]
            w[i] = s
        norm = 0.0
        dot = 0.0
        for i in range(d):
            norm += w[i] * w[i]
            dot += w[i] * v[i]
        norm = np.sqrt(norm)
        if norm == 0.0 or not np.isfinite(norm):
            return v, False
        sign = 1.0 if dot >= 0 else -1.0
        diff = 0.0
        for i in range(d):
            w[i] = sign * w[i] / norm
            diff += (w[i] - v[i]) ** 2
        v = w.copy()
        if np.sqrt(diff) < tol:
            return v, True
    return v, False
