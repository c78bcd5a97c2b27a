"""Exact discrete optimal transport.

The solver is a transportation simplex (MODI potentials on a spanning-tree
basis) with Bland's smallest-index rule for both the entering and leaving
cell.  It is compiled with numba so that the bisimulation fixed point can
call it in an inner loop without Python overhead.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .mdp import ValidationError

PROB_TOL = 1e-12
_RC_TOL = 1e-12


@njit(cache=True)
def _tree_potentials(m, n, basis_i, basis_j, cost):
    # u[i] + v[j] = cost[i, j] on every basic cell, with u[0] = 0
    nb = m + n - 1
    u = np.zeros(m)
    v = np.zeros(n)
    seen_r = np.zeros(m, dtype=np.bool_)
    seen_c = np.zeros(n, dtype=np.bool_)
    seen_r[0] = True
    done = 1
    while done < m + n:
        progress = False
        for k in range(nb):
            i = basis_i[k]
            j = basis_j[k]
            if seen_r[i] and not seen_c[j]:
                v[j] = cost[i, j] - u[i]
                seen_c[j] = True
                done += 1
                progress = True
            elif seen_c[j] and not seen_r[i]:
                u[i] = cost[i, j] - v[j]
                seen_r[i] = True
                done += 1
                progress = True
        if not progress:
            break
    return u, v


@njit(cache=True)
def _cycle(m, n, basis_i, basis_j, ei, ej, path):
    """Tree path from column ``ej`` to row ``ei``; writes basis slots to ``path``."""
    nb = m + n - 1
    # nodes: rows 0..m-1, columns m..m+n-1
    parent_edge = np.full(m + n, -1, dtype=np.int64)
    visited = np.zeros(m + n, dtype=np.bool_)
    queue = np.empty(m + n, dtype=np.int64)
    head = 0
    tail = 0
    queue[tail] = ei
    tail += 1
    visited[ei] = True
    while head < tail:
        node = queue[head]
        head += 1
        for k in range(nb):
            a = basis_i[k]
            b = m + basis_j[k]
            other = -1
            if a == node:
                other = b
            elif b == node:
                other = a
            if other >= 0 and not visited[other]:
                visited[other] = True
                parent_edge[other] = k
                queue[tail] = other
                tail += 1
    length = 0
    node = m + ej
    while node != ei:
        k = parent_edge[node]
        path[length] = k
        length += 1
        a = basis_i[k]
        b = m + basis_j[k]
        node = b if node == a else a
    return length


@njit(cache=True)
def transport_simplex(a, b, cost):
    """Minimum-cost transport plan between supplies ``a`` and demands ``b``.

    Both vectors must be strictly positive with equal totals.  Returns the
    optimal cost.
    """
    m = a.shape[0]
    n = b.shape[0]
    if m == 1 or n == 1:
        total = 0.0
        for i in range(m):
            for j in range(n):
                total += a[i] * b[j] * cost[i, j] / (b.sum() if m == 1 else a.sum())
        return total
    nb = m + n - 1
    basis_i = np.empty(nb, dtype=np.int64)
    basis_j = np.empty(nb, dtype=np.int64)
    flow = np.empty(nb)
    is_basic = np.zeros((m, n), dtype=np.bool_)
    # north-west corner start; ties advance the row so the basis stays a tree
    ra = a.copy()
    rb = b.copy()
    i = 0
    j = 0
    k = 0
    while k < nb:
        x = min(ra[i], rb[j])
        basis_i[k] = i
        basis_j[k] = j
        flow[k] = x
        is_basic[i, j] = True
        ra[i] -= x
        rb[j] -= x
        k += 1
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    path = np.empty(nb, dtype=np.int64)
    max_pivots = 50 * (m + n) * (m + n) + 1000
    for _ in range(max_pivots):
        u, v = _tree_potentials(m, n, basis_i, basis_j, cost)
        ei = -1
        ej = -1
        for ii in range(m):
            for jj in range(n):
                if not is_basic[ii, jj] and cost[ii, jj] - u[ii] - v[jj] < -_RC_TOL:
                    ei = ii
                    ej = jj
                    break
            if ei >= 0:
                break
        if ei < 0:
            total = 0.0
            for kk in range(nb):
                total += flow[kk] * cost[basis_i[kk], basis_j[kk]]
            return total
        length = _cycle(m, n, basis_i, basis_j, ei, ej, path)
        # path[0] touches column ej and loses flow; signs alternate from there
        theta = np.inf
        leave = -1
        for t in range(0, length, 2):
            kk = path[t]
            f = flow[kk]
            if f < theta:
                theta = f
                leave = kk
            elif f == theta:
                # Bland: smallest (row, col) index among ties
                if (basis_i[kk] < basis_i[leave]
                        or (basis_i[kk] == basis_i[leave] and basis_j[kk] < basis_j[leave])):
                    leave = kk
        for t in range(length):
            kk = path[t]
            if t % 2 == 0:
                flow[kk] -= theta
            else:
                flow[kk] += theta
        is_basic[basis_i[leave], basis_j[leave]] = False
        basis_i[leave] = ei
        basis_j[leave] = ej
        flow[leave] = theta
        is_basic[ei, ej] = True
    raise RuntimeError("transport simplex exceeded its pivot budget")


@njit(cache=True)
def wasserstein_sparse(ia, pa, ib, pb, ground):
    """W1 between distributions given as (support indices, masses)."""
    if ia.shape[0] == 1 and ib.shape[0] == 1:
        return ground[ia[0], ib[0]]
    cost = np.empty((ia.shape[0], ib.shape[0]))
    for x in range(ia.shape[0]):
        for y in range(ib.shape[0]):
            cost[x, y] = ground[ia[x], ib[y]]
    return transport_simplex(pa, pb, cost)


def _check_prob(p, name):
    if p.ndim != 1:
        raise ValidationError(f"{name} must be a vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")


def wasserstein_discrete(p, q, ground) -> float:
    """Exact 1-Wasserstein distance between ``p`` and ``q`` under ``ground``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    ground = np.asarray(ground, dtype=np.float64)
    _check_prob(p, "p")
    _check_prob(q, "q")
    if p.shape != q.shape or ground.shape != (p.size, p.size):
        raise ValidationError(
            f"size mismatch: p {p.shape}, q {q.shape}, ground {ground.shape}")
    ia = np.flatnonzero(p > 0)
    ib = np.flatnonzero(q > 0)
    pa = p[ia]
    pb = q[ib] * (pa.sum() / q[ib].sum())
    return float(wasserstein_sparse(ia, pa, ib, pb, ground))
