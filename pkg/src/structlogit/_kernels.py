"""Compiled inner loops for message passing.

Everything here is numba-jitted and operates on raw arrays so the hot
sweep over a large grid stays allocation-free.  All log-sum-exp work
subtracts the running maximum before exponentiating; probabilities are
never stored and re-logged.  Kernels release the GIL so callers may run
independent examples on a thread pool.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_NJIT = dict(cache=True, nogil=True)


@njit(**_NJIT)
def _update_node(v, theta_n, theta_e, lam, ptr, idx, side, eps, a, b, logm):
    """Exact coordinate step on the messages of every edge at node ``v``.

    Writes into ``lam`` in place.  ``a`` (L,), ``b`` (L, L) and ``logm``
    (maxdeg, L) are caller-provided scratch.
    """
    L = theta_n.shape[1]
    lo = ptr[v]
    hi = ptr[v + 1]
    deg = hi - lo

    # Log marginal of the node region: (theta - sum of incoming messages) / eps,
    # normalized.
    for y in range(L):
        a[y] = theta_n[v, y]
    for t in range(lo, hi):
        e = idx[t]
        sd = side[t]
        for y in range(L):
            a[y] -= lam[e, sd, y]
    mx = a[0] / eps
    for y in range(L):
        a[y] = a[y] / eps
        if a[y] > mx:
            mx = a[y]
    z = 0.0
    for y in range(L):
        z += np.exp(a[y] - mx)
    lz = mx + np.log(z)
    for y in range(L):
        a[y] -= lz

    # Log marginals of each incident edge region onto v's side.
    for t in range(lo, hi):
        e = idx[t]
        sd = side[t]
        k = t - lo
        if sd == 0:
            for yi in range(L):
                m = -np.inf
                for yj in range(L):
                    b[yi, yj] = (theta_e[e, yi, yj] + lam[e, 0, yi]
                                 + lam[e, 1, yj]) / eps
                    if b[yi, yj] > m:
                        m = b[yi, yj]
                s = 0.0
                for yj in range(L):
                    s += np.exp(b[yi, yj] - m)
                logm[k, yi] = m + np.log(s)
        else:
            for yj in range(L):
                m = -np.inf
                for yi in range(L):
                    b[yi, yj] = (theta_e[e, yi, yj] + lam[e, 0, yi]
                                 + lam[e, 1, yj]) / eps
                    if b[yi, yj] > m:
                        m = b[yi, yj]
                s = 0.0
                for yi in range(L):
                    s += np.exp(b[yi, yj] - m)
                logm[k, yj] = m + np.log(s)
        # normalize: subtract lse of the side marginal itself
        m = logm[k, 0]
        for y in range(L):
            if logm[k, y] > m:
                m = logm[k, y]
        s = 0.0
        for y in range(L):
            s += np.exp(logm[k, y] - m)
        lt = m + np.log(s)
        for y in range(L):
            logm[k, y] -= lt

    # Geometric-mean target g, then shift every incident message so all
    # regions at v agree on it.
    for y in range(L):
        acc = a[y]
        for k in range(deg):
            acc += logm[k, y]
        g = acc / (1.0 + deg)
        for t in range(lo, hi):
            e = idx[t]
            sd = side[t]
            lam[e, sd, y] += eps * (g - logm[t - lo, y])


@njit(**_NJIT)
def _sweep(order, theta_n, theta_e, lam, ptr, idx, side, eps, maxdeg):
    """One pass of node updates in the given order, mutating ``lam``."""
    L = theta_n.shape[1]
    a = np.empty(L)
    b = np.empty((L, L))
    logm = np.empty((max(maxdeg, 1), L))
    for t in range(order.shape[0]):
        _update_node(order[t], theta_n, theta_e, lam, ptr, idx, side,
                     eps, a, b, logm)


@njit(**_NJIT)
def _node_marginals(theta_n, lam, edge_i, edge_j, eps, out):
    """Softmax node beliefs (theta minus incoming messages) into ``out``."""
    V, L = theta_n.shape
    for v in range(V):
        for y in range(L):
            out[v, y] = theta_n[v, y]
    E = edge_i.shape[0]
    for e in range(E):
        i = edge_i[e]
        j = edge_j[e]
        for y in range(L):
            out[i, y] -= lam[e, 0, y]
            out[j, y] -= lam[e, 1, y]
    for v in range(V):
        mx = out[v, 0] / eps
        for y in range(L):
            out[v, y] = out[v, y] / eps
            if out[v, y] > mx:
                mx = out[v, y]
        z = 0.0
        for y in range(L):
            out[v, y] = np.exp(out[v, y] - mx)
            z += out[v, y]
        for y in range(L):
            out[v, y] /= z


@njit(**_NJIT)
def _agreement(theta_n, theta_e, lam, edge_i, edge_j, eps):
    """Max abs gap between edge-region marginalizations and node beliefs."""
    V, L = theta_n.shape
    E = edge_i.shape[0]
    mu_n = np.empty((V, L))
    _node_marginals(theta_n, lam, edge_i, edge_j, eps, mu_n)
    b = np.empty((L, L))
    worst = 0.0
    for e in range(E):
        mx = -np.inf
        for yi in range(L):
            for yj in range(L):
                b[yi, yj] = (theta_e[e, yi, yj] + lam[e, 0, yi]
                             + lam[e, 1, yj]) / eps
                if b[yi, yj] > mx:
                    mx = b[yi, yj]
        z = 0.0
        for yi in range(L):
            for yj in range(L):
                b[yi, yj] = np.exp(b[yi, yj] - mx)
                z += b[yi, yj]
        i = edge_i[e]
        j = edge_j[e]
        for yi in range(L):
            s = 0.0
            for yj in range(L):
                s += b[yi, yj]
            d = abs(s / z - mu_n[i, yi])
            if d > worst:
                worst = d
        for yj in range(L):
            s = 0.0
            for yi in range(L):
                s += b[yi, yj]
            d = abs(s / z - mu_n[j, yj])
            if d > worst:
                worst = d
    return worst


@njit(**_NJIT)
def _greedy_sweep(theta_n, theta_e, lam, ptr, idx, side, edge_i, edge_j,
                  eps, maxdeg):
    """num_vars updates, each at the currently most-disagreeing node.

    Disagreement per node is the max abs gap between its belief and the
    marginalizations of its incident edges; scores of touched nodes are
    refreshed after every update.  Costs O(V) bookkeeping per update.
    """
    V, L = theta_n.shape
    a = np.empty(L)
    b = np.empty((L, L))
    logm = np.empty((max(maxdeg, 1), L))
    score = np.empty(V)
    for v in range(V):
        score[v] = _node_disagreement(v, theta_n, theta_e, lam, ptr, idx,
                                      side, eps, a, b)
    for _ in range(V):
        best = 0
        for v in range(1, V):
            if score[v] > score[best]:
                best = v
        _update_node(best, theta_n, theta_e, lam, ptr, idx, side, eps,
                     a, b, logm)
        # only nodes touching the rewritten messages change score
        for t in range(ptr[best], ptr[best + 1]):
            e = idx[t]
            score[edge_i[e]] = _node_disagreement(
                edge_i[e], theta_n, theta_e, lam, ptr, idx, side, eps, a, b)
            score[edge_j[e]] = _node_disagreement(
                edge_j[e], theta_n, theta_e, lam, ptr, idx, side, eps, a, b)
        score[best] = _node_disagreement(best, theta_n, theta_e, lam, ptr,
                                         idx, side, eps, a, b)


@njit(**_NJIT)
def _node_disagreement(v, theta_n, theta_e, lam, ptr, idx, side, eps, a, b):
    L = theta_n.shape[1]
    lo = ptr[v]
    hi = ptr[v + 1]
    for y in range(L):
        a[y] = theta_n[v, y]
    for t in range(lo, hi):
        e = idx[t]
        sd = side[t]
        for y in range(L):
            a[y] -= lam[e, sd, y]
    mx = a[0] / eps
    for y in range(L):
        a[y] = a[y] / eps
        if a[y] > mx:
            mx = a[y]
    z = 0.0
    for y in range(L):
        a[y] = np.exp(a[y] - mx)
        z += a[y]
    for y in range(L):
        a[y] /= z
    worst = 0.0
    for t in range(lo, hi):
        e = idx[t]
        sd = side[t]
        bmx = -np.inf
        for yi in range(L):
            for yj in range(L):
                b[yi, yj] = (theta_e[e, yi, yj] + lam[e, 0, yi]
                             + lam[e, 1, yj]) / eps
                if b[yi, yj] > bmx:
                    bmx = b[yi, yj]
        zz = 0.0
        for yi in range(L):
            for yj in range(L):
                b[yi, yj] = np.exp(b[yi, yj] - bmx)
                zz += b[yi, yj]
        for y in range(L):
            s = 0.0
            if sd == 0:
                for yj in range(L):
                    s += b[y, yj]
            else:
                for yi in range(L):
                    s += b[yi, y]
            d = abs(s / zz - a[y])
            if d > worst:
                worst = d
    return worst
