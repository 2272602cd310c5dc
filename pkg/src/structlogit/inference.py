"""Entropy-smoothed LP inference by dual block coordinate descent.

The smoothed value of a scoring table ``theta`` over a region graph is

    A(theta) = max_{mu in M} theta . mu + eps * sum_a H(mu_a)

where ``M`` is the local polytope (each region's table is a normalized
distribution and every edge table marginalizes to its endpoint node
tables) and ``H`` is entropy.  Dualizing the marginalization constraints
with messages ``lam`` gives a smooth unconstrained upper bound

    A(lam, theta) = sum_a eps * logsumexp(reparam_a / eps)

with reparameterized tables ``theta_v - sum_e lam_e`` at nodes and
``theta_e + lam_e(y_i) + lam_e(y_j)`` at edges.  ``star_update`` is the
exact minimizer of this bound over the block of messages incident to
one node, so each update can only tighten the bound; agreement of the
exponentiated beliefs certifies optimality.

All log-sum-exp work happens in the log domain with max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .graph import RegionGraph

__all__ = [
    "Potentials", "Messages", "Pseudomarginals", "SmoothingConfig",
    "compute_marginals", "dual_objective", "star_update",
    "run_message_passing", "agreement_residual", "primal_objective",
    "decode", "brute_smoothed_value",
]

SCHEDULES = ("sweep", "random", "greedy")


@dataclass
class Potentials:
    """Scoring tables, one per region: ``nodes`` (V, L), ``edges`` (E, L, L).

    Edge tables are indexed ``edges[e, y_i, y_j]`` with ``y_i`` the label
    of the first endpoint.
    """

    nodes: np.ndarray
    edges: np.ndarray

    @classmethod
    def zeros(cls, graph: RegionGraph) -> "Potentials":
        L = graph.num_labels
        return cls(np.zeros((graph.num_vars, L)),
                   np.zeros((graph.num_edges, L, L)))

    def table(self, graph: RegionGraph, r: int) -> np.ndarray:
        """Table of region ``r`` in the flat nodes-then-edges order."""
        if r < graph.num_vars:
            return self.nodes[r]
        return self.edges[r - graph.num_vars]

    def copy(self) -> "Potentials":
        return Potentials(self.nodes.copy(), self.edges.copy())


@dataclass
class Messages:
    """Dual variables ``lam[e, side, y]``: what edge ``e`` tells endpoint
    ``side`` (0 for ``edge_i``, 1 for ``edge_j``) about label ``y``."""

    lam: np.ndarray

    @classmethod
    def zeros(cls, graph: RegionGraph) -> "Messages":
        return cls(np.zeros((graph.num_edges, 2, graph.num_labels)))

    def copy(self) -> "Messages":
        return Messages(self.lam.copy())


@dataclass
class Pseudomarginals:
    """Normalized belief tables per region; rows live on the simplex."""

    nodes: np.ndarray
    edges: np.ndarray

    def table(self, graph: RegionGraph, r: int) -> np.ndarray:
        if r < graph.num_vars:
            return self.nodes[r]
        return self.edges[r - graph.num_vars]


@dataclass
class SmoothingConfig:
    """Knobs for message passing.

    ``schedule`` picks the node visit order: "sweep" is ascending index
    order (row-major on grids), "random" reshuffles each pass with
    ``seed``, "greedy" always updates the most-disagreeing node and
    costs an O(V) scan per update.
    """

    epsilon: float = 0.1
    max_iters: int = 25
    agreement_tol: float = 1e-6
    schedule: str = "sweep"
    seed: int = 0

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


def _check(graph: RegionGraph, theta: Potentials, lam: Messages | None,
           eps: float) -> None:
    V, E, L = graph.num_vars, graph.num_edges, graph.num_labels
    if theta.nodes.shape != (V, L):
        raise ValueError(f"theta.nodes shape {theta.nodes.shape}, "
                         f"want {(V, L)}")
    if theta.edges.shape != (E, L, L):
        raise ValueError(f"theta.edges shape {theta.edges.shape}, "
                         f"want {(E, L, L)}")
    if not (np.all(np.isfinite(theta.nodes))
            and np.all(np.isfinite(theta.edges))):
        raise ValueError("theta contains non-finite entries")
    if lam is not None:
        if lam.lam.shape != (E, 2, L):
            raise ValueError(f"messages shape {lam.lam.shape}, "
                             f"want {(E, 2, L)}")
        if not np.all(np.isfinite(lam.lam)):
            raise ValueError("messages contain non-finite entries")
    if not (eps > 0 and np.isfinite(eps)):
        raise ValueError(f"eps must be positive, got {eps}")


def _reparam(graph: RegionGraph, theta: Potentials, lam: Messages):
    """Node and edge tables with messages folded in."""
    node = theta.nodes.copy()
    np.subtract.at(node, graph.edge_i, lam.lam[:, 0, :])
    np.subtract.at(node, graph.edge_j, lam.lam[:, 1, :])
    edge = theta.edges + lam.lam[:, 0, :, None] + lam.lam[:, 1, None, :]
    return node, edge


def _log_softmax(a: np.ndarray) -> np.ndarray:
    """Log-normalize over all axes but the first."""
    flat = a.reshape(a.shape[0], -1)
    mx = flat.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(flat - mx).sum(axis=1, keepdims=True))
    return (flat - lse).reshape(a.shape)


def compute_marginals(graph: RegionGraph, theta: Potentials, lam: Messages,
                      eps: float) -> Pseudomarginals:
    """Beliefs of the current reparameterization, one table per region.

    Each table is the softmax of its reparameterized scores at
    temperature ``eps``.  At a fixed point of message passing these are
    the maximizing pseudomarginals of the smoothed LP.
    """
    _check(graph, theta, lam, eps)
    node, edge = _reparam(graph, theta, lam)
    return Pseudomarginals(np.exp(_log_softmax(node / eps)),
                           np.exp(_log_softmax(edge / eps)))


def dual_objective(graph: RegionGraph, theta: Potentials, lam: Messages,
                   eps: float) -> float:
    """Value of the smooth dual bound at the given messages."""
    _check(graph, theta, lam, eps)
    node, edge = _reparam(graph, theta, lam)
    total = 0.0
    for a in (node / eps, edge.reshape(graph.num_edges, -1) / eps):
        if a.shape[0] == 0:
            continue
        mx = a.max(axis=1)
        total += eps * float(
            (mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))).sum())
    return total


def star_update(graph: RegionGraph, theta: Potentials, lam: Messages,
                node: int, eps: float) -> Messages:
    """Exact minimization of the dual over all messages at one node.

    Returns fresh messages; the input is untouched.  After the update
    the node's belief and the side marginals of its incident edges all
    agree (they equal the geometric mean of the old beliefs).
    """
    _check(graph, theta, lam, eps)
    if not (0 <= node < graph.num_vars):
        raise ValueError(f"node {node} out of range")
    out = lam.copy()
    L = graph.num_labels
    maxdeg = max(int(np.diff(graph.node_edge_ptr).max()), 1) \
        if graph.num_edges else 1
    _kernels._update_node(
        node, theta.nodes, theta.edges, out.lam, graph.node_edge_ptr,
        graph.node_edge_idx, graph.node_edge_side, eps,
        np.empty(L), np.empty((L, L)), np.empty((maxdeg, L)))
    return out


def agreement_residual(graph: RegionGraph, mu: Pseudomarginals) -> float:
    """Max abs gap between edge marginalizations and node beliefs."""
    if graph.num_edges == 0:
        return 0.0
    ri = np.abs(mu.edges.sum(axis=2) - mu.nodes[graph.edge_i]).max()
    rj = np.abs(mu.edges.sum(axis=1) - mu.nodes[graph.edge_j]).max()
    return float(max(ri, rj))


def run_message_passing(graph: RegionGraph, theta: Potentials,
                        messages: Messages,
                        config: SmoothingConfig) -> tuple[Messages, int, float]:
    """Sweeps of star updates until beliefs agree or the budget runs out.

    Returns ``(messages, sweeps_used, final_residual)``.  The input
    messages are not mutated.  A zero-edge graph is already optimal.
    Each full sweep visits every node once (the greedy schedule performs
    ``num_vars`` updates per sweep).
    """
    _check(graph, theta, messages, config.epsilon)
    lam = messages.copy()
    eps = config.epsilon
    if graph.num_edges == 0 or config.max_iters == 0:
        resid = _residual_of(graph, theta, lam, eps)
        return lam, 0, resid

    resid = _residual_of(graph, theta, lam, eps)
    if resid <= config.agreement_tol:
        return lam, 0, resid

    args = (theta.nodes, theta.edges, lam.lam, graph.node_edge_ptr,
            graph.node_edge_idx, graph.node_edge_side)
    maxdeg = int(np.diff(graph.node_edge_ptr).max())
    rng = np.random.default_rng(config.seed)
    sweeps = 0
    for _ in range(config.max_iters):
        if config.schedule == "sweep":
            order = np.arange(graph.num_vars, dtype=np.int64)
            _kernels._sweep(order, *args, eps, maxdeg)
        elif config.schedule == "random":
            order = rng.permutation(graph.num_vars).astype(np.int64)
            _kernels._sweep(order, *args, eps, maxdeg)
        else:
            _kernels._greedy_sweep(theta.nodes, theta.edges, lam.lam,
                                   graph.node_edge_ptr, graph.node_edge_idx,
                                   graph.node_edge_side, graph.edge_i,
                                   graph.edge_j, eps, maxdeg)
        sweeps += 1
        resid = _residual_of(graph, theta, lam, eps)
        if resid <= config.agreement_tol:
            break
    return lam, sweeps, resid


def _residual_of(graph: RegionGraph, theta: Potentials, lam: Messages,
                 eps: float) -> float:
    if graph.num_edges == 0:
        return 0.0
    return float(_kernels._agreement(theta.nodes, theta.edges, lam.lam,
                                     graph.edge_i, graph.edge_j, eps))


def primal_objective(graph: RegionGraph, mu: Pseudomarginals,
                     theta: Potentials, eps: float) -> float:
    """Smoothed LP objective ``theta . mu + eps * sum_a H(mu_a)``."""
    def ent(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(p > 0, p * np.log(p), 0.0)
        return -float(t.sum())

    val = float((theta.nodes * mu.nodes).sum())
    val += float((theta.edges * mu.edges).sum())
    return val + eps * (ent(mu.nodes) + ent(mu.edges))


def decode(graph: RegionGraph, mu: Pseudomarginals) -> np.ndarray:
    """Per-variable argmax labeling; ties go to the smallest label."""
    return mu.nodes.argmax(axis=1).astype(np.int64)


def _local_polytope(graph: RegionGraph):
    """Equality constraints A x = b of the local polytope, x the
    concatenation of flat node tables then flat edge tables."""
    V, E, L = graph.num_vars, graph.num_edges, graph.num_labels
    dim = V * L + E * L * L
    rows = []
    b = []

    def node_slot(v, y):
        return v * L + y

    def edge_slot(e, yi, yj):
        return V * L + e * L * L + yi * L + yj

    for v in range(V):
        row = np.zeros(dim)
        for y in range(L):
            row[node_slot(v, y)] = 1.0
        rows.append(row)
        b.append(1.0)
    for e in range(E):
        row = np.zeros(dim)
        for yi in range(L):
            for yj in range(L):
                row[edge_slot(e, yi, yj)] = 1.0
        rows.append(row)
        b.append(1.0)
        for y in range(L):
            row = np.zeros(dim)
            for yj in range(L):
                row[edge_slot(e, y, yj)] = 1.0
            row[node_slot(graph.edge_i[e], y)] -= 1.0
            rows.append(row)
            b.append(0.0)
            row = np.zeros(dim)
            for yi in range(L):
                row[edge_slot(e, yi, y)] = 1.0
            row[node_slot(graph.edge_j[e], y)] -= 1.0
            rows.append(row)
            b.append(0.0)
    return np.asarray(rows), np.asarray(b)


def brute_smoothed_value(graph: RegionGraph, theta: Potentials, eps: float,
                         max_iters: int = 500, tol: float = 1e-12) -> float:
    """Reference maximization of the smoothed LP over the local polytope.

    Refuses graphs with more than 8 variables; meant as a slow
    independent check of the dual value, sharing no code with message
    passing.  The engine is an interior-point solve (scipy
    trust-constr) with the exact gradient and Hessian; entropy makes
    plain Euclidean projected gradient hopeless here because the
    curvature spans a factor of exp(range(theta)/eps).  The returned
    value is evaluated after a high-precision Dykstra projection, so it
    is the objective at a genuinely feasible point and therefore a
    valid lower bound on the dual no matter how the solve went.
    """
    from scipy.optimize import Bounds, LinearConstraint, minimize

    _check(graph, theta, None, eps)
    if graph.num_vars > 8:
        raise ValueError("brute force limited to graphs with <= 8 variables")

    V, E, L = graph.num_vars, graph.num_edges, graph.num_labels
    A, b = _local_polytope(graph)
    pinv = np.linalg.pinv(A)

    def project(x, iters=3000, inner_tol=1e-13):
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        z = x
        for _ in range(iters):
            w = z + p
            y = w - pinv @ (A @ w - b)
            p = w - y
            z = np.maximum(y + q, 0.0)
            q = y + q - z
            if (np.abs(A @ z - b).max() < inner_tol
                    and np.abs(y - z).max() < inner_tol):
                break
        return z

    th = np.concatenate([theta.nodes.ravel(), theta.edges.ravel()])

    def value(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(x > 0, x * np.log(x), 0.0).sum()
        return float(th @ x - eps * ent)

    tiny = 1e-300
    x0 = np.concatenate([np.full(V * L, 1.0 / L),
                         np.full(E * L * L, 1.0 / (L * L))])

    # The constraint rows are heavily redundant (normalizations are
    # implied around cycles), which stalls equality-constrained solvers.
    # Work in the null space instead: x = x0 + N z keeps A x = b exact
    # for every z, leaving only x >= 0.
    _, s, vt = np.linalg.svd(A)
    rank = int((s > s[0] * 1e-12).sum())
    N = vt[rank:].T

    def neg(z):
        return -value(x0 + N @ z)

    def neg_grad(z):
        x = x0 + N @ z
        return -(N.T @ (th - eps * (np.log(np.maximum(x, tiny)) + 1.0)))

    def neg_hess(z):
        x = x0 + N @ z
        return (N.T * (eps / np.maximum(x, 1e-16))) @ N

    res = minimize(neg, np.zeros(N.shape[1]), jac=neg_grad, hess=neg_hess,
                   method="trust-constr",
                   constraints=[LinearConstraint(N, -x0, np.inf)],
                   options=dict(gtol=tol, xtol=1e-16, maxiter=max_iters))
    x = project(x0 + N @ res.x)
    best = value(x)

    # The interior point stalls around 1e-5 when the optimum hugs a
    # vertex (theta spread >> eps).  Two additional feasible points
    # tighten the bound.  Every labeling is a polytope vertex:
    if L ** V <= 4096:
        for flat in range(L ** V):
            y = np.array([(flat // L ** v) % L for v in range(V)])
            v = theta.nodes[np.arange(V), y].sum()
            if E:
                v += theta.edges[np.arange(E), y[graph.edge_i],
                                 y[graph.edge_j]].sum()
            best = max(best, float(v))
    # Without edges the polytope is a product of simplexes and entropic
    # mirror ascent contracts linearly for any step with step*eps < 2,
    # polishing the solver point to machine precision:
    if E == 0:
        mu = np.maximum(x.reshape(V, L), 1e-300)
        mu /= mu.sum(axis=1, keepdims=True)
        for _ in range(200):
            grad = theta.nodes - eps * (1.0 + np.log(mu))
            logmu = np.log(mu) + (0.5 / eps) * grad
            logmu -= logmu.max(axis=1, keepdims=True)
            mu = np.exp(logmu)
            mu /= mu.sum(axis=1, keepdims=True)
        best = max(best, value(mu.ravel()))
    return best
