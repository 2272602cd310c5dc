"""Surrogate losses over a region graph.

A model assigns each region a score table ``g``.  Its energy at a
labeling is ``F(y) = eps * sum_a g_a(y_a)``, and training minimizes the
smoothed upper bound

    l(g) = -F(y*) + A(eps * g + Delta)

where ``Delta`` is a Hamming loss table and ``A`` is the
entropy-smoothed LP value computed by message passing.  Energies are
plain finite floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import RegionGraph
from .inference import (Messages, Potentials, SmoothingConfig, dual_objective,
                        run_message_passing)

__all__ = [
    "LossTables", "hamming_tables", "build_theta", "energy",
    "smoothed_loss", "empirical_risk", "entropy_cap", "exhaustive_l1",
]


@dataclass
class LossTables:
    """Per-region loss tables, same layout as Potentials."""

    nodes: np.ndarray
    edges: np.ndarray

    @classmethod
    def zeros(cls, graph: RegionGraph) -> "LossTables":
        L = graph.num_labels
        return cls(np.zeros((graph.num_vars, L)),
                   np.zeros((graph.num_edges, L, L)))


def _check_gold(graph: RegionGraph, gold: np.ndarray) -> np.ndarray:
    gold = np.asarray(gold)
    if gold.shape != (graph.num_vars,):
        raise ValueError(f"gold labeling shape {gold.shape}, "
                         f"want ({graph.num_vars},)")
    if gold.min() < 0 or gold.max() >= graph.num_labels:
        raise ValueError("gold labels out of range")
    return gold.astype(np.int64)


def hamming_tables(graph: RegionGraph, gold: np.ndarray) -> LossTables:
    """Node-decomposed Hamming loss: 1 per mislabeled variable.

    Edge tables stay zero so the total over regions counts each
    variable exactly once.
    """
    gold = _check_gold(graph, gold)
    delta = LossTables.zeros(graph)
    delta.nodes[:] = 1.0
    delta.nodes[np.arange(graph.num_vars), gold] = 0.0
    return delta


def build_theta(graph: RegionGraph, scores: Potentials, delta: LossTables,
                eps: float) -> Potentials:
    """Loss-augmented inference tables ``theta = eps * g + Delta``."""
    if not (eps > 0 and np.isfinite(eps)):
        raise ValueError(f"eps must be positive, got {eps}")
    return Potentials(eps * scores.nodes + delta.nodes,
                      eps * scores.edges + delta.edges)


def energy(graph: RegionGraph, scores: Potentials, labeling: np.ndarray,
           eps: float) -> float:
    """Model energy ``F(y) = eps * sum_a g_a(y_a)``."""
    y = _check_gold(graph, labeling)
    val = scores.nodes[np.arange(graph.num_vars), y].sum()
    if graph.num_edges:
        val += scores.edges[np.arange(graph.num_edges),
                            y[graph.edge_i], y[graph.edge_j]].sum()
    return float(eps * val)


def smoothed_loss(graph: RegionGraph, gold: np.ndarray, scores: Potentials,
                  eps: float, config: SmoothingConfig | None = None) -> float:
    """Loss-augmented smoothed LP loss of one example.

    Runs message passing from zero messages on ``eps * g + Delta`` and
    returns ``-F(gold) + dual``.  The dual upper-bounds the true
    smoothed value, so an unconverged run still yields a valid upper
    bound on the loss.
    """
    if config is None:
        config = SmoothingConfig(epsilon=eps, max_iters=1000,
                                 agreement_tol=1e-10)
    elif config.epsilon != eps:
        raise ValueError(
            f"config.epsilon ({config.epsilon}) != eps ({eps})")
    gold = _check_gold(graph, gold)
    theta = build_theta(graph, scores, hamming_tables(graph, gold), eps)
    lam, _, _ = run_message_passing(graph, theta, Messages.zeros(graph),
                                    config)
    return -energy(graph, scores, gold, eps) + dual_objective(
        graph, theta, lam, config.epsilon)


def empirical_risk(examples, scores_of, eps: float,
                   config: SmoothingConfig | None = None) -> float:
    """Mean smoothed loss over ``examples``.

    ``scores_of`` maps an example to its Potentials; examples carry
    ``graph`` and ``gold`` attributes.
    """
    total = 0.0
    n = 0
    for ex in examples:
        total += smoothed_loss(ex.graph, ex.gold, scores_of(ex), eps, config)
        n += 1
    if n == 0:
        raise ValueError("empirical risk over an empty collection")
    return total / n


def entropy_cap(graph: RegionGraph) -> float:
    """Max total region entropy: sum over regions of log table size.

    Bounds the smoothing gap: l1 <= l <= l1 + eps * entropy_cap.
    """
    L = graph.num_labels
    return float(graph.num_vars * np.log(L)
                 + graph.num_edges * np.log(L * L))


def _is_acyclic(graph: RegionGraph) -> bool:
    parent = list(range(graph.num_vars))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in range(graph.num_edges):
        ra, rb = find(int(graph.edge_i[e])), find(int(graph.edge_j[e]))
        if ra == rb:
            return False
        parent[ra] = rb
    return True


def _all_labelings(n: int, L: int) -> np.ndarray:
    m = L ** n
    idx = np.arange(m)
    cols = [(idx // L ** (n - 1 - v)) % L for v in range(n)]
    return np.stack(cols, axis=1)


def exhaustive_l1(graph: RegionGraph, gold: np.ndarray, scores: Potentials,
                  eps: float) -> float:
    """Unsmoothed LP loss by enumeration; exact on acyclic graphs.

    l1 = -F(gold) + max_y [F(y) + Hamming(gold, y)].  The LP relaxation
    is tight on trees, so enumerating labelings gives the LP value
    there.  Refuses cyclic graphs and more than 12 variables.
    """
    if not _is_acyclic(graph):
        raise ValueError("exhaustive_l1 requires an acyclic graph")
    if graph.num_vars > 12:
        raise ValueError("exhaustive_l1 limited to <= 12 variables")
    gold = _check_gold(graph, gold)
    V, E, L = graph.num_vars, graph.num_edges, graph.num_labels

    lab = _all_labelings(V, L)
    val = np.zeros(lab.shape[0])
    for v in range(V):
        val += eps * scores.nodes[v, lab[:, v]]
        val += lab[:, v] != gold[v]
    for e in range(E):
        val += eps * scores.edges[e, lab[:, graph.edge_i[e]],
                                  lab[:, graph.edge_j[e]]]
    return float(val.max()) - energy(graph, scores, gold, eps)
