"""Shared randomized-structure helpers for the test suite."""

import numpy as np

from structlogit import Potentials, RegionGraph


def random_tree(rng, n: int, num_labels: int) -> RegionGraph:
    """Uniform random labeled tree on n nodes (random parent attachment)."""
    edges = []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.append((u, v))
    return RegionGraph(n, num_labels, edges)


def random_graph(rng, n: int, num_labels: int, extra_edges: int = 0):
    """Random connected graph: a tree plus ``extra_edges`` chords."""
    g = random_tree(rng, n, num_labels)
    present = {(int(i), int(j)) for i, j in zip(g.edge_i, g.edge_j)}
    edges = sorted(present)
    tries = 0
    while extra_edges > 0 and tries < 200:
        tries += 1
        i, j = rng.integers(0, n, size=2)
        i, j = int(min(i, j)), int(max(i, j))
        if i == j or (i, j) in present:
            continue
        present.add((i, j))
        edges.append((i, j))
        extra_edges -= 1
    return RegionGraph(n, num_labels, edges)


def random_theta(rng, graph: RegionGraph, scale: float = 1.0) -> Potentials:
    L = graph.num_labels
    return Potentials(
        scale * rng.standard_normal((graph.num_vars, L)),
        scale * rng.standard_normal((graph.num_edges, L, L)))
