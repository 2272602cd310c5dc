"""Region graphs over discrete variables.

A region graph couples unary regions (one per variable) with pairwise
regions (one per edge).  Regions are indexed in a single flat order:
nodes first, ``0 .. num_vars - 1``, then edges,
``num_vars .. num_vars + num_edges - 1``.  Every variable takes a label
in ``0 .. num_labels - 1`` and all variables share the same label count.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RegionGraph", "build_grid", "region_count_of_configs"]


class RegionGraph:
    """Variables plus a set of pairwise edges, with incidence indexes.

    Parameters
    ----------
    num_vars : int
        Number of variables, at least 1.
    num_labels : int
        Labels per variable, at least 2.
    edges : sequence of (int, int)
        Pairwise regions as ordered variable pairs.  Pairs must be
        distinct as sets and both endpoints must differ.

    Attributes
    ----------
    edge_i, edge_j : ndarray of int64, shape (num_edges,)
        Endpoint variables of each edge, in construction order.
    node_edge_ptr, node_edge_idx, node_edge_side : ndarray of int64
        CSR-style incidence: edges touching variable ``v`` are
        ``node_edge_idx[node_edge_ptr[v]:node_edge_ptr[v+1]]`` and
        ``node_edge_side`` says whether ``v`` is endpoint 0 or 1 there.
    """

    def __init__(self, num_vars: int, num_labels: int, edges) -> None:
        if num_vars < 1:
            raise ValueError(f"num_vars must be >= 1, got {num_vars}")
        if num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {num_labels}")
        self.num_vars = int(num_vars)
        self.num_labels = int(num_labels)

        seen = set()
        ei, ej = [], []
        for k, (i, j) in enumerate(edges):
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"edge {k} is a self-loop at variable {i}")
            if not (0 <= i < num_vars and 0 <= j < num_vars):
                raise ValueError(f"edge {k} ({i}, {j}) out of range")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {k} ({i}, {j})")
            seen.add(key)
            ei.append(i)
            ej.append(j)
        self.edge_i = np.asarray(ei, dtype=np.int64)
        self.edge_j = np.asarray(ej, dtype=np.int64)

        # CSR incidence over variables, edges listed in index order.
        deg = np.zeros(num_vars, dtype=np.int64)
        np.add.at(deg, self.edge_i, 1)
        np.add.at(deg, self.edge_j, 1)
        ptr = np.zeros(num_vars + 1, dtype=np.int64)
        np.cumsum(deg, out=ptr[1:])
        idx = np.empty(ptr[-1], dtype=np.int64)
        side = np.empty(ptr[-1], dtype=np.int64)
        fill = ptr[:-1].copy()
        for e in range(self.num_edges):
            for s, v in enumerate((self.edge_i[e], self.edge_j[e])):
                idx[fill[v]] = e
                side[fill[v]] = s
                fill[v] += 1
        self.node_edge_ptr = ptr
        self.node_edge_idx = idx
        self.node_edge_side = side

    @property
    def num_edges(self) -> int:
        return self.edge_i.shape[0]

    @property
    def num_regions(self) -> int:
        return self.num_vars + self.num_edges

    def degree(self, v: int) -> int:
        """Number of edges incident to variable ``v``."""
        return int(self.node_edge_ptr[v + 1] - self.node_edge_ptr[v])

    def incident_edges(self, v: int) -> np.ndarray:
        """Indices of edges touching variable ``v``."""
        return self.node_edge_idx[self.node_edge_ptr[v]:self.node_edge_ptr[v + 1]]

    def region_vars(self, r: int) -> tuple[int, ...]:
        """Variables covered by region ``r`` (nodes first, then edges)."""
        if not (0 <= r < self.num_regions):
            raise ValueError(f"region {r} out of range")
        if r < self.num_vars:
            return (r,)
        e = r - self.num_vars
        return (int(self.edge_i[e]), int(self.edge_j[e]))

    def children_of(self, r: int) -> list[int]:
        """Regions strictly contained in region ``r``."""
        if r < self.num_vars:
            return []
        return list(self.region_vars(r))

    def parents_of(self, r: int) -> list[int]:
        """Regions strictly containing region ``r``."""
        if r >= self.num_vars:
            return []
        return [self.num_vars + int(e) for e in self.incident_edges(r)]

    def __repr__(self) -> str:
        return (f"RegionGraph(num_vars={self.num_vars}, "
                f"num_labels={self.num_labels}, num_edges={self.num_edges})")


def build_grid(width: int, height: int, num_labels: int) -> RegionGraph:
    """4-connected grid graph with row-major variable order.

    Variable ``(x, y)`` has index ``y * width + x``.  Edges are emitted
    per cell in row-major order: right neighbor first, then down
    neighbor, so the edge list order is deterministic.
    """
    if width < 1 or height < 1:
        raise ValueError(f"grid dims must be >= 1, got {width}x{height}")
    edges = []
    for y in range(height):
        for x in range(width):
            v = y * width + x
            if x + 1 < width:
                edges.append((v, v + 1))
            if y + 1 < height:
                edges.append((v, v + width))
    g = RegionGraph(width * height, num_labels, edges)
    g.grid_dims = (width, height)
    return g


def region_count_of_configs(graph: RegionGraph, r: int) -> int:
    """Number of joint label configurations of region ``r``."""
    return graph.num_labels ** len(graph.region_vars(r))
