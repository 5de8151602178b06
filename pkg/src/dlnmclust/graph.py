"""Areal adjacency graph and intrinsic CAR quantities."""
from __future__ import annotations

from collections import deque
from typing import Iterable, Sequence

import numpy as np


class AdjacencyGraph:
    """Undirected contiguity graph on ``n`` areas (0-based internally).

    Weights are row-normalised, ``w_ij = 1 / n(i)`` for neighbours, so the CAR
    conditional mean is the neighbour average.
    """

    def __init__(self, n: int, neighbors: Sequence[Sequence[int]]):
        self.n = int(n)
        self.neighbors = [tuple(sorted(set(int(j) for j in nb))) for nb in neighbors]
        if len(self.neighbors) != self.n:
            raise ValueError("need one neighbour list per area")
        for i, nb in enumerate(self.neighbors):
            if i in nb:
                raise ValueError(f"self-loop at area {i + 1}")
            for j in nb:
                if not 0 <= j < self.n:
                    raise ValueError(f"neighbour index {j + 1} out of range")
                if i not in self.neighbors[j]:
                    raise ValueError("neighbour relation must be symmetric")
        self.n_neighbors = np.array([len(nb) for nb in self.neighbors], dtype=int)
        self.isolated = self.n_neighbors == 0
        maxdeg = max(1, int(self.n_neighbors.max(initial=0)))
        # padded neighbour table; padding points at a sentinel slot n
        self.nbr_index = np.full((self.n, maxdeg), self.n, dtype=int)
        for i, nb in enumerate(self.neighbors):
            self.nbr_index[i, : len(nb)] = nb
        self.components = self._components()
        self.colors = self._greedy_coloring()

    def __repr__(self):
        return f"AdjacencyGraph(n={self.n}, edges={len(self.edges())})"

    def __eq__(self, other):
        return isinstance(other, AdjacencyGraph) and self.n == other.n and self.neighbors == other.neighbors

    def edges(self) -> list:
        """Undirected edges ``(i, j)`` with ``i < j``, 0-based."""
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]

    def weight_matrix(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.neighbors):
            if nb:
                W[i, list(nb)] = 1.0 / len(nb)
        return W

    def neighbor_sums(self, field, rows=None) -> np.ndarray:
        padded = np.append(np.asarray(field, dtype=float), 0.0)
        idx = self.nbr_index if rows is None else self.nbr_index[rows]
        return padded[idx].sum(axis=1)

    def _components(self) -> list:
        """Connected components with at least one edge; isolated areas excluded."""
        seen = np.zeros(self.n, dtype=bool)
        comps = []
        for s in range(self.n):
            if seen[s] or self.isolated[s]:
                continue
            comp, queue = [], deque([s])
            seen[s] = True
            while queue:
                i = queue.popleft()
                comp.append(i)
                for j in self.neighbors[i]:
                    if not seen[j]:
                        seen[j] = True
                        queue.append(j)
            comps.append(np.array(sorted(comp)))
        return comps

    def _greedy_coloring(self) -> list:
        """Independent sets covering all areas (greedy colouring in index order)."""
        color = np.full(self.n, -1)
        for i in range(self.n):
            used = {color[j] for j in self.neighbors[i]}
            c = 0
            while c in used:
                c += 1
            color[i] = c
        return [np.flatnonzero(color == c) for c in range(color.max() + 1)]

    @property
    def car_rank(self) -> int:
        """Rank of the intrinsic CAR precision: non-isolated areas minus components."""
        return int((~self.isolated).sum()) - len(self.components)

    def component_of(self) -> np.ndarray:
        """Component label per area, ``-1`` for isolated areas."""
        lab = np.full(self.n, -1)
        for k, comp in enumerate(self.components):
            lab[comp] = k
        return lab


def load_adjacency(edge_list: Iterable, n: int) -> AdjacencyGraph:
    """Build a graph from 1-based ``(i, j)`` pairs; duplicates and reversed pairs collapse."""
    nbrs = [set() for _ in range(n)]
    for pair in edge_list:
        i, j = (int(v) for v in pair)
        if not (1 <= i <= n and 1 <= j <= n):
            raise ValueError(f"edge ({i}, {j}) has an index outside 1..{n}")
        if i == j:
            raise ValueError(f"self-loop at area {i}")
        nbrs[i - 1].add(j - 1)
        nbrs[j - 1].add(i - 1)
    return AdjacencyGraph(n, nbrs)


def grid_graph(n_rows: int, n_cols: int) -> AdjacencyGraph:
    """Rook-contiguity lattice; area index is ``row * n_cols + col``."""
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c + 1
            if c + 1 < n_cols:
                edges.append((i, i + 1))
            if r + 1 < n_rows:
                edges.append((i, i + n_cols))
    return load_adjacency(edges, n_rows * n_cols)


def path_graph(n: int) -> AdjacencyGraph:
    return load_adjacency([(i, i + 1) for i in range(1, n)], n)


def car_conditional(i: int, field, graph: AdjacencyGraph, sigma2: float) -> tuple:
    """Mean and variance of ``u_i | u_-i`` (0-based ``i``)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if graph.isolated[i]:
        raise ValueError(f"area {i + 1} has no neighbours")
    nb = graph.neighbors[i]
    field = np.asarray(field, dtype=float)
    return float(field[list(nb)].mean()), sigma2 / len(nb)


def car_quadratic(field, graph: AdjacencyGraph) -> float:
    """Sum of squared differences over undirected edges."""
    u = np.asarray(field, dtype=float)
    e = np.array(graph.edges(), dtype=int).reshape(-1, 2)
    return float(((u[e[:, 0]] - u[e[:, 1]]) ** 2).sum())


def car_log_density(field, graph: AdjacencyGraph, sigma2: float) -> float:
    """Pairwise-difference log density without any normalising term."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return -car_quadratic(field, graph) / (2.0 * sigma2)
