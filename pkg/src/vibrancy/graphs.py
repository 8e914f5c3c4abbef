"""Weighted sensor graphs for subway, volume and speed style networks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .io import read_csv, write_csv


class GraphError(ValueError):
    pass


@dataclass
class SensorGraph:
    n_s: int
    edges: list = field(default_factory=list)  # (src, dst, weight)
    coords: np.ndarray | None = None

    def __post_init__(self) -> None:
        for s, d, w in self.edges:
            if not (0 <= s < self.n_s and 0 <= d < self.n_s):
                raise GraphError(f"edge ({s}, {d}) outside [0, {self.n_s})")
            if s == d:
                raise GraphError(f"self-loop on node {s}")
            if not 0.0 < w <= 1.0:
                raise GraphError(f"edge ({s}, {d}) weight {w} not in (0, 1]")

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_s, self.n_s))
        for s, d, w in self.edges:
            A[s, d] = w
        return A

    def is_symmetric(self) -> bool:
        A = self.adjacency()
        return bool(np.array_equal(A, A.T))

    def symmetrized(self) -> "SensorGraph":
        A = self.adjacency()
        return _from_dense(np.maximum(A, A.T), self.coords)


def _from_dense(A: np.ndarray, coords=None) -> SensorGraph:
    src, dst = np.nonzero(A)
    edges = [(int(s), int(d), float(A[s, d])) for s, d in zip(src, dst)]
    return SensorGraph(A.shape[0], edges, coords)


def build_adjacency_graph(pairs: Iterable[tuple[int, int]], n_s: int | None = None) -> SensorGraph:
    """Undirected unit-weight graph (line neighbours plus transfers)."""
    pairs = [(int(a), int(b)) for a, b in pairs]
    if n_s is None:
        n_s = max((max(a, b) for a, b in pairs), default=-1) + 1
    for a, b in pairs:
        if not (0 <= a < n_s and 0 <= b < n_s):
            raise GraphError(f"pair ({a}, {b}) outside [0, {n_s})")
    A = np.zeros((n_s, n_s))
    for a, b in pairs:
        if a != b:
            A[a, b] = A[b, a] = 1.0
    return _from_dense(A)


def build_proximity_graph(coords: np.ndarray, k: int = 4) -> SensorGraph:
    """k-nearest-neighbour graph (Euclidean), symmetrized by union, unit weights."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if k <= 0:
        raise GraphError("k must be positive")
    if k >= n:
        raise GraphError(f"k={k} must be smaller than the number of sensors {n}")
    d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    A = np.zeros((n, n))
    for i in range(n):
        # stable: ties resolved by index
        for j in np.argsort(d[i], kind="stable")[:k]:
            A[i, j] = A[j, i] = 1.0
    return _from_dense(A, coords)


def build_distance_graph(dists: Mapping[tuple[int, int], float] | np.ndarray, sigma: float | None = None,
                         threshold: float = 0.1, n_s: int | None = None) -> SensorGraph:
    """Directed Gaussian-kernel graph ``exp(-(dist / sigma)^2)`` pruned below ``threshold``.

    ``dists`` is either ``{(src, dst): distance}`` or a dense matrix where
    ``inf``/``nan`` marks missing pairs. ``sigma`` defaults to the std of the
    observed distances.
    """
    if isinstance(dists, np.ndarray):
        D = np.asarray(dists, dtype=np.float64)
        n_s = D.shape[0]
        pairs = {(int(i), int(j)): float(D[i, j]) for i, j in zip(*np.nonzero(np.isfinite(D))) if i != j}
    else:
        pairs = {(int(i), int(j)): float(v) for (i, j), v in dists.items() if i != j}
        if n_s is None:
            n_s = max((max(k) for k in pairs), default=-1) + 1
    if any(v < 0 for v in pairs.values()):
        raise GraphError("negative distance")
    if sigma is None:
        sigma = float(np.std(list(pairs.values()))) if pairs else 1.0
    if sigma <= 0:
        raise GraphError("sigma must be positive")
    edges = []
    for (i, j), dist in sorted(pairs.items()):
        if not (0 <= i < n_s and 0 <= j < n_s):
            raise GraphError(f"pair ({i}, {j}) outside [0, {n_s})")
        w = math.exp(-((dist / sigma) ** 2))
        if w >= threshold and w > 0.0:
            edges.append((i, j, w))
    return SensorGraph(n_s, edges)


def transition_matrices(adj: SensorGraph | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward ``D_out^-1 A`` and backward ``D_in^-1 A^T`` random-walk matrices.

    Rows of nodes without outgoing (resp. incoming) weight stay zero.
    """
    A = adj.adjacency() if isinstance(adj, SensorGraph) else np.asarray(adj, dtype=np.float64)

    def _rownorm(M):
        deg = M.sum(axis=1, keepdims=True)
        return np.divide(M, deg, out=np.zeros_like(M), where=deg > 0)

    return _rownorm(A), _rownorm(A.T)


def write_edges_csv(path, graph: SensorGraph) -> None:
    write_csv(path, ["src", "dst", "weight"], [(s, d, repr(float(w))) for s, d, w in graph.edges])


def read_edges_csv(path, n_s: int) -> SensorGraph:
    rows = read_csv(path)
    return SensorGraph(n_s, [(int(r["src"]), int(r["dst"]), float(r["weight"])) for r in rows])


def write_coords_csv(path, coords: np.ndarray, ids=None) -> None:
    ids = ids if ids is not None else range(len(coords))
    write_csv(path, ["id", "x", "y"], [(i, repr(float(x)), repr(float(y))) for i, (x, y) in zip(ids, coords)])


def read_coords_csv(path) -> tuple[list[str], np.ndarray]:
    rows = read_csv(path)
    return [r["id"] for r in rows], np.array([[float(r["x"]), float(r["y"])] for r in rows])
