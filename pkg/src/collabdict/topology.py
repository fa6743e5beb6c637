"""Peer-to-peer communication graphs and their consensus weight matrices.

A :class:`Graph` is an undirected, unweighted adjacency matrix.  The consensus
iteration used everywhere in the package is ``W = I - L / S`` where ``L`` is
the graph Laplacian and ``S`` the number of participants.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Graph",
    "WeightMatrix",
    "SpectralReport",
    "build_cycle_inverse_chord",
    "build_complete",
    "build_path",
    "build_random_connected",
    "consensus_weights",
    "spectral_gap",
    "is_connected",
    "relabel",
    "read_edge_list",
    "write_edge_list",
]

_CONTRACTION_EPS = 1e-10


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph on ``size`` nodes labelled ``0..size-1``."""

    size: int
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.adjacency, dtype=float)
        if a.shape != (self.size, self.size):
            raise ValueError(f"adjacency shape {a.shape} does not match size {self.size}")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency must have a zero diagonal")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("adjacency must be binary")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[node])

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges as ``(u, v)`` with ``u < v``."""
        iu, iv = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(u), int(v)) for u, v in zip(iu, iv)]

    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.adjacency

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self) -> int:
        return hash((self.size, self.adjacency.tobytes()))


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Symmetric doubly stochastic consensus matrix."""

    size: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.entries, dtype=float)
        if w.shape != (self.size, self.size):
            raise ValueError(f"weight matrix shape {w.shape} does not match size {self.size}")
        w.setflags(write=False)
        object.__setattr__(self, "entries", w)


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: tuple[float, ...]
    gap: float
    contraction_ok: bool

    @property
    def second_largest_modulus(self) -> float:
        return 1.0 - self.gap


def _from_edges(size: int, edges) -> Graph:
    a = np.zeros((size, size))
    for u, v in edges:
        if u == v:
            continue
        a[u, v] = a[v, u] = 1.0
    return Graph(size, a)


def build_cycle_inverse_chord(size: int) -> Graph:
    """Cycle on Z_p plus the chord ``x <-> x^-1 mod p``.

    Node 0 and the self-inverse residues (1 and p-1) keep only their cycle
    edges, so the graph is 3-regular except at those nodes.
    """
    if size <= 2 or not _is_prime(size):
        raise ValueError(f"cycle with inverse chord needs a prime size > 2, got {size}")
    edges = []
    for x in range(size):
        edges.append((x, (x + 1) % size))
        if x != 0:
            edges.append((x, pow(x, -1, size)))
    return _from_edges(size, edges)


def build_complete(size: int) -> Graph:
    if size <= 2:
        raise ValueError(f"complete graph needs size > 2, got {size}")
    return Graph(size, np.ones((size, size)) - np.eye(size))


def build_path(size: int) -> Graph:
    if size < 2:
        raise ValueError(f"path graph needs size >= 2, got {size}")
    return _from_edges(size, [(i, i + 1) for i in range(size - 1)])


def build_random_connected(size: int, p: float = 0.2, seed=None) -> Graph:
    """Erdos-Renyi graph overlaid on a random spanning tree (always connected)."""
    if size < 2:
        raise ValueError(f"random graph needs size >= 2, got {size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(size)
    edges = [(int(order[i]), int(order[rng.integers(0, i)])) for i in range(1, size)]
    upper = np.triu(rng.random((size, size)) < p, k=1)
    edges += [(int(u), int(v)) for u, v in zip(*np.nonzero(upper))]
    return _from_edges(size, edges)


def consensus_weights(graph: Graph) -> WeightMatrix:
    """``W = I - L / S``; rows and columns sum to one by construction."""
    s = graph.size
    return WeightMatrix(s, np.eye(s) - graph.laplacian() / s)


def spectral_gap(weights: WeightMatrix) -> SpectralReport:
    w = weights.entries
    if not np.allclose(w, w.T, rtol=0.0, atol=1e-12):
        raise ValueError("spectral_gap requires a symmetric weight matrix")
    eig = np.linalg.eigvalsh(w)
    if eig.size == 1:
        return SpectralReport((float(eig[0]),), 1.0, True)
    # principal eigenvalue is the one closest to 1 (the all-ones direction)
    principal = int(np.argmin(np.abs(eig - 1.0)))
    others = np.abs(np.delete(eig, principal))
    second = float(others.max())
    gap = 1.0 - second
    return SpectralReport(tuple(float(e) for e in eig), gap, second < 1.0 - _CONTRACTION_EPS)


def is_connected(graph: Graph) -> bool:
    """Breadth-first search from node 0."""
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            v = int(v)
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == graph.size


def relabel(graph: Graph, seed=None) -> tuple[Graph, np.ndarray]:
    """Randomly permute node labels.

    Returns the relabelled graph and ``perm`` such that old node ``i`` becomes
    new node ``perm[i]``.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(graph.size)
    inv = np.argsort(perm)
    a = graph.adjacency[np.ix_(inv, inv)]
    return Graph(graph.size, a), perm


def write_edge_list(graph: Graph, path) -> None:
    lines = [str(graph.size)] + [f"{u} {v}" for u, v in graph.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 1:
        raise ValueError(f"{path}: first line must hold the node count")
    size = int(rows[0][0])
    edges = []
    for row in rows[1:]:
        if len(row) != 2:
            raise ValueError(f"{path}: malformed edge line {' '.join(row)!r}")
        u, v = int(row[0]), int(row[1])
        if not (0 <= u < size and 0 <= v < size):
            raise ValueError(f"{path}: edge ({u}, {v}) out of range for size {size}")
        edges.append((u, v))
    return _from_edges(size, edges)
