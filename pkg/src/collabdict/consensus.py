"""Dynamical average consensus with random chunking.

Every node repeatedly replaces its value with a weighted average of its own
and its neighbours' values, ``x(t+1) = W x(t)``.  Tensors are averaged
elementwise: an input of shape ``(S, ...)`` is flattened to ``(S, P)`` and all
``P`` elements share one iteration loop.

Random chunking splits each participant's value into ``C`` additive shares and
averages each share separately, so the very first message a neighbour sees is
a random share rather than the raw value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsensusError
from .topology import Graph, WeightMatrix, consensus_weights, relabel

__all__ = [
    "ConsensusVector",
    "ChunkPlan",
    "ConsensusResult",
    "MessageLog",
    "ConsensusSession",
    "step",
    "step_elementwise",
    "run",
    "chunk",
    "run_chunked",
]


@dataclass(frozen=True)
class ConsensusVector:
    values: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class ChunkPlan:
    """``chunks[l, s]`` is share ``l`` of participant ``s``'s value."""

    chunk_count: int
    chunks: np.ndarray

    def column_sums(self) -> np.ndarray:
        return self.chunks.sum(axis=0)


@dataclass
class ConsensusResult:
    values: np.ndarray  # final per-node values, same shape as the input
    iterations: int
    residual: float

    @property
    def average(self):
        """Participant 0's converged value; every node agrees within tol."""
        return self.values[0]


@dataclass
class MessageLog:
    """Records every value sent on every directed edge.

    Each call to :func:`run` opens a new session.  Only iterations
    ``< max_iterations`` are kept (``None`` keeps all).  Each entry of
    ``snapshots`` is ``(session, iteration, x)`` with ``x`` the ``(S, P)``
    state every node broadcasts to its neighbours at that iteration.
    """

    max_iterations: int | None = 1
    snapshots: list = field(default_factory=list)
    adjacency: list = field(default_factory=list)

    def begin_session(self, adjacency: np.ndarray) -> int:
        self.adjacency.append(np.asarray(adjacency, dtype=bool))
        return len(self.adjacency) - 1

    def wants(self, iteration: int) -> bool:
        return self.max_iterations is None or iteration < self.max_iterations

    def record(self, iteration: int, x: np.ndarray) -> None:
        if self.wants(iteration):
            self.snapshots.append((len(self.adjacency) - 1, iteration, x.copy()))

    def messages(self):
        """Yield ``(session, iteration, sender, receiver, payload)``."""
        for session, t, x in self.snapshots:
            a = self.adjacency[session]
            for sender, receiver in zip(*np.nonzero(a)):
                yield session, t, int(sender), int(receiver), x[sender]

    def count_exposures(self, raw, *, iteration: int = 0) -> int:
        """Number of messages carrying any raw entry of the sender's value.

        ``raw`` has one row per sender label as used inside the sessions.
        """
        raw = np.asarray(raw, dtype=float)
        raw = raw.reshape(raw.shape[0], -1)
        hits = 0
        for _, t, sender, _, payload in self.messages():
            if t != iteration:
                continue
            hits += int(np.any(np.isin(payload, raw[sender])))
        return hits


def _as_matrix(w) -> np.ndarray:
    return w.entries if isinstance(w, WeightMatrix) else np.asarray(w, dtype=float)


def step(x: ConsensusVector, w: WeightMatrix) -> ConsensusVector:
    mat = _as_matrix(w)
    values = np.asarray(x.values, dtype=float)
    if values.shape[0] != mat.shape[0]:
        raise ValueError(f"vector length {values.shape[0]} does not match graph size {mat.shape[0]}")
    return ConsensusVector(mat @ values, x.iteration + 1)


def step_elementwise(values: np.ndarray, graph: Graph) -> np.ndarray:
    """One update written node by node: each node only reads its neighbours."""
    values = np.asarray(values, dtype=float)
    s = graph.size
    out = np.empty_like(values)
    for i in range(s):
        acc = np.zeros_like(values[i])
        for j in graph.neighbors(i):
            acc = acc + (values[j] - values[i])
        out[i] = values[i] + acc / s
    return out


def _iterate(x: np.ndarray, mat: np.ndarray, tol: float, max_iter: int,
             log: MessageLog | None = None, history: list | None = None):
    """Run ``x <- W x`` on an ``(S, P)`` block until converged."""
    t = 0
    spread = float(np.max(x.max(axis=0) - x.min(axis=0))) if x.size else 0.0
    if spread < tol:
        return x, 0, spread
    while True:
        if log is not None and log.wants(t):
            log.record(t, x)
        nxt = mat @ x
        t += 1
        delta = float(np.max(np.abs(nxt - x)))
        spread = float(np.max(nxt.max(axis=0) - nxt.min(axis=0)))
        x = nxt
        if history is not None:
            history.append(x[:, 0].copy())
        if delta < tol and spread < tol:
            return x, t, spread
        if t >= max_iter:
            raise ConsensusError("consensus did not converge", residual=spread, iterations=t)


def _write_trace(path, history: list[np.ndarray]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "node", "value"])
        for t, x in enumerate(history):
            for node, value in enumerate(x):
                writer.writerow([t, node, repr(float(value))])


def run(x0, w: WeightMatrix, tol: float = 1e-6, max_iter: int = 1_000_000, *,
        log: MessageLog | None = None, trace_path=None) -> ConsensusResult:
    """Iterate to average consensus.

    Stops once both the change between successive iterates and the spread
    across nodes fall below ``tol``; since the node sum is conserved the
    second condition puts every node within ``tol`` of the true mean.
    ``trace_path`` (scalar payloads only) writes an ``iter,node,value`` CSV.
    """
    x0 = np.asarray(x0, dtype=float)
    mat = _as_matrix(w)
    if x0.shape[0] != mat.shape[0]:
        raise ValueError(f"input length {x0.shape[0]} does not match graph size {mat.shape[0]}")
    if not np.all(np.isfinite(x0)):
        raise ConsensusError("non-finite input to consensus", residual=float("inf"))
    if trace_path is not None and x0.ndim != 1:
        raise ValueError("trace output is only available for scalar payloads")
    flat = x0.reshape(x0.shape[0], -1)
    if log is not None:
        log.begin_session((np.abs(mat) > 0) & ~np.eye(mat.shape[0], dtype=bool))
    history = [flat[:, 0].copy()] if trace_path is not None else None
    try:
        x, t, spread = _iterate(flat, mat, tol, max_iter, log, history)
    finally:
        if history is not None:
            _write_trace(trace_path, history)
    return ConsensusResult(x.reshape(x0.shape), t, spread)


def chunk(values, chunk_count: int, seed=None) -> ChunkPlan:
    """Split each value into ``chunk_count`` additive shares.

    The first ``C - 1`` shares are uniform on ``[-A, A]`` with
    ``A = max(1, |value|)``; the last share is the residual.
    """
    if chunk_count < 1:
        raise ValueError(f"chunk count must be >= 1, got {chunk_count}")
    values = np.asarray(values, dtype=float)
    if chunk_count == 1:
        return ChunkPlan(1, values[np.newaxis].copy())
    rng = np.random.default_rng(seed)
    amp = np.maximum(1.0, np.abs(values))
    shares = rng.uniform(-1.0, 1.0, size=(chunk_count - 1,) + values.shape) * amp
    last = values - shares.sum(axis=0)
    return ChunkPlan(chunk_count, np.concatenate([shares, last[np.newaxis]], axis=0))


def run_chunked(x0, w: WeightMatrix, chunk_count: int, tol: float = 1e-6, seed=None, *,
                max_iter: int = 1_000_000, log: MessageLog | None = None) -> ConsensusResult:
    """Average each chunk separately and add the per-chunk limits.

    Every chunk is driven to ``tol / C`` so the summed result stays within
    ``tol`` of the true mean.  All chunks and tensor elements share a single
    iteration loop.
    """
    x0 = np.asarray(x0, dtype=float)
    s = x0.shape[0]
    plan = chunk(x0, chunk_count, seed)
    # (C, S, ...) -> (S, C * P)
    block = np.moveaxis(plan.chunks.reshape(chunk_count, s, -1), 0, 1).reshape(s, -1)
    res = run(block, w, tol / chunk_count, max_iter, log=log)
    summed = res.values.reshape(s, chunk_count, -1).sum(axis=1)
    return ConsensusResult(summed.reshape(x0.shape), res.iterations, res.residual)


class ConsensusSession:
    """Network-wide aggregation service used by the model trainers.

    Wraps a graph with its stopping rule and chunking policy.  With
    ``relabel=True`` every call draws a fresh random node labelling, so a
    participant talks to a different set of peers in every session.
    A graph is optional only for a single participant, where aggregation is
    the identity.
    """

    def __init__(self, graph: Graph | None, *, tol: float = 1e-6, max_iter: int = 1_000_000,
                 chunks: int = 1, seed=0, relabel: bool = False, log: MessageLog | None = None):
        if graph is None:
            self.size = 1
            self.weights = None
        else:
            self.size = graph.size
            self.weights = consensus_weights(graph)
        self.graph = graph
        self.tol = tol
        self.max_iter = max_iter
        self.chunks = chunks
        self.relabel = relabel
        self.log = log
        self._rng = np.random.default_rng(seed)
        self.iterations: list[int] = []

    def average(self, values) -> np.ndarray:
        """Per-node consensus mean of ``values`` (shape ``(S, ...)``)."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.size:
            raise ValueError(f"expected {self.size} participants, got {values.shape[0]}")
        if self.size == 1:
            self.iterations.append(0)
            return values.copy()
        chunk_seed = int(self._rng.integers(2**63))
        if self.relabel:
            g, perm = relabel(self.graph, int(self._rng.integers(2**63)))
            w = consensus_weights(g)
            permuted = np.empty_like(values)
            permuted[perm] = values
            res = run_chunked(permuted, w, self.chunks, self.tol, chunk_seed,
                              max_iter=self.max_iter, log=self.log)
            out = res.values[perm]
        else:
            res = run_chunked(values, self.weights, self.chunks, self.tol, chunk_seed,
                              max_iter=self.max_iter, log=self.log)
            out = res.values
        self.iterations.append(res.iterations)
        return out

    def sum(self, values) -> np.ndarray:
        """Per-node network sum: the consensus mean times ``S``."""
        return self.size * self.average(values)
