"""Sparse Gaussian graphical model mixture trained over a peer-to-peer network.

Each participant holds private data and private mixture weights ``pi^s``; the
``K`` pattern parameters ``(mu_k, Lambda_k)`` are shared.  One round is

1. ``local_update``: responsibilities and local sufficient statistics,
2. ``aggregate``: network sums of those statistics by consensus,
3. ``optimize_global``: MAP means and graphical-lasso precisions,

and every participant runs step 3 on its own consensus view.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .consensus import ConsensusSession
from .errors import ConditioningError, ConsensusError, ModelCollapseError
from .glasso import graphical_lasso
from .topology import Graph

__all__ = [
    "GgmHyper",
    "GgmGlobal",
    "GgmLocal",
    "SuffStats",
    "Aggregates",
    "GgmFit",
    "log_gaussian",
    "responsibilities",
    "local_update",
    "aggregate",
    "prune",
    "optimize_global",
    "anomaly_score",
    "anomaly_scores",
    "log_posterior",
    "init_global",
    "em_round",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "read_dataset",
    "write_dataset",
]

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GgmHyper:
    """Hyper-parameters every participant agrees on before training."""

    lambda0: float = 1.0
    rho: float = 0.1
    delta: float = 1.0
    m0: tuple[float, ...] | None = None  # None means the zero vector

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError(f"lambda0 must be > 0, got {self.lambda0}")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")

    def prior_mean(self, dim: int) -> np.ndarray:
        if self.m0 is None:
            return np.zeros(dim)
        m0 = np.asarray(self.m0, dtype=float)
        if m0.shape != (dim,):
            raise ValueError(f"m0 has shape {m0.shape}, expected ({dim},)")
        return m0


@dataclass
class GgmGlobal:
    means: np.ndarray  # (K, M)
    precisions: np.ndarray  # (K, M, M)
    hyper: GgmHyper = field(default_factory=GgmHyper)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.precisions = np.asarray(self.precisions, dtype=float)
        k, m = self.means.shape
        if self.precisions.shape != (k, m, m):
            raise ValueError(f"precisions shape {self.precisions.shape} != ({k}, {m}, {m})")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def M(self) -> int:
        return self.means.shape[1]

    def check(self) -> None:
        for k, lam in enumerate(self.precisions):
            if not np.allclose(lam, lam.T, rtol=0, atol=1e-12):
                raise ConditioningError(f"precision {k} is not symmetric")
            np.linalg.cholesky(lam)

    def select(self, keep) -> "GgmGlobal":
        keep = np.asarray(keep)
        return GgmGlobal(self.means[keep].copy(), self.precisions[keep].copy(), self.hyper)


@dataclass
class GgmLocal:
    weights: np.ndarray  # (K,)
    responsibilities: np.ndarray  # (N, K)


@dataclass
class SuffStats:
    counts: np.ndarray  # (K,)
    first: np.ndarray  # (K, M)
    second: np.ndarray  # (K, M, M)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.counts.ravel(), self.first.ravel(), self.second.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, k: int, m: int) -> "SuffStats":
        counts = vec[:k]
        first = vec[k:k + k * m].reshape(k, m)
        second = vec[k + k * m:].reshape(k, m, m)
        return cls(counts.copy(), first.copy(), second.copy())


@dataclass
class Aggregates:
    """Network-wide totals: ``counts = sum_s N_k^s``; ``means``/``scatters``
    are the summed first/second moments divided by ``counts``."""

    counts: np.ndarray
    means: np.ndarray
    scatters: np.ndarray

    def select(self, keep) -> "Aggregates":
        keep = np.asarray(keep)
        return Aggregates(self.counts[keep], self.means[keep], self.scatters[keep])


def log_gaussian(x: np.ndarray, mean: np.ndarray, prec: np.ndarray) -> np.ndarray:
    """``ln N(x | mean, inv(prec))`` for each row of ``x``."""
    x = np.atleast_2d(x)
    chol = np.linalg.cholesky(prec)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    diff = x - mean
    maha = np.sum((diff @ chol) ** 2, axis=1)
    return 0.5 * (logdet - x.shape[1] * _LOG_2PI - maha)


def _log_joint(x: np.ndarray, weights: np.ndarray, glob: GgmGlobal) -> np.ndarray:
    x = np.atleast_2d(x)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    cols = [logw[k] + log_gaussian(x, glob.means[k], glob.precisions[k]) for k in range(glob.K)]
    return np.stack(cols, axis=1)


def responsibilities(x, weights, glob: GgmGlobal) -> np.ndarray:
    """Posterior pattern probabilities, computed in log space.

    A single sample gives shape ``(K,)``; a batch gives ``(N, K)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    lj = _log_joint(x, np.asarray(weights, dtype=float), glob)
    r = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return r[0] if single else r


def local_update(data, weights, glob: GgmGlobal) -> tuple[GgmLocal, SuffStats]:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("local_update needs a non-empty dataset")
    r = responsibilities(data, weights, glob)
    counts = r.sum(axis=0)
    first = r.T @ data
    second = np.einsum("nk,ni,nj->kij", r, data, data)
    new_weights = counts / counts.sum()
    return GgmLocal(new_weights, r), SuffStats(counts, first, second)


def _views_from_sums(sums: np.ndarray, k: int, m: int) -> list[Aggregates]:
    views = []
    for vec in sums:
        st = SuffStats.unflatten(vec, k, m)
        with np.errstate(divide="ignore", invalid="ignore"):
            safe = np.where(st.counts > 0, st.counts, 1.0)
            means = st.first / safe[:, None]
            scatters = st.second / safe[:, None, None]
        views.append(Aggregates(st.counts, means, scatters))
    return views


def aggregate(stats: list[SuffStats], session: ConsensusSession | None = None) -> list[Aggregates]:
    """Network totals of the local statistics, one view per participant.

    With ``session=None`` the totals are summed directly (exact, centralised
    reference); otherwise they come from chunked consensus, so views differ
    by at most the consensus tolerance.
    """
    k, m = stats[0].first.shape
    local = np.stack([st.flatten() for st in stats])
    if session is None:
        sums = np.repeat(local.sum(axis=0, keepdims=True), len(stats), axis=0)
    else:
        sums = session.sum(local)
    return _views_from_sums(sums, k, m)


def prune(agg: Aggregates, delta: float) -> np.ndarray:
    """Indices of components whose total count reaches ``delta``."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    keep = np.flatnonzero(agg.counts >= delta)
    if keep.size == 0:
        raise ModelCollapseError(f"all {len(agg.counts)} components fell below delta={delta}")
    return keep


def _scatter_matrix(agg: Aggregates, k: int, hyper: GgmHyper) -> np.ndarray:
    n = agg.counts[k]
    mbar = agg.means[k]
    m0 = hyper.prior_mean(len(mbar))
    d = mbar - m0
    sigma = agg.scatters[k] - np.outer(mbar, mbar) + hyper.lambda0 / (hyper.lambda0 + n) * np.outer(d, d)
    return 0.5 * (sigma + sigma.T)


def optimize_global(agg: Aggregates, hyper: GgmHyper, *, ridge: float = 1e-8) -> GgmGlobal:
    """MAP pattern means and sparse precisions from network totals."""
    k_count, m = agg.means.shape
    m0 = hyper.prior_mean(m)
    means = np.empty((k_count, m))
    precs = np.empty((k_count, m, m))
    for k in range(k_count):
        n = float(agg.counts[k])
        if n <= 0:
            raise ValueError(f"component {k} has non-positive count {n}; prune first")
        means[k] = (hyper.lambda0 * m0 + n * agg.means[k]) / (hyper.lambda0 + n)
        sigma = _scatter_matrix(agg, k, hyper)
        scale = max(np.trace(sigma) / m, 1e-300)
        lowest = np.linalg.eigvalsh(sigma)[0]
        if lowest < -1e-8 * max(scale, 1.0):
            raise ConditioningError(f"component {k}: scatter matrix has eigenvalue {lowest:.3e}")
        if lowest <= ridge * scale:
            # singular scatter (e.g. fewer samples than dimensions): minimal jitter
            sigma = sigma + ridge * scale * np.eye(m)
        precs[k] = graphical_lasso(sigma, hyper.rho, n)
    return GgmGlobal(means, precs, hyper)


def anomaly_scores(x, weights, glob: GgmGlobal) -> np.ndarray:
    """Responsibility-weighted negative log-likelihood of each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = responsibilities(x, weights, glob)
    nll = np.stack([-log_gaussian(x, glob.means[k], glob.precisions[k]) for k in range(glob.K)], axis=1)
    return np.sum(r * nll, axis=1)


def anomaly_score(x, weights, glob: GgmGlobal) -> float:
    return float(anomaly_scores(np.asarray(x, dtype=float)[np.newaxis], weights, glob)[0])


def log_posterior(datasets, weights: list[np.ndarray], glob: GgmGlobal) -> float:
    """Log marginal likelihood plus log prior (up to a constant).

    EM rounds without pruning never decrease this value.
    """
    hyper = glob.hyper
    m0 = hyper.prior_mean(glob.M)
    total = 0.0
    for data, w in zip(datasets, weights):
        total += float(logsumexp(_log_joint(np.atleast_2d(data), w, glob), axis=1).sum())
    for k in range(glob.K):
        lam = glob.precisions[k]
        d = glob.means[k] - m0
        _, logdet = np.linalg.slogdet(lam)
        total += 0.5 * logdet - 0.5 * hyper.lambda0 * d @ lam @ d - 0.5 * hyper.rho * np.abs(lam).sum()
    return float(total)


def init_global(datasets, n_components: int, hyper: GgmHyper, seed=0,
                noise: float = 1e-2) -> GgmGlobal:
    """Initial patterns: unit precisions, means at perturbed local samples.

    Seeds are picked k-means++ style so they spread over the clusters.  For
    each new seed every participant reports one scalar, the sum of squared
    distances from its samples to the seeds chosen so far; a participant is
    drawn in proportion to that mass with the agreed seed, and it picks one
    of its own samples with the same weighting and adds noise scaled by its
    local spread.  Only the chosen, perturbed samples leave a participant.
    """
    datasets = [np.atleast_2d(np.asarray(d, dtype=float)) for d in datasets]
    m = datasets[0].shape[1]
    shared = np.random.default_rng([seed, 101])
    means = np.empty((n_components, m))
    # squared distance of every sample to its nearest seed so far
    d2 = [np.full(d.shape[0], np.inf) for d in datasets]
    for k in range(n_components):
        if k == 0:
            mass = np.array([d.shape[0] for d in datasets], dtype=float)
            local_w = [np.ones(d.shape[0]) for d in datasets]
        else:
            mass = np.array([w.sum() for w in d2])
            local_w = d2
        if not mass.sum() > 0:
            mass = np.array([d.shape[0] for d in datasets], dtype=float)
            local_w = [np.ones(d.shape[0]) for d in datasets]
        s = int(shared.choice(len(datasets), p=mass / mass.sum()))
        data = datasets[s]
        rng = np.random.default_rng([seed, s, k])
        i = int(rng.choice(data.shape[0], p=local_w[s] / local_w[s].sum()))
        spread = data.std(axis=0) + 1e-12
        means[k] = data[i] + noise * spread * rng.standard_normal(m)
        for t, d in enumerate(datasets):
            d2[t] = np.minimum(d2[t], np.sum((d - means[k]) ** 2, axis=1))
    precs = np.repeat(np.eye(m)[np.newaxis], n_components, axis=0)
    return GgmGlobal(means, precs, hyper)


@dataclass
class RoundInfo:
    round: int
    n_components: int
    objective: float
    change: float
    view_spread: float
    consensus_iterations: int


@dataclass
class GgmFit:
    model: GgmGlobal  # participant 0's view
    views: list[GgmGlobal]
    locals: list[GgmLocal]
    history: list[RoundInfo]
    converged: bool

    @property
    def weights(self) -> list[np.ndarray]:
        return [loc.weights for loc in self.locals]


def _relative_change(old: GgmGlobal, new: GgmGlobal) -> float:
    if old.K != new.K:
        return np.inf
    worst = 0.0
    for a, b in ((old.means, new.means), (old.precisions, new.precisions)):
        for k in range(old.K):
            denom = max(np.linalg.norm(a[k]), 1.0)
            worst = max(worst, float(np.linalg.norm(b[k] - a[k]) / denom))
    return worst


def em_round(datasets, weights: list[np.ndarray], views: list[GgmGlobal], hyper: GgmHyper,
             session: ConsensusSession | None = None):
    """One round: local updates, aggregation, pruning and global optimisation.

    ``views[s]`` is participant ``s``'s copy of the global parameters.
    Returns ``(new_views, locals)``.
    """
    updates = [local_update(d, w, g) for d, w, g in zip(datasets, weights, views)]
    locals_ = [u[0] for u in updates]
    stats = [u[1] for u in updates]
    aggs = aggregate(stats, session)
    keeps = [prune(a, hyper.delta) for a in aggs]
    if any(not np.array_equal(keeps[0], kp) for kp in keeps[1:]):
        raise ConsensusError("participants disagree on which components to prune")
    keep = keeps[0]
    if keep.size < aggs[0].counts.size:
        log.info("pruned components %s", sorted(set(range(aggs[0].counts.size)) - set(keep.tolist())))
        for loc in locals_:
            w = loc.weights[keep]
            loc.weights = w / w.sum()
            loc.responsibilities = loc.responsibilities[:, keep]
    new_views = [optimize_global(a.select(keep), hyper) for a in aggs]
    return new_views, locals_


def fit(datasets, graph: Graph | None, hyper: GgmHyper | None = None, n_components: int = 2, *,
        seed=0, tol: float = 1e-5, max_rounds: int = 200, consensus_tol: float = 1e-8,
        chunks: int = 1, relabel: bool = False, init: GgmGlobal | None = None) -> GgmFit:
    """Train the mixture with decentralized rounds until the patterns settle.

    Stops when the relative change of every mean and precision drops below
    ``tol`` or after ``max_rounds`` rounds.  ``graph`` may be ``None`` only
    for a single participant.
    """
    hyper = hyper or GgmHyper()
    datasets = [np.atleast_2d(np.asarray(d, dtype=float)) for d in datasets]
    s_count = len(datasets)
    if graph is None and s_count != 1:
        raise ValueError("a communication graph is required for more than one participant")
    if graph is not None and graph.size != s_count:
        raise ValueError(f"graph has {graph.size} nodes but there are {s_count} datasets")
    session = ConsensusSession(graph, tol=consensus_tol, chunks=chunks, seed=seed, relabel=relabel)
    start = init if init is not None else init_global(datasets, n_components, hyper, seed)
    views = [GgmGlobal(start.means.copy(), start.precisions.copy(), hyper) for _ in range(s_count)]
    weights = [np.full(start.K, 1.0 / start.K) for _ in range(s_count)]
    history: list[RoundInfo] = []
    locals_: list[GgmLocal] = []
    converged = False
    for rnd in range(max_rounds):
        before = len(session.iterations)
        new_views, locals_ = em_round(datasets, weights, views, hyper, session)
        weights = [loc.weights for loc in locals_]
        change = _relative_change(views[0], new_views[0])
        spread = max(_relative_change(new_views[0], v) for v in new_views)
        views = new_views
        history.append(RoundInfo(rnd, views[0].K, log_posterior(datasets, weights, views[0]),
                                 change, spread, int(sum(session.iterations[before:]))))
        if change < tol:
            converged = True
            break
    return GgmFit(views[0], views, locals_, history, converged)


def save_checkpoint(path, model: GgmGlobal, weights: list[np.ndarray]) -> None:
    doc = {
        "kind": "ggm",
        "K": model.K,
        "M": model.M,
        "hyper": asdict(model.hyper),
        "means": model.means.tolist(),
        "precisions": [lam.ravel().tolist() for lam in model.precisions],
        "weights": [np.asarray(w).tolist() for w in weights],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_checkpoint(path) -> tuple[GgmGlobal, list[np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind", "ggm") != "ggm":
        raise ValueError(f"{path} is not a GGM checkpoint")
    k, m = doc["K"], doc["M"]
    hyper_doc = dict(doc["hyper"])
    if hyper_doc.get("m0") is not None:
        hyper_doc["m0"] = tuple(hyper_doc["m0"])
    hyper = GgmHyper(**hyper_doc)
    precs = np.array(doc["precisions"], dtype=float).reshape(k, m, m)
    model = GgmGlobal(np.array(doc["means"], dtype=float).reshape(k, m), precs, hyper)
    weights = [np.array(w, dtype=float) for w in doc["weights"]]
    return model, weights


def read_dataset(path) -> np.ndarray:
    """CSV with one sample per row; a non-numeric first row is a header."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    try:
        [float(v) for v in lines[0].split(",")]
        skip = 0
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return data


def write_dataset(path, data, header: list[str] | None = None) -> None:
    data = np.atleast_2d(data)
    kwargs = {"header": ",".join(header), "comments": ""} if header else {}
    np.savetxt(path, data, delimiter=",", fmt="%.17g", **kwargs)
