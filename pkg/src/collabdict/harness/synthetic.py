"""Planted multi-task Gaussian mixtures with injected anomalies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SyntheticSpec", "SyntheticData", "generate_synthetic", "train_test_split"]


@dataclass
class SyntheticSpec:
    """Ground truth for a synthetic experiment.

    ``means``/``covariances``/``weights`` are drawn from ``seed`` when left
    as ``None``.  ``anomaly_shift`` is measured in standard deviations of the
    generating component along the (random) shift direction.
    """

    S: int = 5
    M: int = 2
    K_true: int = 2
    counts: list[int] | int = 200
    means: list | None = None
    covariances: list | None = None
    weights: list | None = None
    anomaly_rate: float = 0.05
    anomaly_shift: float = 5.0
    mean_spread: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.counts, int):
            self.counts = [self.counts] * self.S
        self.counts = [int(c) for c in self.counts]
        if len(self.counts) != self.S or min(self.counts) < 1:
            raise ValueError(f"need {self.S} sample counts, each >= 1; got {self.counts}")
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise ValueError(f"anomaly_rate must lie in [0, 1), got {self.anomaly_rate}")
        if self.S < 1 or self.M < 1 or self.K_true < 1:
            raise ValueError("S, M and K_true must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.S, self.K_true) or np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0):
                raise ValueError("weights must be an S x K_true matrix of simplex rows")

    def resolved(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Planted ``(means, covariances, weights)``, drawing any that are unset."""
        rng = np.random.default_rng([self.seed, 17])
        means = (np.asarray(self.means, dtype=float) if self.means is not None
                 else rng.uniform(-self.mean_spread, self.mean_spread, size=(self.K_true, self.M)))
        if self.covariances is not None:
            covs = np.asarray(self.covariances, dtype=float)
        else:
            covs = np.empty((self.K_true, self.M, self.M))
            for k in range(self.K_true):
                a = rng.normal(scale=0.5, size=(self.M, self.M))
                covs[k] = a @ a.T / self.M + 0.5 * np.eye(self.M)
        weights = (np.asarray(self.weights, dtype=float) if self.weights is not None
                   else rng.dirichlet(np.full(self.K_true, 2.0), size=self.S))
        return means, covs, weights


@dataclass
class SyntheticData:
    datasets: list[np.ndarray]
    labels: list[np.ndarray]  # 1 = anomaly
    components: list[np.ndarray]
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    spec: SyntheticSpec = field(repr=False, default=None)


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> SyntheticData:
    seed = spec.seed if seed is None else seed
    means, covs, weights = spec.resolved()
    chols = np.linalg.cholesky(covs)
    datasets, labels, comps = [], [], []
    for s in range(spec.S):
        rng = np.random.default_rng([seed, s])
        n = spec.counts[s]
        z = rng.choice(spec.K_true, size=n, p=weights[s])
        x = means[z] + np.einsum("nij,nj->ni", chols[z], rng.standard_normal((n, spec.M)))
        is_anom = rng.random(n) < spec.anomaly_rate
        if spec.anomaly_rate > 0:
            u = rng.standard_normal((n, spec.M))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            sd = np.sqrt(np.einsum("ni,nij,nj->n", u, covs[z], u))
            x = x + is_anom[:, None] * (spec.anomaly_shift * sd)[:, None] * u
        datasets.append(x)
        labels.append(is_anom.astype(int))
        comps.append(z)
    return SyntheticData(datasets, labels, comps, means, covs, weights, spec)


def train_test_split(data: np.ndarray, labels: np.ndarray, test_fraction: float = 0.2, seed=0):
    """Stratified split: ``test_fraction`` of each label class goes to the test set.

    A class with at least two members keeps at least one of them in each
    part, so rare anomalies still reach the test set.
    """
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        n_test = int(round(test_fraction * members.size))
        if members.size >= 2:
            n_test = min(max(n_test, 1), members.size - 1)
        test_idx.extend(rng.choice(members, size=n_test, replace=False).tolist())
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    return data[~test_mask], labels[~test_mask], data[test_mask], labels[test_mask]
