"""Privacy auditing for trained GGM mixtures.

Covers the posterior release mechanism for the pattern means, the KL-based
(1, epsilon) Renyi bound together with the precision-norm bound it relies
on, and the entropy l-diversity monitor for consensus messages.
"""

from __future__ import annotations

import decimal
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from . import ggm
from .errors import CollabDictError

__all__ = [
    "PosteriorMu",
    "PrivacyBudget",
    "DiversityReport",
    "AuditResult",
    "posterior_mu",
    "kl_same_cov",
    "lambda_norm_bound",
    "norm_bound_for_model",
    "epsilon_bound",
    "data_radius",
    "perturbation_audit",
    "entropy_diversity",
    "privacy_report",
    "write_privacy_report",
]


@dataclass
class PosteriorMu:
    w: np.ndarray
    lam: float
    precision: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    K: int
    B: float
    R: float
    lambda0: float
    delta: float | None = None


@dataclass
class DiversityReport:
    entropies: np.ndarray  # one per pattern
    E: float
    threshold: float
    passed: bool

    @property
    def recommend_noise(self) -> bool:
        return not self.passed


def posterior_mu(lambda0: float, m0, n_bar: float, m_bar, prec) -> PosteriorMu:
    """Gaussian posterior of a pattern mean given its precision.

    ``m_bar`` is the count-normalised first moment; with ``n_bar = 0`` the
    posterior falls back to the prior.
    """
    if lambda0 <= 0:
        raise ValueError(f"lambda0 must be > 0, got {lambda0}")
    if n_bar < 0:
        raise ValueError(f"n_bar must be >= 0, got {n_bar}")
    m0 = np.asarray(m0, dtype=float)
    lam = lambda0 + n_bar
    w = (lambda0 * m0 + n_bar * np.asarray(m_bar, dtype=float)) / lam if n_bar > 0 else m0.copy()
    return PosteriorMu(w, lam, lam * np.asarray(prec, dtype=float))


def kl_same_cov(w, w_tilde, lam: float, prec) -> float:
    """KL divergence between N(w, (lam P)^-1) and N(w_tilde, (lam P)^-1)."""
    prec = np.asarray(prec, dtype=float)
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise ValueError("precision matrix must be positive definite") from exc
    d = np.asarray(w, dtype=float) - np.asarray(w_tilde, dtype=float)
    return float(0.5 * lam * d @ prec @ d)


def lambda_norm_bound(f_at_identity: float, b: float, c: float, h: float, *,
                      root_tol: float = 1e-9) -> float:
    """Largest root of ``g(t) = t - a b ln t - a f(I)`` with ``a = 1 + h / c``.

    Any precision matrix solving the penalised problem has spectral norm
    below the root.  The root is bracketed from the minimiser ``t = a b``
    outwards, refined by bisection, and the final float is the neighbour
    with the smallest high-precision residual.
    """
    if b <= 0 or c <= 0:
        raise ValueError(f"b and c must be > 0, got b={b}, c={c}")
    if h < 0:
        raise ValueError(f"h must be >= 0, got {h}")
    a = 1.0 + h / c
    alpha = a * b
    offset = a * f_at_identity

    def g(t):
        return math.fsum((t, -alpha * math.log(t), -offset))

    lo = alpha
    g_lo = g(lo)
    if g_lo > root_tol * max(1.0, abs(offset)):
        raise CollabDictError(f"no positive root: g has minimum {g_lo:.3e} at t={lo:.3e}")
    hi = 2.0 * max(lo, 1.0)
    for _ in range(2000):
        if g(hi) > 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise CollabDictError("failed to bracket the largest root")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
    return _closest_root(hi, f_at_identity, b, c, h)


def _closest_root(t: float, f_at_identity: float, b: float, c: float, h: float, width: int = 4) -> float:
    """Float near ``t`` with the smallest ``|g|``, judged at 40 significant digits.

    ``a``, ``a b`` and ``a f(I)`` are formed from the exact inputs here: with
    ``a`` large, rounding them to double shifts the root by a few ulps.
    """
    with decimal.localcontext() as ctx:
        ctx.prec = 40
        D = decimal.Decimal
        a = 1 + D(h) / D(c)
        alpha, off = a * D(b), a * D(f_at_identity)

        def g_exact(x):
            d = D(x)
            return abs(d - alpha * d.ln() - off)

        cands = [t]
        lo = hi = t
        for _ in range(width):
            lo, hi = math.nextafter(lo, 0.0), math.nextafter(hi, math.inf)
            cands += [lo, hi]
        return min(cands, key=g_exact)


def _sigma_from_aggregates(agg: ggm.Aggregates, k: int, hyper: ggm.GgmHyper) -> np.ndarray:
    return ggm._scatter_matrix(agg, k, hyper)


def norm_bound_for_model(agg: ggm.Aggregates, hyper: ggm.GgmHyper, n_participants: int,
                         max_local_count: float) -> tuple[float, list[float]]:
    """Precision-norm bound ``B`` for every retained component (and their max).

    Uses ``b = M (1 + 1/delta)``, ``c = rho / (S max_s N^s)``,
    ``h = max |Sigma_k - I|`` and ``f(I) = tr(Sigma_k) + (rho / N_k) M``.
    """
    if hyper.rho <= 0:
        raise ValueError("the precision-norm bound needs rho > 0")
    k_count, m = agg.means.shape
    b = m * (1.0 + 1.0 / hyper.delta)
    c = hyper.rho / (n_participants * max_local_count)
    per_k = []
    for k in range(k_count):
        sigma = _sigma_from_aggregates(agg, k, hyper)
        h = float(np.max(np.abs(sigma - np.eye(m))))
        f_id = float(np.trace(sigma) + hyper.rho / agg.counts[k] * m)
        per_k.append(lambda_norm_bound(f_id, b, c, h))
    return max(per_k), per_k


def epsilon_bound(K: int, B: float, R: float, lambda0: float, delta: float | None = None) -> PrivacyBudget:
    for name, value in (("K", K), ("B", B), ("R", R), ("lambda0", lambda0)):
        if not value > 0:
            raise ValueError(f"{name} must be > 0, got {value}")
    return PrivacyBudget(K * B * R**2 / (2.0 * lambda0), int(K), float(B), float(R), float(lambda0), delta)


def data_radius(datasets, quantile: float = 0.99) -> tuple[float, list[np.ndarray]]:
    """Largest pairwise distance after dropping outliers.

    A sample is an outlier when its distance to the coordinatewise median of
    the pooled data exceeds the ``quantile`` of those distances.  Returns
    ``R`` and per-dataset boolean masks of the retained samples.
    """
    pooled = np.vstack([np.atleast_2d(d) for d in datasets])
    center = np.median(pooled, axis=0)
    dist = np.linalg.norm(pooled - center, axis=1)
    cut = np.quantile(dist, quantile)
    keep = dist <= cut
    r = float(pdist(pooled[keep]).max()) if keep.sum() > 1 else 0.0
    masks, pos = [], 0
    for d in datasets:
        n = np.atleast_2d(d).shape[0]
        masks.append(keep[pos:pos + n])
        pos += n
    return r, masks


@dataclass
class AuditResult:
    trials: int
    violations: int
    max_kl: float
    epsilon: float
    kls: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def perturbation_audit(model: ggm.GgmGlobal, agg: ggm.Aggregates, responsibilities: list[np.ndarray],
                       datasets, budget: PrivacyBudget, trials: int = 100, seed=0) -> AuditResult:
    """Move one sample by at most ``R`` and measure the posterior KL shift.

    Responsibilities, ``lambda_k`` and ``Lambda_k`` stay frozen, so only the
    posterior means move: ``w_k - w~_k = r_k (x - x~) / lambda_k``.
    """
    rng = np.random.default_rng(seed)
    hyper = model.hyper
    m0 = hyper.prior_mean(model.M)
    posts = [posterior_mu(hyper.lambda0, m0, agg.counts[k], agg.means[k], model.precisions[k])
             for k in range(model.K)]
    kls = []
    for _ in range(trials):
        s = int(rng.integers(len(datasets)))
        n = int(rng.integers(np.atleast_2d(datasets[s]).shape[0]))
        u = rng.standard_normal(model.M)
        u *= budget.R * rng.uniform() ** (1.0 / model.M) / np.linalg.norm(u)
        r = responsibilities[s][n]
        total = 0.0
        for k, post in enumerate(posts):
            w_tilde = post.w + r[k] * u / post.lam
            total += kl_same_cov(post.w, w_tilde, post.lam, model.precisions[k])
        kls.append(total)
    kls_arr = np.asarray(kls)
    return AuditResult(trials, int(np.sum(kls_arr > budget.epsilon)), float(kls_arr.max()),
                       budget.epsilon, kls)


def _entropy_from_logits(logits: np.ndarray) -> float:
    logp = logits - logsumexp(logits)
    p = np.exp(logp)
    mask = p > 0
    return float(-np.sum(p[mask] * logp[mask]))


def entropy_diversity(data, model: ggm.GgmGlobal, ell0: float = 2.0) -> DiversityReport:
    """Entropy of each pattern's normalised sample weights; ``E`` is their max."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("entropy_diversity needs a non-empty dataset")
    if ell0 < 1:
        raise ValueError(f"ell0 must be >= 1, got {ell0}")
    ents = np.array([_entropy_from_logits(ggm.log_gaussian(data, model.means[k], model.precisions[k]))
                     for k in range(model.K)])
    ents = np.clip(ents, 0.0, None)
    e_max = float(ents.max())
    threshold = float(np.log(ell0))
    return DiversityReport(ents, e_max, threshold, e_max >= threshold)


def privacy_report(model: ggm.GgmGlobal, weights: list[np.ndarray], datasets, *, ell0: float = 2.0,
                   trials: int = 100, quantile: float = 0.99, seed=0) -> dict:
    """Full audit of a trained model against the data it was trained on.

    Network totals are rebuilt from one responsibility pass with the final
    parameters, which is what the participants hold at convergence.
    """
    datasets = [np.atleast_2d(np.asarray(d, dtype=float)) for d in datasets]
    hyper = model.hyper
    diversity = [entropy_diversity(d, model, ell0) for d in datasets]
    diversity_rows = [{"participant": s, "E": rep.E, "threshold": rep.threshold, "pass": rep.passed,
                       "recommend_noise": rep.recommend_noise} for s, rep in enumerate(diversity)]
    norms = [float(np.linalg.norm(lam, 2)) for lam in model.precisions]
    if hyper.rho == 0:
        # the norm bound needs an l1 penalty; without one there is no epsilon
        return {
            "epsilon": None,
            "bound_applicable": False,
            "inputs": {"K": model.K, "lambda0": hyper.lambda0, "delta": hyper.delta, "rho": 0.0},
            "components": [{"k": k, "norm": n, "bound": None, "within": None} for k, n in enumerate(norms)],
            "diversity": diversity_rows,
            "audit": None,
        }
    updates = [ggm.local_update(d, w, model) for d, w in zip(datasets, weights)]
    agg = ggm.aggregate([u[1] for u in updates])[0]
    resp = [u[0].responsibilities for u in updates]
    max_n = max(d.shape[0] for d in datasets)
    B, per_k = norm_bound_for_model(agg, hyper, len(datasets), max_n)
    R, _ = data_radius(datasets, quantile)
    budget = epsilon_bound(model.K, B, R, hyper.lambda0, hyper.delta)
    audit = perturbation_audit(model, agg, resp, datasets, budget, trials, seed)
    return {
        "epsilon": budget.epsilon,
        "bound_applicable": True,
        "inputs": {"K": budget.K, "B": budget.B, "R": budget.R, "lambda0": budget.lambda0,
                   "delta": hyper.delta, "rho": hyper.rho},
        "components": [{"k": k, "norm": n, "bound": b, "within": bool(n <= b)}
                       for k, (n, b) in enumerate(zip(norms, per_k))],
        "diversity": diversity_rows,
        "audit": {"trials": audit.trials, "violations": audit.violations, "passes": audit.trials - audit.violations,
                  "max_kl": audit.max_kl},
    }


def write_privacy_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2))
