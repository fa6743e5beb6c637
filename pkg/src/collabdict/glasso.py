"""Graphical lasso for the weighted log-determinant objective.

Solves::

    max_L  b * ln|L| - tr(L S) - alpha * ||L||_1,   b = (n + 1) / n,  alpha = rho / n

with the l1 norm taken over every entry, diagonal included.  Dividing by
``b`` gives the textbook problem on ``S / b`` with penalty ``alpha / b``,
which is solved by block coordinate descent over columns of the covariance
estimate, each column being a lasso problem handled by cyclic coordinate
descent with a scalar soft-threshold update.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError

__all__ = ["graphical_lasso", "kkt_residual", "objective"]


def _soft(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def _lasso_cd(w11: np.ndarray, s12: np.ndarray, alpha: float, beta: np.ndarray,
              tol: float, max_iter: int) -> np.ndarray:
    """Minimise ``0.5 b'W b - s'b + alpha |b|_1`` in place by coordinate descent."""
    p = len(s12)
    for _ in range(max_iter):
        biggest = 0.0
        for k in range(p):
            old = beta[k]
            r = s12[k] - w11[k] @ beta + w11[k, k] * old
            new = _soft(r, alpha) / w11[k, k]
            if new != old:
                beta[k] = new
                biggest = max(biggest, abs(new - old))
        if biggest < tol:
            return beta
    return beta


def objective(prec: np.ndarray, sigma: np.ndarray, rho: float, n_bar: float) -> float:
    b = (n_bar + 1.0) / n_bar
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0:
        return -np.inf
    return b * logdet - float(np.sum(prec * sigma)) - (rho / n_bar) * float(np.abs(prec).sum())


def kkt_residual(prec: np.ndarray, sigma: np.ndarray, rho: float, n_bar: float,
                 zero_tol: float = 0.0) -> float:
    """Largest violation of the subgradient optimality conditions.

    Nonzero entries need ``b inv(L)_ij - S_ij = alpha sign(L_ij)``; zero
    entries need ``|b inv(L)_ij - S_ij| <= alpha``.
    """
    b = (n_bar + 1.0) / n_bar
    alpha = rho / n_bar
    g = b * np.linalg.inv(prec) - sigma
    nz = np.abs(prec) > zero_tol
    res_nz = np.abs(g - alpha * np.sign(prec))[nz]
    res_z = np.maximum(np.abs(g[~nz]) - alpha, 0.0)
    worst = 0.0
    if res_nz.size:
        worst = max(worst, float(res_nz.max()))
    if res_z.size:
        worst = max(worst, float(res_z.max()))
    return worst


def graphical_lasso(sigma, rho: float, n_bar: float, *, tol: float = 1e-12,
                    max_sweeps: int = 2000, inner_tol: float = 1e-14,
                    inner_max_iter: int = 10_000) -> np.ndarray:
    """Sparse precision matrix for the weighted objective above.

    Args:
        sigma: symmetric positive semidefinite ``(M, M)`` matrix.
        rho: l1 strength (>= 0); the effective penalty is ``rho / n_bar``.
        n_bar: effective sample count (> 0).

    Raises:
        ConvergenceError: when the column sweeps do not settle.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    if n_bar <= 0:
        raise ValueError(f"n_bar must be > 0, got {n_bar}")
    if not np.allclose(sigma, sigma.T, rtol=1e-8, atol=1e-10 * max(np.abs(sigma).max(), 1.0)):
        raise ValueError("sigma must be symmetric")
    sigma = 0.5 * (sigma + sigma.T)
    m = sigma.shape[0]
    b = (n_bar + 1.0) / n_bar
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        sigma = sigma + (1e-8 * max(np.trace(sigma), 1e-300) / m) * np.eye(m)

    if rho == 0.0:
        prec = b * np.linalg.inv(sigma)
        return 0.5 * (prec + prec.T)

    s = sigma / b
    alpha = rho / n_bar / b
    if m == 1:
        return np.array([[1.0 / (s[0, 0] + alpha)]])

    cov = s + alpha * np.eye(m)
    betas = np.zeros((m, m - 1))
    idx = np.arange(m)
    for sweep in range(max_sweeps):
        cov_old = cov.copy()
        for j in range(m):
            rest = idx != j
            w11 = cov[np.ix_(rest, rest)]
            beta = _lasso_cd(w11, s[rest, j], alpha, betas[j].copy(), inner_tol, inner_max_iter)
            betas[j] = beta
            w12 = w11 @ beta
            cov[rest, j] = w12
            cov[j, rest] = w12
        if np.max(np.abs(cov - cov_old)) < tol:
            break
    else:
        raise ConvergenceError(f"graphical lasso did not converge in {max_sweeps} sweeps")

    prec = np.zeros((m, m))
    for j in range(m):
        rest = idx != j
        beta = betas[j]
        theta_jj = 1.0 / (cov[j, j] - cov[j, rest] @ beta)
        prec[j, j] = theta_jj
        prec[rest, j] = -beta * theta_jj
    # column-wise estimates agree up to solver tolerance; keep exact zeros
    sym = 0.5 * (prec + prec.T)
    sym[(prec == 0.0) | (prec.T == 0.0)] = 0.0
    return sym
