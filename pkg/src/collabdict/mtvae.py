"""Multi-task variational autoencoder trained by decentralized SGD.

The decoder ``theta`` is shared by all participants; every participant keeps
its own encoder ``phi^s``.  Both are one-hidden-layer Gaussian MLPs::

    g = relu(W1 x + b1),  mean = Wmu g + bmu,  scale = softplus(Wsig g + bsig)

Gradients are derived by hand (pathwise / reparameterized) and evaluated on
a fixed set of Monte-Carlo draws so objective and gradient always agree.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .consensus import ConsensusSession
from .errors import TrainingFault
from .topology import Graph

__all__ = [
    "MlpSpec",
    "ElboEstimate",
    "init_mlp",
    "mlp_spec",
    "decoder_forward",
    "encoder_forward",
    "elbo",
    "elbo_grad",
    "local_sgd",
    "global_step",
    "reconstruction_score",
    "anomaly_score_mc",
    "anomaly_scores_mc",
    "flatten_params",
    "unflatten_params",
    "EpochRecord",
    "MtvaeFit",
    "init_params",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
]

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
PARAM_KEYS = ("W1", "b1", "Wmu", "bmu", "Wsig", "bsig")
COLLAPSE_KL = 1e-3
_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError(f"all MLP dimensions must be >= 1, got {self}")


@dataclass
class ElboEstimate:
    value: float
    kl_term: float
    recon_term: float
    J: int
    seed: object


def softplus(a):
    return np.logaddexp(0.0, a)


def init_mlp(spec: MlpSpec, rng: np.random.Generator, head_scale: float = 0.1) -> dict[str, np.ndarray]:
    """He-style hidden layer; small output heads with the scale head starting near 1."""
    h, i, o = spec.hidden_dim, spec.input_dim, spec.output_dim
    return {
        "W1": rng.standard_normal((h, i)) * np.sqrt(2.0 / i),
        "b1": np.zeros(h),
        "Wmu": rng.standard_normal((o, h)) * head_scale / np.sqrt(h),
        "bmu": np.zeros(o),
        "Wsig": rng.standard_normal((o, h)) * head_scale / np.sqrt(h),
        "bsig": np.full(o, _SOFTPLUS_INV_ONE),
    }


def mlp_spec(params: dict[str, np.ndarray]) -> MlpSpec:
    h, i = params["W1"].shape
    return MlpSpec(i, h, params["Wmu"].shape[0])


def _forward(params, x):
    a1 = x @ params["W1"].T + params["b1"]
    g = np.maximum(a1, 0.0)
    mean = g @ params["Wmu"].T + params["bmu"]
    pre = g @ params["Wsig"].T + params["bsig"]
    return mean, softplus(pre), (x, a1, g, pre)


def _backward(params, cache, d_mean, d_scale):
    """Gradients of a scalar w.r.t. params and inputs, given its output grads."""
    x, a1, g, pre = cache
    d_pre = d_scale * expit(pre)
    grads = {
        "Wmu": d_mean.T @ g,
        "bmu": d_mean.sum(axis=0),
        "Wsig": d_pre.T @ g,
        "bsig": d_pre.sum(axis=0),
    }
    d_g = d_mean @ params["Wmu"] + d_pre @ params["Wsig"]
    d_a1 = d_g * (a1 > 0)
    grads["W1"] = d_a1.T @ x
    grads["b1"] = d_a1.sum(axis=0)
    d_x = d_a1 @ params["W1"]
    return grads, d_x


def _check_input(params, x, what):
    x = np.asarray(x, dtype=float)
    expected = params["W1"].shape[1]
    if x.shape[-1] != expected:
        raise ValueError(f"{what} expects inputs of dimension {expected}, got {x.shape[-1]}")
    return x


def decoder_forward(theta, z):
    """Decoder mean and standard deviation at latent point(s) ``z``."""
    z = _check_input(theta, z, "decoder")
    mean, scale, _ = _forward(theta, z)
    return mean, scale


def encoder_forward(phi, x):
    """Encoder mean and standard deviation (the ``h`` vector) at ``x``."""
    x = _check_input(phi, x, "encoder")
    mean, scale, _ = _forward(phi, x)
    return mean, scale


def _draws(seed, j_count: int, n: int, d: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((j_count, n, d))


def _gauss_logpdf(x, mean, scale):
    resid = (x - mean) / scale
    return -0.5 * x.shape[-1] * _LOG_2PI - np.sum(np.log(scale), axis=-1) - 0.5 * np.sum(resid**2, axis=-1)


def kl_term_from_outputs(m: np.ndarray, h: np.ndarray) -> float:
    """``0.5 sum_n [ln|H| + d - tr H - |m|^2]`` with ``H = diag(h)^2``; equals -KL(q || N(0, I))."""
    return float(0.5 * np.sum(2.0 * np.log(h) + 1.0 - h**2 - m**2))


def _objective(phi, theta, data, j_count, seed, need_grad):
    data = np.atleast_2d(_check_input(phi, data, "encoder"))
    n = data.shape[0]
    m, h, enc_cache = _forward(phi, data)
    d = m.shape[1]
    v = _draws(seed, j_count, n, d)
    z = (h[np.newaxis] * v + m[np.newaxis]).reshape(j_count * n, d)
    xs = np.broadcast_to(data, (j_count, n, data.shape[1])).reshape(j_count * n, -1)
    _check_input(theta, z, "decoder")
    mu, sig, dec_cache = _forward(theta, z)
    recon = float(_gauss_logpdf(xs, mu, sig).sum() / j_count)
    kl = kl_term_from_outputs(m, h)
    est = ElboEstimate(kl + recon, kl, recon, j_count, seed)
    if not need_grad:
        return est, None, None
    diff = xs - mu
    d_mu = diff / sig**2 / j_count
    d_sig = (-1.0 / sig + diff**2 / sig**3) / j_count
    g_theta, d_z = _backward(theta, dec_cache, d_mu, d_sig)
    d_z = d_z.reshape(j_count, n, d)
    d_m = d_z.sum(axis=0) - m
    d_h = np.sum(d_z * v, axis=0) + 1.0 / h - h
    g_phi, _ = _backward(phi, enc_cache, d_m, d_h)
    return est, g_phi, g_theta


def _require_j(j_count):
    if j_count < 1:
        raise ValueError(f"number of Monte-Carlo samples must be >= 1, got {j_count}")


def elbo(phi, theta, data, J: int = 8, seed=0) -> ElboEstimate:
    """Monte-Carlo evidence lower bound ``L^s`` summed over the local samples."""
    _require_j(J)
    return _objective(phi, theta, data, J, seed, need_grad=False)[0]


def elbo_grad(phi, theta, data, J: int = 8, seed=0):
    """Exact gradients of the ``J``-sample objective w.r.t. ``phi`` and ``theta``."""
    _require_j(J)
    est, g_phi, g_theta = _objective(phi, theta, data, J, seed, need_grad=True)
    for name, grads in (("encoder", g_phi), ("decoder", g_theta)):
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingFault(f"non-finite {name} gradient in {key} (objective={est.value})")
    return g_phi, g_theta


def _axpy(params, grads, eta):
    return {k: params[k] + eta * grads[k] for k in PARAM_KEYS}


def local_sgd(phi, theta, data, eta: float, J: int = 8, seed=0):
    """One ascent step on the encoder, then the decoder gradient at the new encoder.

    Returns ``(phi_new, d_theta, estimate)`` where ``estimate`` is the
    objective at ``(phi_new, theta)`` on the same Monte-Carlo draws.
    """
    if eta < 0:
        raise ValueError(f"learning rate must be >= 0, got {eta}")
    _require_j(J)
    _, g_phi, _ = _objective(phi, theta, data, J, seed, need_grad=True)
    new_phi = _axpy(phi, g_phi, eta)
    if not all(np.all(np.isfinite(new_phi[k])) for k in PARAM_KEYS):
        raise TrainingFault("non-finite encoder parameters after local step")
    est, _, g_theta = _objective(new_phi, theta, data, J, seed, need_grad=True)
    if not np.isfinite(est.value):
        raise TrainingFault(f"objective is {est.value} after local step")
    for key, g in g_theta.items():
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite decoder gradient in {key}")
    return new_phi, g_theta, est


def flatten_params(params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in PARAM_KEYS])


def unflatten_params(vec: np.ndarray, like) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k in PARAM_KEYS:
        size = like[k].size
        out[k] = vec[pos:pos + size].reshape(like[k].shape).copy()
        pos += size
    return out


def global_step(thetas, grads, eta: float, session: ConsensusSession | None = None):
    """Apply the network-summed decoder gradient at every participant.

    ``thetas`` is either one parameter dict shared by everybody or a list with
    one view per participant.  Without a session the sum is taken directly.
    Returns one updated view per participant.
    """
    s_count = len(grads)
    if isinstance(thetas, dict):
        thetas = [thetas] * s_count
    flat = np.stack([flatten_params(g) for g in grads])
    if session is None:
        sums = np.repeat(flat.sum(axis=0, keepdims=True), s_count, axis=0)
    else:
        sums = session.sum(flat)
    return [_axpy(th, unflatten_params(sv, th), eta) for th, sv in zip(thetas, sums)]


def reconstruction_score(x, m, h, theta, J: int = 64, seed=0) -> np.ndarray:
    """``-(1/J) sum_j ln N(x | mu(z_j), diag(sigma(z_j))^2)`` with ``z_j = m + h * v_j``."""
    _require_j(J)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = np.atleast_2d(m)
    h = np.atleast_2d(h)
    n, d = m.shape
    v = _draws(seed, J, n, d)
    z = (h[np.newaxis] * v + m[np.newaxis]).reshape(J * n, d)
    mu, sig = decoder_forward(theta, z)
    xs = np.broadcast_to(x, (J, n, x.shape[1])).reshape(J * n, -1)
    ll = _gauss_logpdf(xs, mu, sig).reshape(J, n)
    return -ll.mean(axis=0)


def anomaly_scores_mc(x, phi, theta, J: int = 64, seed=0) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, h = encoder_forward(phi, x)
    return reconstruction_score(x, m, h, theta, J, seed)


def anomaly_score_mc(x, phi, theta, J: int = 64, seed=0) -> float:
    """Posterior-averaged negative log-likelihood of one sample."""
    return float(anomaly_scores_mc(np.asarray(x, dtype=float)[np.newaxis], phi, theta, J, seed)[0])


@dataclass
class EpochRecord:
    epoch: int
    participant: int
    objective: float
    kl_term: float
    n_samples: int

    @property
    def mean_kl(self) -> float:
        return -self.kl_term / self.n_samples

    @property
    def collapsed(self) -> bool:
        return self.mean_kl < COLLAPSE_KL


@dataclass
class MtvaeFit:
    theta: dict  # participant 0's view
    thetas: list
    phis: list
    history: list[EpochRecord] = field(default_factory=list)
    epochs: int = 0
    consensus_iterations: list[int] = field(default_factory=list)

    def total_objective(self, epoch: int) -> float:
        return float(sum(r.objective for r in self.history if r.epoch == epoch))


def init_params(input_dim: int, latent_dim: int, hidden_dim: int, n_participants: int, seed=0):
    """Shared decoder from an agreed seed; one encoder per participant."""
    theta = init_mlp(MlpSpec(latent_dim, hidden_dim, input_dim), np.random.default_rng([seed, 0]))
    phis = [init_mlp(MlpSpec(input_dim, hidden_dim, latent_dim), np.random.default_rng([seed, 1, s]))
            for s in range(n_participants)]
    return theta, phis


def _batches(n: int, batch_size: int | None, rng: np.random.Generator, steps: int):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)] * steps
    order = np.concatenate([rng.permutation(n) for _ in range((steps * batch_size) // n + 1)])
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


def fit(datasets, graph: Graph | None, *, latent_dim: int = 2, hidden_dim: int = 16,
        eta: float = 1e-3, J: int = 8, epochs: int = 100, seed=0, batch_size: int | None = None,
        consensus_tol: float = 1e-10, chunks: int = 1, relabel: bool = False,
        init: tuple | None = None) -> MtvaeFit:
    """Alternate local encoder steps and consensus decoder steps.

    Each epoch makes ``ceil(max_s N^s / batch_size)`` steps (one step for
    full-batch training).  Step seeds depend only on ``(seed, epoch, step,
    participant)``.
    """
    datasets = [np.atleast_2d(np.asarray(d, dtype=float)) for d in datasets]
    s_count = len(datasets)
    if graph is None and s_count != 1:
        raise ValueError("a communication graph is required for more than one participant")
    if graph is not None and graph.size != s_count:
        raise ValueError(f"graph has {graph.size} nodes but there are {s_count} datasets")
    m_dim = datasets[0].shape[1]
    if init is None:
        theta, phis = init_params(m_dim, latent_dim, hidden_dim, s_count, seed)
    else:
        theta, phis = init
        phis = [dict(p) for p in phis]
    thetas = [dict(theta) for _ in range(s_count)]
    session = ConsensusSession(graph, tol=consensus_tol, chunks=chunks, seed=seed, relabel=relabel)
    max_n = max(d.shape[0] for d in datasets)
    steps = 1 if batch_size is None else -(-max_n // batch_size)
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        batch_plans = [_batches(d.shape[0], batch_size, np.random.default_rng([seed, 2, epoch, s]), steps)
                       for s, d in enumerate(datasets)]
        for step_i in range(steps):
            grads, ests = [], []
            for s, data in enumerate(datasets):
                batch = data[batch_plans[s][step_i]]
                try:
                    phis[s], g_theta, est = local_sgd(phis[s], thetas[s], batch, eta, J,
                                                      seed=[seed, 3, epoch, step_i, s])
                except TrainingFault as exc:
                    raise TrainingFault(f"epoch {epoch}, participant {s}: {exc}", history) from exc
                grads.append(g_theta)
                ests.append((est, batch.shape[0]))
            thetas = global_step(thetas, grads, eta, session)
        for s, (est, n) in enumerate(ests):
            rec = EpochRecord(epoch, s, est.value, est.kl_term, n)
            history.append(rec)
            if not np.isfinite(est.value):
                raise TrainingFault(f"objective diverged at epoch {epoch} for participant {s}", history)
            if rec.collapsed:
                log.warning("possible posterior collapse: participant %d epoch %d mean KL %.2e",
                            s, epoch, rec.mean_kl)
    return MtvaeFit(thetas[0], thetas, phis, history, epochs, list(session.iterations))


def _params_to_json(p):
    return {k: np.asarray(p[k]).tolist() for k in PARAM_KEYS}


def _params_from_json(doc):
    return {k: np.array(doc[k], dtype=float) for k in PARAM_KEYS}


def save_checkpoint(path, result: MtvaeFit) -> None:
    enc = mlp_spec(result.phis[0])
    doc = {
        "kind": "mtvae",
        "dims": {"input_dim": enc.input_dim, "latent_dim": enc.output_dim, "hidden_dim": enc.hidden_dim},
        "theta": _params_to_json(result.theta),
        "phis": [_params_to_json(p) for p in result.phis],
        "epoch": result.epochs,
        "history": [[r.epoch, r.participant, r.objective, r.kl_term, r.n_samples] for r in result.history],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> MtvaeFit:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "mtvae":
        raise ValueError(f"{path} is not a multi-task VAE checkpoint")
    theta = _params_from_json(doc["theta"])
    phis = [_params_from_json(p) for p in doc["phis"]]
    history = [EpochRecord(int(e), int(s), float(o), float(k), int(n)) for e, s, o, k, n in doc["history"]]
    return MtvaeFit(theta, [theta] * len(phis), phis, history, int(doc["epoch"]))


def write_training_log(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "participant", "objective", "kl_term"])
        for r in history:
            writer.writerow([r.epoch, r.participant, repr(r.objective), repr(r.kl_term)])
