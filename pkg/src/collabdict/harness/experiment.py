"""End-to-end experiment runs and report export."""

from __future__ import annotations

import contextlib
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import ggm, mtvae, privacy, topology
from ..errors import StageError
from .config import ExperimentConfig
from .metrics import auc
from .synthetic import generate_synthetic, train_test_split

__all__ = ["RunReport", "run_experiment", "export_report", "load_data_dir", "write_data_dir", "build_graph"]


@dataclass
class RunReport:
    config: dict
    model: str
    history: list[dict]
    consensus_iterations: list[int]
    scores: list[dict]  # participant, index, score, label
    auc: float | None
    privacy: dict | None
    timings: dict[str, float]
    fit: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC {self.auc} outside [0, 1]")

    def to_dict(self, timings: bool = True) -> dict:
        doc = {
            "config": self.config,
            "model": self.model,
            "history": self.history,
            "consensus_iterations": self.consensus_iterations,
            "auc": self.auc,
            "privacy": self.privacy,
            "n_test": len(self.scores),
        }
        if timings:
            doc["timings"] = self.timings
        return doc

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - start


def build_graph(cfg) -> topology.Graph:
    g = cfg.graph
    if g.kind == "inverse-chord":
        return topology.build_cycle_inverse_chord(g.size)
    if g.kind == "complete":
        return topology.build_complete(g.size)
    if g.kind == "path":
        return topology.build_path(g.size)
    if g.kind == "random":
        return topology.build_random_connected(g.size, g.p, seed=[cfg.seed, 7])
    graph = topology.read_edge_list(g.path)
    if graph.size != g.size:
        raise ValueError(f"graph file has {graph.size} nodes, config says {g.size}")
    return graph


def write_data_dir(out_dir, datasets, labels=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, d in enumerate(datasets):
        ggm.write_dataset(out / f"participant_{s}.csv", d)
        if labels is not None:
            np.savetxt(out / f"labels_{s}.csv", np.asarray(labels[s], dtype=int), fmt="%d")


def load_data_dir(path) -> tuple[list[np.ndarray], list[np.ndarray] | None]:
    """Read ``participant_<s>.csv`` files and, if all present, ``labels_<s>.csv``."""
    root = Path(path)
    files = sorted(root.glob("participant_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no participant_<s>.csv files in {root}")
    datasets = [ggm.read_dataset(f) for f in files]
    label_files = [root / f"labels_{f.stem.split('_')[1]}.csv" for f in files]
    if not all(lf.is_file() for lf in label_files):
        return datasets, None
    labels = [np.atleast_1d(np.loadtxt(lf, dtype=int)) for lf in label_files]
    for s, (d, lab) in enumerate(zip(datasets, labels)):
        if lab.shape[0] != d.shape[0]:
            raise ValueError(f"participant {s}: {d.shape[0]} samples but {lab.shape[0]} labels")
    return datasets, labels


def _split(datasets, labels, fraction, seed):
    train, test, test_labels = [], [], []
    for s, d in enumerate(datasets):
        lab = labels[s] if labels is not None else np.zeros(d.shape[0], dtype=int)
        tr, _, te, te_lab = train_test_split(d, lab, fraction, seed=[seed, 9, s])
        train.append(tr)
        test.append(te)
        test_labels.append(te_lab if labels is not None else None)
    return train, test, test_labels


def _fit_ggm(cfg, graph, train):
    c = cfg.ggm
    hyper = ggm.GgmHyper(c.lambda0, c.rho, c.delta, None if c.m0 is None else tuple(c.m0))
    result = ggm.fit(train, graph, hyper, c.K, seed=cfg.seed, tol=c.tol, max_rounds=c.max_rounds,
                     consensus_tol=cfg.consensus.tol, chunks=cfg.consensus.chunks,
                     relabel=cfg.consensus.relabel)
    history = [{"round": h.round, "n_components": h.n_components, "objective": h.objective,
                "change": h.change, "view_spread": h.view_spread,
                "consensus_iterations": h.consensus_iterations} for h in result.history]
    iters = [h.consensus_iterations for h in result.history]
    return result, history, iters


def _fit_mtvae(cfg, graph, train):
    c = cfg.mtvae
    m_dim = train[0].shape[1]
    init = mtvae.init_params(m_dim, c.latent_dim, c.hidden_dim, len(train), cfg.seed)
    # Epoch 0 is the untrained model so the history is never empty.
    history = [{"epoch": 0, "objective": float(sum(
        mtvae.elbo(p, init[0], d, c.J, seed=[cfg.seed, 5, s]).value for s, (p, d) in enumerate(zip(init[1], train))))}]
    result = mtvae.fit(train, graph, latent_dim=c.latent_dim, hidden_dim=c.hidden_dim, eta=c.eta, J=c.J,
                       epochs=c.epochs, seed=cfg.seed, batch_size=c.batch_size,
                       consensus_tol=cfg.consensus.tol, chunks=cfg.consensus.chunks,
                       relabel=cfg.consensus.relabel, init=init)
    for e in range(c.epochs):
        recs = [r for r in result.history if r.epoch == e]
        history.append({"epoch": e + 1, "objective": float(sum(r.objective for r in recs)),
                        "min_mean_kl": float(min(r.mean_kl for r in recs))})
    return result, history, list(result.consensus_iterations)


def _score(cfg, result, test):
    out = []
    for s, x in enumerate(test):
        if x.shape[0] == 0:
            out.append(np.empty(0))
        elif cfg.model == "ggm":
            out.append(ggm.anomaly_scores(x, result.weights[s], result.views[s]))
        else:
            out.append(mtvae.anomaly_scores_mc(x, result.phis[s], result.thetas[s], cfg.mtvae.score_J,
                                               seed=[cfg.seed, 4, s]))
    return out


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Build the graph, get data, fit, score the held-out split and audit privacy.

    Any failure is re-raised as :class:`StageError` naming the stage.
    """
    stages = _Stages()
    start = time.perf_counter()
    cfg = config
    with stages("graph"):
        graph = build_graph(cfg)
        if not topology.is_connected(graph):
            raise ValueError("communication graph is not connected")
    with stages("data"):
        if cfg.data.synthetic is not None:
            syn = generate_synthetic(cfg.data.synthetic)
            datasets, labels = syn.datasets, syn.labels
        else:
            datasets, labels = load_data_dir(cfg.data.dir)
        if len(datasets) != graph.size:
            raise ValueError(f"{len(datasets)} datasets but the graph has {graph.size} nodes")
        train, test, test_labels = _split(datasets, labels, cfg.data.test_fraction, cfg.seed)
    with stages("fit"):
        fitter = _fit_ggm if cfg.model == "ggm" else _fit_mtvae
        result, history, iters = fitter(cfg, graph, train)
    with stages("score"):
        scores = _score(cfg, result, test)
        table = []
        for s, (sc, lab) in enumerate(zip(scores, test_labels)):
            for i, v in enumerate(sc):
                table.append({"participant": s, "index": i, "score": float(v),
                              "label": None if lab is None else int(lab[i])})
        value = None
        if labels is not None:
            value = auc([r["score"] for r in table], [r["label"] for r in table])
    report_privacy = None
    if cfg.model == "ggm" and cfg.privacy.enabled:
        with stages("privacy"):
            p = cfg.privacy
            report_privacy = privacy.privacy_report(result.model, result.weights, train, ell0=p.ell0,
                                                    trials=p.trials, quantile=p.quantile, seed=[cfg.seed, 6])
    timings = dict(stages.timings)
    timings["total"] = time.perf_counter() - start
    return RunReport(cfg.to_dict(), cfg.model, history, iters, table, value, report_privacy, timings, result)


def export_report(report: RunReport, out_dir) -> dict[str, Path]:
    """Write ``report.json`` and ``scores.csv`` (plus the model checkpoint when available)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "scores": out / "scores.csv"}
    paths["report"].write_text(report.to_json())
    with open(paths["scores"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["participant", "index", "score", "label"])
        for r in report.scores:
            writer.writerow([r["participant"], r["index"], repr(r["score"]),
                             "" if r["label"] is None else r["label"]])
    if isinstance(report.fit, ggm.GgmFit):
        paths["model"] = out / "model.json"
        ggm.save_checkpoint(paths["model"], report.fit.model, report.fit.weights)
    elif isinstance(report.fit, mtvae.MtvaeFit):
        paths["model"] = out / "model.json"
        mtvae.save_checkpoint(paths["model"], report.fit)
        paths["training_log"] = out / "training_log.csv"
        mtvae.write_training_log(paths["training_log"], report.fit.history)
    return paths
