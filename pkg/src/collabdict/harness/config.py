"""Experiment configuration (JSON).

Every field has a default; a config file only needs to override what
differs.  The fully resolved configuration is embedded in each report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .synthetic import SyntheticSpec

__all__ = [
    "GraphConfig",
    "ConsensusConfig",
    "GgmConfig",
    "MtvaeConfig",
    "PrivacyConfig",
    "DataConfig",
    "ExperimentConfig",
    "load_config",
]

GRAPH_KINDS = ("inverse-chord", "complete", "random", "path", "file")


@dataclass
class GraphConfig:
    kind: str = "inverse-chord"
    size: int = 5
    p: float = 0.3
    path: str | None = None

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}; choose from {GRAPH_KINDS}")
        if self.kind == "file" and not self.path:
            raise ValueError("graph kind 'file' needs a path")


@dataclass
class ConsensusConfig:
    tol: float = 1e-8
    max_iter: int = 1_000_000
    chunks: int = 1
    relabel: bool = False


@dataclass
class GgmConfig:
    K: int = 2
    lambda0: float = 1.0
    rho: float = 0.1
    delta: float = 1.0
    m0: list[float] | None = None
    tol: float = 1e-5
    max_rounds: int = 200


@dataclass
class MtvaeConfig:
    latent_dim: int = 2
    hidden_dim: int = 16
    eta: float = 1e-4
    J: int = 8
    epochs: int = 500
    batch_size: int | None = None
    score_J: int = 64


@dataclass
class PrivacyConfig:
    enabled: bool = True
    ell0: float = 2.0
    trials: int = 100
    quantile: float = 0.99


@dataclass
class DataConfig:
    """Either a synthetic spec or a directory of per-participant CSV files."""

    synthetic: SyntheticSpec | None = None
    dir: str | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec(**self.synthetic)
        if self.synthetic is None and self.dir is None:
            self.synthetic = SyntheticSpec()
        if self.synthetic is not None and self.dir is not None:
            raise ValueError("data config takes either 'synthetic' or 'dir', not both")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def _build(cls, raw):
    if raw is None:
        return cls()
    if isinstance(raw, cls):
        return raw
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


@dataclass
class ExperimentConfig:
    model: str = "ggm"
    graph: GraphConfig = field(default_factory=GraphConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    ggm: GgmConfig = field(default_factory=GgmConfig)
    mtvae: MtvaeConfig = field(default_factory=MtvaeConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.model not in ("ggm", "mtvae"):
            raise ValueError(f"model must be 'ggm' or 'mtvae', got {self.model!r}")
        self.graph = _build(GraphConfig, self.graph)
        self.consensus = _build(ConsensusConfig, self.consensus)
        self.ggm = _build(GgmConfig, self.ggm)
        self.mtvae = _build(MtvaeConfig, self.mtvae)
        self.privacy = _build(PrivacyConfig, self.privacy)
        self.data = _build(DataConfig, self.data)
        if self.data.dir is not None and not Path(self.data.dir).is_dir():
            raise ValueError(f"data directory {self.data.dir} does not exist")
        if self.graph.kind == "file" and not Path(self.graph.path).is_file():
            raise ValueError(f"graph file {self.graph.path} does not exist")
        if self.data.synthetic is not None and self.data.synthetic.S != self.graph.size:
            raise ValueError(f"graph size {self.graph.size} does not match {self.data.synthetic.S} participants")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
