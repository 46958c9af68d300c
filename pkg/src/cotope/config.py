"""Experiment configuration: one YAML file fully determines a run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError

GRAPH_SOURCES = ("chain", "synthetic", "files")


@dataclass(frozen=True)
class GraphSection:
    source: str = "chain"
    # chain
    labels: tuple = ("a", "b", "c")
    relation_label: str = "to"
    # synthetic
    num_entities: int = 50
    num_relations: int = 10
    edges_per_entity: int = 3
    relation_skew: float = 0.0
    # files
    triples: Optional[str] = None
    entity_labels: Optional[str] = None
    relation_labels: Optional[str] = None


@dataclass(frozen=True)
class WalkSection:
    count: int = 200
    hop_range: tuple = (1, 2)
    no_revisit: bool = False


@dataclass(frozen=True)
class PolicySection:
    k: int = 1
    smoothing: float = 1.0


@dataclass(frozen=True)
class PreferenceSection:
    noise: float = 0.3
    k_q: int = 10
    learning_rate: float = 1e-3
    epochs: int = 10


@dataclass(frozen=True)
class LoggingSection:
    count: int = 200
    hop_range: tuple = (1, 2)


@dataclass(frozen=True)
class EstimatorSection:
    delta: float = 0.05
    weight_cap: Optional[float] = None
    reward_floor: float = -20.0


@dataclass(frozen=True)
class OptimizerSection:
    learning_rate: float = 0.05
    steps: int = 100
    max_backtracks: int = 20
    kl_threshold: float = 0.05


@dataclass(frozen=True)
class VerifySection:
    instances: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    templates: Optional[str] = None
    graph: GraphSection = GraphSection()
    walks: WalkSection = WalkSection()
    policy: PolicySection = PolicySection()
    preference: PreferenceSection = PreferenceSection()
    logging: LoggingSection = LoggingSection()
    estimator: EstimatorSection = EstimatorSection()
    optimizer: OptimizerSection = OptimizerSection()
    verify: VerifySection = VerifySection()
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return _plain(d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def validate(self) -> None:
        errors = []

        def need(cond, msg):
            if not cond:
                errors.append(msg)

        g = self.graph
        need(g.source in GRAPH_SOURCES, f"graph.source must be one of {GRAPH_SOURCES}")
        if g.source == "chain":
            need(len(g.labels) >= 2 and all(str(x).strip() for x in g.labels), "graph.labels needs at least two non-empty labels")
        elif g.source == "synthetic":
            need(g.num_entities >= 2, "graph.num_entities must be at least 2")
            need(g.num_relations >= 1, "graph.num_relations must be positive")
            need(g.edges_per_entity >= 1, "graph.edges_per_entity must be positive")
            need(g.relation_skew >= 0, "graph.relation_skew must be non-negative")
        elif g.source == "files":
            for key in ("triples", "entity_labels", "relation_labels"):
                p = self.resolve(getattr(g, key))
                need(p is not None and p.is_file(), f"graph.{key} must name an existing file")
        if self.templates is not None:
            need(self.resolve(self.templates).is_file(), f"templates file {self.templates!r} does not exist")
        for sec in ("walks", "logging"):
            s = getattr(self, sec)
            need(s.count >= 1, f"{sec}.count must be positive")
            hr = s.hop_range
            need(len(hr) == 2 and 1 <= hr[0] <= hr[1], f"{sec}.hop_range must be [lo, hi] with 1 <= lo <= hi")
        need(self.policy.k >= 0, "policy.k must be non-negative")
        need(self.policy.smoothing > 0, "policy.smoothing must be positive")
        p = self.preference
        need(0.0 <= p.noise <= 1.0, "preference.noise must lie in [0, 1]")
        need(p.k_q >= 1, "preference.k_q must be positive")
        need(p.learning_rate >= 0, "preference.learning_rate must be non-negative")
        need(p.epochs >= 1, "preference.epochs must be positive")
        e = self.estimator
        need(0.0 < e.delta < 1.0, f"estimator.delta must lie in (0, 1), got {e.delta}")
        need(e.weight_cap is None or e.weight_cap > 0, "estimator.weight_cap must be positive or null")
        need(e.reward_floor < 0, "estimator.reward_floor must be negative")
        o = self.optimizer
        need(o.learning_rate >= 0, "optimizer.learning_rate must be non-negative")
        need(o.steps >= 0, "optimizer.steps must be non-negative")
        need(o.max_backtracks >= 0, "optimizer.max_backtracks must be non-negative")
        need(o.kl_threshold > 0, "optimizer.kl_threshold must be positive")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        if errors:
            raise ConfigurationError("invalid configuration: " + "; ".join(errors))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise ConfigurationError(f"section {name!r}: {exc}") from None


_SECTIONS = {
    "graph": GraphSection,
    "walks": WalkSection,
    "policy": PolicySection,
    "preference": PreferenceSection,
    "logging": LoggingSection,
    "estimator": EstimatorSection,
    "optimizer": OptimizerSection,
    "verify": VerifySection,
}


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a mapping")
    top = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {k: v for k, v in raw.items() if k not in _SECTIONS}
    for key, cls in _SECTIONS.items():
        kw[key] = _section(cls, raw.get(key), key)
    cfg = ExperimentConfig(**kw, base_dir=str(base_dir))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw or {}, path.parent)


def bundled_config_path(name: str = "toy-chain") -> Path:
    return Path(__file__).parent / "data" / f"{name}.yaml"
