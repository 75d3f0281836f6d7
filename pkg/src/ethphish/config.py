"""Declarative run configuration: one JSON/YAML document with a section per
module, unknown keys rejected, command-line overrides applied on top."""

import dataclasses
import json
from pathlib import Path

import yaml

from .contrastive import ContrastiveConfig
from .errors import ConfigError
from .features import FeatureConfig
from .fundflow import TraceConfig
from .gbdt import GbdtConfig, edge_config, node_config
from .phishtgl import ModelConfig
from .pipeline import EvalProtocol, ExperimentConfig
from .synthetic import SyntheticConfig

SECTIONS = {
    "model": ModelConfig,
    "contrastive": ContrastiveConfig,
    "node_gbdt": GbdtConfig,
    "edge_gbdt": GbdtConfig,
    "protocol": EvalProtocol,
    "trace": TraceConfig,
    "features": FeatureConfig,
    "synthetic": SyntheticConfig,
}
SEEDED = ("model", "contrastive", "node_gbdt", "edge_gbdt", "protocol", "synthetic")
TOP_LEVEL = {"seed": 0, "paths": {}, "tasks": ["node", "edge"], "concat_features": True,
             "holdout": 0.0}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    paths: dict = dataclasses.field(default_factory=dict)
    tasks: list = dataclasses.field(default_factory=lambda: ["node", "edge"])
    concat_features: bool = True
    holdout: float = 0.0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    contrastive: ContrastiveConfig = dataclasses.field(default_factory=ContrastiveConfig)
    node_gbdt: GbdtConfig = dataclasses.field(default_factory=node_config)
    edge_gbdt: GbdtConfig = dataclasses.field(default_factory=edge_config)
    protocol: EvalProtocol = dataclasses.field(default_factory=EvalProtocol)
    trace: TraceConfig = dataclasses.field(default_factory=TraceConfig)
    features: FeatureConfig = dataclasses.field(default_factory=FeatureConfig)
    synthetic: SyntheticConfig = dataclasses.field(default_factory=SyntheticConfig)

    def experiment(self):
        return ExperimentConfig(self.model, self.contrastive, self.node_gbdt, self.edge_gbdt,
                                self.protocol, tuple(self.tasks), self.concat_features, self.holdout)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self, out_dir):
        path = Path(out_dir) / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _build(cls, section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    values = dict(values)
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


def from_dict(doc):
    """Resolve a raw document. Sections that do not set their own seed take
    the global one."""
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    kw = {k: doc.get(k, v) for k, v in TOP_LEVEL.items()}
    if not isinstance(kw["paths"], dict):
        raise ConfigError("paths must be a mapping")
    bad_tasks = set(kw["tasks"]) - {"node", "edge"}
    if bad_tasks:
        raise ConfigError(f"unknown task(s): {sorted(bad_tasks)}")
    for name, cls in SECTIONS.items():
        values = dict(doc.get(name) or {})
        if name in SEEDED and "seed" not in values:
            values["seed"] = seed
        if name == "node_gbdt":
            values = {**dataclasses.asdict(node_config()), **values}
        elif name == "edge_gbdt":
            values = {**dataclasses.asdict(edge_config()), **values}
        kw[name] = _build(cls, name, values)
    return RunConfig(**kw)


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    return doc or {}


def apply_overrides(doc, overrides):
    """``section.key=value`` (or ``key=value`` at top level); values are
    parsed as YAML scalars so numbers and booleans keep their type."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        target = doc
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override inside non-mapping {p!r}")
        target[parts[-1]] = value
    return doc


def resolve(path=None, overrides=None):
    doc = load(path) if path else {}
    return from_dict(apply_overrides(doc, overrides))
