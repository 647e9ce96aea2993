"""Experiment configuration as an INI file with one section per pipeline stage."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dynamics import DatasetSpec
from .predictor import TrainConfig

TOOL_VERSION = "0.1.0"
METHODS = ("vpeg", "fixed_prior", "example_kl")

# stage -> sections it depends on
STAGES = {
    "data": ("data",),
    "features": ("data", "features"),
    "index": ("data", "features", "retrieval"),
    "train": ("data", "features", "retrieval", "train"),
    "eval": ("data", "features", "retrieval", "train", "eval"),
}


@dataclass
class FeatureConfig:
    kind: str = "position"   # position | learned
    c_b: int = 2
    c_h: int = 2
    epochs: int = 50
    lr: float = 2e-3
    batch: int = 32
    seed: int = 0


@dataclass
class RetrievalConfig:
    K: int = 5
    use_diff: bool = True
    random: bool = False     # uniform examples instead of nearest


@dataclass
class EvalConfig:
    samples: int = 20
    P_list: tuple = (1, 5, 10, 20)
    trials: int = 4
    margin: float = 0.7
    seed: int = 99


@dataclass
class ExperimentConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    method: str = "vpeg"
    out: str = "runs/default"

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.features.kind not in ("position", "learned"):
            raise ValueError(f"unknown feature kind {self.features.kind!r}")
        self.data.validate(self.retrieval.K)
        self.train.validate()
        if self.train.K != self.retrieval.K:
            raise ValueError("train.K and retrieval.K disagree")
        return self

    def section(self, name: str) -> dict:
        if name == "train":
            d = asdict(self.train)
            d["method"] = self.method
            return d
        obj = getattr(self, name)
        return obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)

    def stage_hash(self, stage: str) -> str:
        doc = {s: self.section(s) for s in STAGES[stage]}
        blob = json.dumps(doc, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self, stage: str) -> dict:
        """Metadata embedded in every artifact of ``stage``."""
        return {"config_hash": self.stage_hash(stage), "stage": stage,
                "seed": int(self.train.seed if stage in ("train", "eval") else self.data.seed),
                "tool_version": TOOL_VERSION}

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with dotted overrides, e.g. ``{"retrieval.K": 3}``."""
        cfg = from_text(to_text(self))
        for key, val in kw.items():
            sec, _, name = key.partition(".")
            if not name:
                setattr(cfg, sec, val)
                continue
            obj = getattr(cfg, sec)
            if isinstance(obj, DatasetSpec):
                d = obj.to_dict()
                d[name] = val
                cfg.data = DatasetSpec.from_dict(d)
            else:
                setattr(obj, name, val)
        if "retrieval.K" in kw and "train.K" not in kw:
            cfg.train.K = kw["retrieval.K"]
        return cfg


def _parse(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _fill(cls, items: dict, section: str):
    default = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kw = {k: _parse(v, getattr(default, k)) for k, v in items.items()}
    return cls(**{**asdict(default), **kw}) if cls is not DatasetSpec else \
        DatasetSpec.from_dict({**default.to_dict(), **kw})


def from_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive (K, M, H)
    cp.read_string(text)
    allowed = {"data", "features", "retrieval", "train", "eval", "run"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in allowed}
    run = sec.pop("run")
    if set(run) - {"method", "out"}:
        raise ValueError(f"unknown keys in [run]: {sorted(set(run) - {'method', 'out'})}")
    cfg = ExperimentConfig(
        data=_fill(DatasetSpec, sec["data"], "data"),
        features=_fill(FeatureConfig, sec["features"], "features"),
        retrieval=_fill(RetrievalConfig, sec["retrieval"], "retrieval"),
        train=_fill(TrainConfig, sec["train"], "train"),
        eval=_fill(EvalConfig, sec["eval"], "eval"),
        method=run.get("method", "vpeg"),
        out=run.get("out", "runs/default"),
    )
    return cfg


def to_text(cfg: ExperimentConfig) -> str:
    lines = ["[run]", f"method = {cfg.method}", f"out = {cfg.out}", ""]
    for name in ("data", "features", "retrieval", "train", "eval"):
        obj = getattr(cfg, name)
        d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
        lines.append(f"[{name}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in d.items()]
        lines.append("")
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    return from_text(p.read_text())
