"""Experiment configuration: one JSON document, every field optional."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapt import AdaptConfig
from .baselines import POLICIES, IdmParams
from .data import DataConfig
from .edn import EdnConfig
from .sgn import SgnConfig


@dataclass
class CorpusConfig:
    scenario: str = "intersection"
    n_episodes: int = 25
    n_agents: int = 10
    n_frames: int = 400
    style_shift: float = 0.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    train_frac: float = 0.8
    test_frac: float = 0.2
    train: CorpusConfig = field(default_factory=CorpusConfig)
    transfer: CorpusConfig = field(default_factory=lambda: CorpusConfig("roundabout", 10, seed=1))
    shift: CorpusConfig = field(default_factory=lambda: CorpusConfig("intersection", 3, style_shift=0.5, seed=7))
    data: DataConfig = field(default_factory=lambda: DataConfig(stride=5))
    sgn: SgnConfig = field(default_factory=lambda: SgnConfig(epochs=12))
    edn: EdnConfig = field(default_factory=lambda: EdnConfig(epochs=10))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    baselines: tuple = POLICIES
    # goals fed to the trajectory network at eval time: "sgn" or "truth"
    eval_goal: str = "sgn"

    def __post_init__(self):
        if abs(self.train_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("train and test fractions must sum to 1")
        if self.eval_goal not in ("sgn", "truth"):
            raise ValueError("eval_goal must be 'sgn' or 'truth'")
        unknown = [b for b in self.baselines if b not in POLICIES]
        if unknown:
            raise ValueError(f"unknown baselines {unknown}")
        self.baselines = tuple(self.baselines)
        self.adapt.layers = tuple(self.adapt.layers)
        if self.data.T_h != self.edn.T_h or self.data.T_f != self.edn.T_f:
            raise ValueError("data and trajectory network disagree on T_h / T_f")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_NESTED = {"train": CorpusConfig, "transfer": CorpusConfig, "shift": CorpusConfig, "data": DataConfig,
           "sgn": SgnConfig, "edn": EdnConfig, "adapt": AdaptConfig, "idm": IdmParams}


def _build(cls, doc: dict, where: str):
    names = {f.name for f in fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ValueError(f"unknown keys in {where}: {sorted(extra)}")
    kw = {}
    for k, v in doc.items():
        if k in _NESTED and cls is ExperimentConfig:
            if not isinstance(v, dict):
                raise ValueError(f"{where}.{k} must be an object")
            kw[k] = _build(_NESTED[k], v, f"{where}.{k}")
        else:
            kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def from_dict(doc: dict) -> ExperimentConfig:
    # T_h / T_f given once in ``data`` apply to the trajectory network too
    data = doc.get("data")
    if isinstance(data, dict):
        edn_doc = dict(doc.get("edn") or {})
        for k in ("T_h", "T_f"):
            if k in data:
                edn_doc.setdefault(k, data[k])
        doc = {**doc, "edn": edn_doc}
    return _build(ExperimentConfig, doc, "config")


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if seed is not None:
        doc["seed"] = seed
    cfg = from_dict(doc)
    if seed is not None:
        # one seed drives every model and split
        cfg.sgn.seed = cfg.edn.seed = seed
    return cfg
