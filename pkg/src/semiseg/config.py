"""Experiment configuration, ablation presets and config-file / environment loading.

Config files are YAML whose keys mirror :class:`ExperimentConfig`. Any field
can be overridden from the environment with ``SEMISEG_<FIELD>``; nested fields
use a double underscore, e.g. ``SEMISEG_SCHEDULE__T_MAX=300``. Values are
parsed as YAML scalars.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

ENV_PREFIX = "SEMISEG_"


@dataclass
class ScheduleConfig:
    lambda_e: float = 0.9
    beta: float = 1.0
    temperature: float = 2.0
    t_max: int = 2000
    batch_size: int = 8

    def __post_init__(self):
        if not 0 < self.lambda_e <= 1:
            raise ValueError(f"lambda_e must be in (0, 1], got {self.lambda_e}")
        for k in ("beta", "temperature", "t_max", "batch_size"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive, got {getattr(self, k)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must hold at least one labeled and one unlabeled image")


@dataclass
class ModelConfig:
    subnet_depth: int = 4
    subnet_width: int = 16
    ham_width: int = 16
    teacher_dim: int = 64
    num_prompts: int = 4
    teacher_depth: int = 2
    teacher_heads: int = 2


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    teacher_lr: float = 1e-4


@dataclass
class UgdaConfig:
    topk: int = 5
    bidirectional: bool = True
    brightness: float = 0.3
    contrast: float = 0.3
    blur_p: float = 0.5
    noise_std: float = 0.02


@dataclass
class FoundationConfig:
    """Offline teacher pretraining on a separate synthetic corpus (own seed, no shared images)."""
    n: int = 2000
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 99
    contrast: tuple[float, float] = (0.15, 0.35)
    noise: float = 0.05

    def __post_init__(self):
        self.contrast = tuple(self.contrast)


@dataclass
class ExperimentConfig:
    name: str = "default"
    data_root: str | None = None
    synthetic: dict | None = field(default_factory=lambda: {"n": 500, "size": 64})
    test_n: int = 100
    labeled_fraction: float = 0.1
    num_classes: int = 2
    in_channels: int = 1
    image_size: int = 64
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ugda: UgdaConfig = field(default_factory=UgdaConfig)
    foundation: FoundationConfig = field(default_factory=FoundationConfig)
    # "pretrained" loads cached foundation weights, "random" keeps the seeded draw
    teacher_init: str = "pretrained"
    use_sam_distill: bool = True
    use_entropy_loss: bool = True
    use_mutual_loss: bool = True
    use_ugda: bool = True
    use_unlabeled: bool = True
    ham_views: tuple[str, ...] = ("pred", "H", "M")
    kd_direction: str = "teacher"
    kd_scale_t2: bool = True
    alternate_updates: bool = False
    deterministic: bool = True

    def __post_init__(self):
        for k, typ in _NESTED.items():
            if isinstance(getattr(self, k), dict):
                setattr(self, k, typ(**getattr(self, k)))
        self.ham_views = tuple(self.ham_views)
        if "pred" not in self.ham_views:
            raise ValueError("ham_views must contain 'pred'")
        bad = set(self.ham_views) - {"pred", "H", "M"}
        if bad:
            raise ValueError(f"unknown ham views {sorted(bad)}")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.teacher_init not in ("pretrained", "random"):
            raise ValueError(f"teacher_init must be 'pretrained' or 'random', got {self.teacher_init!r}")
        if self.kd_direction not in ("teacher", "student"):
            raise ValueError(f"kd_direction must be 'teacher' or 'student', got {self.kd_direction!r}")

    @property
    def iterations(self) -> int:
        return self.schedule.t_max

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ham_views"] = list(self.ham_views)
        d["foundation"]["contrast"] = list(self.foundation.contrast)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        return self.from_dict(_merge(self.to_dict(), overrides))


_NESTED = {"schedule": ScheduleConfig, "model": ModelConfig,
           "optim": OptimConfig, "ugda": UgdaConfig, "foundation": FoundationConfig}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# presets

_LOSS_ROWS = {
    "losses-sup": dict(use_entropy_loss=False, use_mutual_loss=False, use_sam_distill=False),
    "losses-sup+ent": dict(use_entropy_loss=True, use_mutual_loss=False, use_sam_distill=False),
    "losses-sup+mut": dict(use_entropy_loss=False, use_mutual_loss=True, use_sam_distill=False),
    "losses-sup+kd": dict(use_entropy_loss=False, use_mutual_loss=False, use_sam_distill=True),
    "losses-sup+ent+mut": dict(use_entropy_loss=True, use_mutual_loss=True, use_sam_distill=False),
    "losses-all": dict(use_entropy_loss=True, use_mutual_loss=True, use_sam_distill=True),
}

PRESETS: dict[str, dict[str, Any]] = {
    # HAM view ablation, run without teacher distillation
    "views-pred": dict(ham_views=["pred"], use_sam_distill=False),
    "views-pred+H": dict(ham_views=["pred", "H"], use_sam_distill=False),
    "views-pred+H+M": dict(ham_views=["pred", "H", "M"], use_sam_distill=False),
    **_LOSS_ROWS,
    # augmentation ablation, run without teacher distillation
    "ugda-on": dict(use_ugda=True, use_sam_distill=False),
    "ugda-off": dict(use_ugda=False, use_sam_distill=False),
    # labeled data only: no unlabeled images, no unsupervised terms
    "supervised-only": dict(use_entropy_loss=False, use_mutual_loss=False,
                            use_sam_distill=False, use_ugda=False, use_unlabeled=False),
    # the full-scale protocol: 256x256 images, 50k iterations
    "full-scale": dict(image_size=256, synthetic={"n": 500, "size": 256},
                       schedule={"t_max": 50000, "batch_size": 24},
                       model={"subnet_width": 64, "teacher_dim": 256}),
}

PRESET_GROUPS = {
    "views": [k for k in PRESETS if k.startswith("views-")],
    "losses": list(_LOSS_ROWS),
    "ugda": ["ugda-on", "ugda-off"],
}


def apply_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    out = cfg.replace(**PRESETS[preset])
    out.name = preset if cfg.name == "default" else f"{cfg.name}-{preset}"
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX) or key in ("SEMISEG_DEBUG", "SEMISEG_CACHE"):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def load_config(path: str | None = None, preset: str | None = None,
                environ=None, **overrides) -> ExperimentConfig:
    d: dict = {}
    if path:
        with open(path) as f:
            d = yaml.safe_load(f) or {}
    d = _merge(d, env_overrides(environ))
    cfg = ExperimentConfig.from_dict(d)
    if preset:
        cfg = apply_preset(cfg, preset)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg
