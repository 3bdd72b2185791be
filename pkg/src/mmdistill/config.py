"""Experiment configuration: YAML sections model / data / train / distill / ablation.

Every key is validated; a misspelt key is an error rather than a silent default.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import FAMILIES, GridConfig
from .errors import ConfigurationError
from .losses import DistillConfig, align_layers
from .model import ModelSpec, VisualEncoderSpec
from .train import TrainConfig

REGENERATION_MODES = ("none", "teacher", "student")


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _dataclass_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class ModelSection:
    teacher: ModelSpec
    student: ModelSpec
    teacher_seed: int = 0
    student_seed: int = 1
    student_init: str = "random"  # random | every_other
    keep_every: int = 2


@dataclass
class DataSection:
    train_size: int = 8000
    eval_size: int = 1000
    pretrain_size: int = 2000
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    families: tuple[str, ...] = FAMILIES
    pretrain_families: tuple[str, ...] = ("describe",)
    regenerate: str = "none"
    student_fraction: float = 0.5

    def __post_init__(self):
        if self.regenerate not in REGENERATION_MODES:
            raise ConfigurationError(f"regenerate must be one of {REGENERATION_MODES}, got {self.regenerate!r}")
        if min(self.train_size, self.eval_size, self.pretrain_size) < 1:
            raise ConfigurationError("dataset sizes must be >= 1")


@dataclass
class AblationRow:
    name: str
    distill: DistillConfig
    regenerate: str = "none"

    def to_dict(self) -> dict:
        return {"name": self.name, "distill": self.distill.to_dict(), "regenerate": self.regenerate}


@dataclass
class AblationSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    rows: list[AblationRow] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    model: ModelSection
    data: DataSection
    teacher_train: TrainConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    distill: DistillConfig
    ablation: AblationSection
    raw: dict = field(default_factory=dict, repr=False)

    def digest(self, *sections: str) -> str:
        """Stable hash of the named raw sections, used to key cached artifacts."""
        picked = {s: self.raw.get(s) for s in sections}
        return hashlib.sha256(json.dumps(picked, sort_keys=True, default=str).encode()).hexdigest()[:16]


DEFAULTS: dict[str, Any] = {
    "model": {
        "vocab_size": 512,
        "max_seq_len": 128,
        "encoder": {},
        "teacher": {"num_layers": 4, "hidden_dim": 128, "num_heads": 4},
        "student": {"num_layers": 2, "hidden_dim": 64, "num_heads": 2},
        "teacher_seed": 0,
        "student_seed": 1,
        "student_init": "random",
        "keep_every": 2,
    },
    "data": {},
    "train": {"teacher": {}, "pretrain": {}, "finetune": {}},
    "distill": {},
    "ablation": {"seeds": [0, 1, 2], "rows": []},
}

_MODEL_SHARED = {"vocab_size", "max_seq_len", "encoder"}
_MODEL_PER_ROLE = {"num_layers", "hidden_dim", "num_heads", "mlp_ratio"}
_DATA_KEYS = {"train_size", "eval_size", "pretrain_size", "seed", "rows", "cols", "fill_percent",
              "families", "pretrain_families", "regenerate", "student_fraction"}
_TRAIN_KEYS = _dataclass_keys(TrainConfig) - {"stage"}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _distill(section: str, d: dict) -> DistillConfig:
    _check_keys(section, d, DistillConfig.field_names())
    d = dict(d)
    if "feature_layers" in d:
        d["feature_layers"] = tuple(int(i) for i in d["feature_layers"])
    try:
        return DistillConfig(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from None


def _train(section: str, d: dict, stage: str) -> TrainConfig:
    _check_keys(section, d, _TRAIN_KEYS)
    return TrainConfig(stage=stage, **d)


def _model(d: dict) -> ModelSection:
    _check_keys("model", d, _MODEL_SHARED | {"teacher", "student", "teacher_seed", "student_seed",
                                             "student_init", "keep_every"})
    _check_keys("model.encoder", d["encoder"], _dataclass_keys(VisualEncoderSpec))
    enc = VisualEncoderSpec(**d["encoder"])
    specs = {}
    for role in ("teacher", "student"):
        _check_keys(f"model.{role}", d[role], _MODEL_PER_ROLE)
        specs[role] = ModelSpec(vocab_size=d["vocab_size"], max_seq_len=d["max_seq_len"], role=role,
                                encoder=enc, **d[role])
    if d["student_init"] not in ("random", "every_other"):
        raise ConfigurationError(f"student_init must be random or every_other, got {d['student_init']!r}")
    return ModelSection(specs["teacher"], specs["student"], int(d["teacher_seed"]), int(d["student_seed"]),
                        d["student_init"], int(d["keep_every"]))


def _data(d: dict) -> DataSection:
    _check_keys("data", d, _DATA_KEYS)
    d = dict(d)
    grid = GridConfig(**{k: d.pop(k) for k in ("rows", "cols", "fill_percent") if k in d})
    for k in ("families", "pretrain_families"):
        if k in d:
            d[k] = tuple(d[k])
    return DataSection(grid=grid, **d)


def _ablation(d: dict) -> AblationSection:
    _check_keys("ablation", d, {"seeds", "rows"})
    seeds = tuple(int(s) for s in d["seeds"])
    if not seeds:
        raise ConfigurationError("ablation needs at least one seed")
    rows, seen = [], set()
    for i, r in enumerate(d["rows"]):
        _check_keys(f"ablation.rows[{i}]", r, {"name", "distill", "regenerate"})
        if "name" not in r:
            raise ConfigurationError(f"ablation.rows[{i}] has no name")
        if r["name"] in seen:
            raise ConfigurationError(f"duplicate ablation row name {r['name']!r}")
        seen.add(r["name"])
        regen = r.get("regenerate", "none")
        if regen not in REGENERATION_MODES:
            raise ConfigurationError(f"ablation row {r['name']!r}: unknown regenerate mode {regen!r}")
        rows.append(AblationRow(r["name"], _distill(f"ablation.rows[{i}].distill", r.get("distill", {})), regen))
    return AblationSection(seeds, rows)


def _fit_encoder_to_grid(merged: dict) -> None:
    """One patch per grid cell: fill in the image size, or reject one that disagrees."""
    enc, data = merged["model"]["encoder"], merged["data"]
    if not isinstance(enc, dict) or not isinstance(data, dict):
        return
    grid = GridConfig(**{k: data[k] for k in ("rows", "cols", "fill_percent") if k in data})
    patch = enc.get("patch_size", VisualEncoderSpec.patch_size)
    for key, cells in (("image_height", grid.rows), ("image_width", grid.cols)):
        want = cells * patch
        if enc.setdefault(key, want) != want:
            raise ConfigurationError(f"model.encoder.{key}={enc[key]} does not match {cells} grid cells "
                                     f"of {patch} pixels")


def build_config(raw: dict | None = None) -> ExperimentConfig:
    """Validate a (partial) raw mapping against the defaults and build typed sections."""
    raw = raw or {}
    _check_keys("top level", raw, DEFAULTS)
    merged = _merge(DEFAULTS, raw)
    _check_keys("train", merged["train"], {"teacher", "pretrain", "finetune"})
    _fit_encoder_to_grid(merged)
    cfg = ExperimentConfig(
        model=_model(merged["model"]),
        data=_data(merged["data"]),
        teacher_train=_train("train.teacher", merged["train"]["teacher"], "finetune"),
        pretrain=_train("train.pretrain", merged["train"]["pretrain"], "pretrain"),
        finetune=_train("train.finetune", merged["train"]["finetune"], "finetune"),
        distill=_distill("distill", merged["distill"]),
        ablation=_ablation(merged["ablation"]),
        raw=merged,
    )
    depths = cfg.model.student.num_layers, cfg.model.teacher.num_layers
    for d in [cfg.distill] + [r.distill for r in cfg.ablation.rows]:
        if d.feature_loss != "none":
            align_layers(d.feature_layers, *depths)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"could not parse {path}: {exc}") from None
    return build_config(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
