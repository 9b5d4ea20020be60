"""Run configuration: nested dataclasses, file loading, validation and presets.

Config files are YAML or JSON documents with the sections ``data``,
``backbone``, ``ffm``, ``far``, ``losses``, ``schedule`` and ``eval`` plus a
few top-level run keys. Unknown keys are rejected and every validation
problem is reported in a single :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    pad: int = 2
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)


@dataclass
class DataConfig:
    seed: int = 7
    n_identities: int = 12
    n_test_identities: int = 48
    outfits_per_id: tuple[int, int] = (3, 3)
    images_per_outfit: tuple[int, int] = (16, 16)
    n_cameras: int = 3
    image_size: tuple[int, int] = (32, 16)
    noise_std: float = 0.03
    illumination: float = 0.1
    occlusion_p: float = 0.2
    root: str | None = None  # load a dataset directory instead of generating in memory
    # off by default: at 32x16 the full augmentation set keeps the model from fitting
    # within 40 epochs; the "augment" preset restores it
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(flip_p=0.0, pad=0, erase_p=0.0))


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 48, 64)
    strides: tuple[int, ...] = (2, 2, 1)
    final_stride: int = 1
    embed_dim: int = 64
    pooling: str = "max"
    groups: int = 4

    @property
    def stride_schedule(self) -> tuple[int, ...]:
        return tuple(self.strides) + (self.final_stride,)


@dataclass
class FFMConfig:
    radius: float = 0.4
    min_samples: int = 1
    epsilon: float = 0.1
    inv_tau: float = 16.0
    normalize: bool = True
    # dbscan: per-identity density clustering; clothing: ground-truth outfit
    # labels; kmeans: fixed number of clusters per identity
    label_source: str = "dbscan"
    fixed_k: int = 2

    @property
    def tau(self) -> float:
        return 1.0 / self.inv_tau


@dataclass
class FarConfig:
    variant: str = "full"
    P_parts: int = 2
    K_times: int = 1
    sigma_floor: float = 1e-5
    mixup_alpha: float = 0.4
    detach_donor: bool = False
    shared_classifier: bool = True
    # 0: recompose the final map; k in 1..4: recompose the output of stage k
    # and run the remaining stages on the result
    stage: int = 1


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.3
    margin: float = 0.3
    bnneck: bool = False
    id_label_smoothing: float = 0.0


@dataclass
class ScheduleConfig:
    max_epochs: int = 40
    t0: int = 10
    warmup_epochs: int = 5
    lr_start: float = 3.5e-6
    lr_peak: float = 1e-3
    decay_factor: float = 10.0
    decay_every: int = 10
    batch_size: int = 32
    ids_per_batch: int = 8
    instances_per_id: int = 4
    weight_decay: float = 5e-4
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    protocols: tuple[str, ...] = ("standard", "cloth_changing")
    ranks: tuple[int, ...] = (1, 5, 10)


@dataclass
class RunConfig:
    name: str = "fire2"
    out_dir: str = "runs/fire2"
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ffm: FFMConfig = field(default_factory=FFMConfig)
    far: FarConfig = field(default_factory=FarConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"ffm.epsilon": 0.3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.replace("-", "_").split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = value


def _build(cls, raw: dict, prefix: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = prefix + key
        if key not in known:
            problems.append(f"unknown key '{name}'")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name + ".", problems)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                problems.append(f"{name}: expected a list")
                continue
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _build(RunConfig, raw, "", problems)
    if problems:
        raise ConfigError(problems)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Load a config file (YAML/JSON), apply a preset, then dotted overrides."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    problems: list[str] = []
    cfg = _build(RunConfig, raw, "", problems)
    if problems:
        raise ConfigError(problems)
    if preset is not None:
        cfg = apply_preset(cfg, preset)
    if overrides:
        cfg = cfg.replace(**overrides)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    p: list[str] = []
    d = cfg.data
    if d.n_identities < 2:
        p.append("data.n_identities must be >= 2")
    if d.n_test_identities < 1:
        p.append("data.n_test_identities must be >= 1")
    for name in ("outfits_per_id", "images_per_outfit"):
        lo_hi = getattr(d, name)
        if len(lo_hi) != 2 or lo_hi[0] < 1 or lo_hi[0] > lo_hi[1]:
            p.append(f"data.{name} must be a nonempty range [lo, hi] with lo >= 1")
    if d.n_cameras < 1:
        p.append("data.n_cameras must be >= 1")
    if len(d.image_size) != 2 or min(d.image_size) < 8:
        p.append("data.image_size must be (H, W) with each >= 8")
    b = cfg.backbone
    if len(b.widths) != 4 or len(b.strides) != 3:
        p.append("backbone: expected 4 stage widths and 3 strides plus final_stride")
    if b.pooling not in ("avg", "max"):
        p.append("backbone.pooling must be 'avg' or 'max'")
    if any(w % b.groups for w in b.widths):
        p.append("backbone.groups must divide every stage width")
    f = cfg.ffm
    if f.radius <= 0:
        p.append("ffm.radius must be > 0")
    if f.min_samples < 1:
        p.append("ffm.min_samples must be >= 1")
    if not 0 <= f.epsilon < 1:
        p.append("ffm.epsilon must be in [0, 1)")
    if f.inv_tau <= 0:
        p.append("ffm.inv_tau must be > 0")
    if f.label_source not in ("dbscan", "clothing", "kmeans"):
        p.append("ffm.label_source must be dbscan, clothing or kmeans")
    if f.fixed_k < 1:
        p.append("ffm.fixed_k must be >= 1")
    a = cfg.far
    if a.variant not in ("full", "within_id", "between_ids", "none", "mixup"):
        p.append("far.variant must be one of full, within_id, between_ids, none, mixup")
    if a.P_parts < 1:
        p.append("far.P_parts must be >= 1")
    if a.K_times < 1:
        p.append("far.K_times must be >= 1")
    if a.sigma_floor <= 0:
        p.append("far.sigma_floor must be > 0")
    if not 0 <= a.stage <= 4:
        p.append("far.stage must be in 0..4")
    if a.variant == "mixup" and a.mixup_alpha <= 0:
        p.append("far.mixup_alpha must be > 0")
    lo = cfg.losses
    for k in ("lambda1", "lambda2", "lambda3", "lambda4", "margin"):
        if getattr(lo, k) < 0:
            p.append(f"losses.{k} must be >= 0")
    s = cfg.schedule
    if s.max_epochs < 1:
        p.append("schedule.max_epochs must be >= 1")
    if not 0 <= s.t0 <= s.max_epochs:
        p.append("schedule.t0 must satisfy 0 <= t0 <= max_epochs")
    if s.warmup_epochs < 1:
        p.append("schedule.warmup_epochs must be >= 1")
    if s.decay_every < 1 or s.decay_factor <= 0:
        p.append("schedule.decay_every must be >= 1 and decay_factor > 0")
    if s.batch_size != s.ids_per_batch * s.instances_per_id:
        p.append("schedule.batch_size must equal ids_per_batch * instances_per_id")
    if s.ids_per_batch > d.n_identities:
        p.append("schedule.ids_per_batch exceeds data.n_identities")
    for proto in cfg.eval.protocols:
        if proto not in ("standard", "cloth_changing"):
            p.append(f"eval.protocols: unknown protocol '{proto}'")
    if p:
        raise ConfigError(p)


# Every ablation row as dotted overrides on top of the full method.
PRESETS: dict[str, dict[str, Any]] = {
    "fire2": {},
    "baseline-id": {"losses.lambda2": 0.0, "losses.lambda3": 0.0, "losses.lambda4": 0.0,
                    "far.variant": "none"},
    "baseline": {"losses.lambda3": 0.0, "losses.lambda4": 0.0, "far.variant": "none"},
    "ours-w-cloth": {"ffm.label_source": "clothing"},
    "no-attr": {"losses.lambda3": 0.0},
    "no-far": {"losses.lambda4": 0.0, "far.variant": "none"},
    "mixup": {"far.variant": "mixup"},
    "far-within-id": {"far.variant": "within_id"},
    "far-between-ids": {"far.variant": "between_ids"},
}
# 80-epoch schedule; the warm-stage length is ambiguous, so both readings exist.
_LONG_SCHEDULE = {"schedule.max_epochs": 80, "schedule.warmup_epochs": 10, "schedule.decay_every": 20,
                   "schedule.lr_peak": 3.5e-4}
PRESETS["long-t0-20"] = {**_LONG_SCHEDULE, "schedule.t0": 20}
PRESETS["long-t0-30"] = {**_LONG_SCHEDULE, "schedule.t0": 30}
PRESETS["augment"] = {"data.augment.flip_p": 0.5, "data.augment.pad": 2, "data.augment.erase_p": 0.5}
PRESETS["baseline-tri"] = PRESETS["baseline"]
PRESETS["full"] = PRESETS["fire2"]


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(sorted(PRESETS))})")
    out = cfg.replace(**PRESETS[name]) if PRESETS[name] else copy.deepcopy(cfg)
    out.name = name
    return out


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
