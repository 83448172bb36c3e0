"""Run configuration: architecture, training and evaluation knobs.

Every knob is addressable by a flat dotted key (``model.head_width``,
``train.alpha`` ...). Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_keypoints: int = 17
    levels: tuple[int, ...] = (3, 4, 5)
    backbone_widths: tuple[int, ...] = (16, 32, 48, 64)
    fpn_channels: int = 32
    tower_depth: int = 2
    kpt_tower_depth: int = 2
    feat_channels: int = 32          # C_F
    head_depth: int = 3              # layers in the dynamic head incl. prediction layer
    head_width: int = 32
    rel_coord_norm: float = 32.0
    # FCOS assignment
    center_radius: float = 1.5
    size_ranges: tuple[tuple[float, float], ...] = ((0.0, 32.0), (32.0, 64.0), (64.0, 128.0),
                                                    (128.0, 256.0), (256.0, float("inf")))
    # "proposed" (shared offset regression), "none", or "deconv"
    refinement_mode: str = "proposed"
    refinement_shared: bool = True
    deconv_layers: int = 2
    offset_radius: float = 3.0
    controller_init_scale: float = 0.01
    cls_prior: float = 0.01

    def __post_init__(self):
        self.levels = tuple(int(x) for x in self.levels)
        self.backbone_widths = tuple(int(x) for x in self.backbone_widths)
        self.size_ranges = tuple((float(a), float(b)) for a, b in self.size_ranges)
        if 3 not in self.levels:
            raise ConfigError("level P3 is required (keypoint branch input)")
        if list(self.levels) != list(range(3, 3 + len(self.levels))) or max(self.levels) > 7:
            raise ConfigError(f"levels must be contiguous from P3 up to at most P7, got {self.levels}")
        if self.head_depth < 1:
            raise ConfigError("head_depth must be >= 1")
        if self.refinement_mode not in ("proposed", "none", "deconv"):
            raise ConfigError(f"unknown refinement_mode {self.refinement_mode!r}")
        if len(self.size_ranges) < len(self.levels):
            raise ConfigError("need one size range per level")
        if len(self.backbone_widths) != 4:
            raise ConfigError("backbone has exactly 4 stages")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2 ** lv for lv in self.levels)


@dataclass
class DataConfig:
    image_size: tuple[int, int] = (128, 128)
    num_train: int = 20
    num_val: int = 20
    min_instances: int = 1
    max_instances: int = 3
    train_seed: int = 1000
    val_seed: int = 5000
    allow_overlap: bool = False
    max_shift: int = 12

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)


@dataclass
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 0.01
    lr_decay_steps: tuple[int, ...] = (1500, 1800)
    warmup_iters: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    alpha: float = 1.0
    beta: float = 0.25
    max_samples: int = 50            # M
    sample_rank: str = "cls"         # or "ctr"
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    log_every: int = 1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        self.lr_decay_steps = tuple(int(x) for x in self.lr_decay_steps)
        steps = list(self.lr_decay_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("lr_decay_steps must be strictly increasing")
        if self.iterations > 0 and steps and steps[-1] >= self.iterations:
            raise ConfigError("lr_decay_steps must be < iterations")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be > 0")
        if self.sample_rank not in ("cls", "ctr"):
            raise ConfigError("sample_rank must be 'cls' or 'ctr'")


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    pre_nms_topk: int = 100
    max_detections: int = 50
    nms_iou: float = 0.6
    oks_kappa: float = 0.08
    bench_counts: tuple[int, ...] = (1, 2, 5, 10, 15, 20)
    bench_image_size: tuple[int, int] = (256, 256)
    bench_trials: int = 20
    bench_warmup: int = 10

    def __post_init__(self):
        self.bench_counts = tuple(int(x) for x in self.bench_counts)
        self.bench_image_size = tuple(int(x) for x in self.bench_image_size)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d, default=_jsonable))

    def to_flat(self) -> dict[str, Any]:
        return flatten(self.to_dict())

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:10]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return apply_overrides(cls(), flatten(d))


def _jsonable(x):
    if x == float("inf"):
        return "inf"
    raise TypeError(type(x))


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, like):
    if isinstance(value, str) and not isinstance(like, str):
        value = _parse_scalar(value)
    if isinstance(like, bool):
        if isinstance(value, str):
            value = value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        if like and isinstance(like[0], tuple):
            return tuple(tuple(float(v) for v in pair) for pair in value)
        return tuple(value)
    return value


def _parse_scalar(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        if s in ("inf", "Infinity"):
            return float("inf")
        return s


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a new config with flat dotted-key overrides applied."""
    groups = {f.name: dataclasses.asdict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in groups or name not in groups[section]:
            raise ConfigError(f"unknown config key {key!r}")
        like = getattr(getattr(cfg, section), name)
        groups[section][name] = _coerce(value, like)
    try:
        return RunConfig(
            model=ModelConfig(**groups["model"]),
            data=DataConfig(**groups["data"]),
            train=TrainConfig(**groups["train"]),
            eval=EvalConfig(**groups["eval"]),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults < file values < explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
        cfg = apply_overrides(cfg, flatten(doc))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
