"""Tiny backbone + FPN, dense person detection heads and the filter controller.

Also owns location-to-instance assignment, positive sampling for filter
generation, weight initialization and the checkpoint container.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F_
from torch import nn

from .config import ConfigError, ModelConfig
from .data import InstanceAnnotation
from .dynamic_head import FilterSchema
from .refinement import DeconvUpsampler, OffsetHead

CHECKPOINT_VERSION = 1


def _gn(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 and ch >= 16 else 1
    return nn.GroupNorm(groups, ch)


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), _gn(cout), nn.ReLU(inplace=True))


class TinyBackbone(nn.Module):
    """Stem (stride 2) then four stages at strides 4, 8, 16, 32."""

    def __init__(self, widths=(16, 32, 48, 64), in_channels: int = 3):
        super().__init__()
        w0 = widths[0]
        self.stem = conv_block(in_channels, w0, 2)
        stages = []
        cin = w0
        for w in widths:
            stages.append(nn.Sequential(conv_block(cin, w, 2), conv_block(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(widths)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[1:]          # C3, C4, C5


class FPN(nn.Module):
    def __init__(self, in_channels, out_channels: int, levels):
        super().__init__()
        self.levels = tuple(levels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)
        extra = [lv for lv in self.levels if lv > 5]
        self.extra = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1) for _ in extra)

    def forward(self, feats):
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + F_.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        outs = [o(x) for o, x in zip(self.output, lat)]
        x = outs[-1]
        for n, conv in enumerate(self.extra):
            x = conv(x if n == 0 else F_.relu(x))
            outs.append(x)
        return {lv: outs[lv - 3] for lv in self.levels}


@dataclass
class DenseOutputs:
    """Per-level raw outputs, each a list ordered like ``strides``."""

    strides: tuple[int, ...]
    cls_logits: list[torch.Tensor]      # B x 1 x H x W
    box: list[torch.Tensor]             # B x 4 x H x W, (l, t, r, b) pixels, >= 0
    ctr_logits: list[torch.Tensor]      # B x 1 x H x W
    controller: list[torch.Tensor]      # B x N_theta x H x W
    refine_controller: list[torch.Tensor] | None = None

    def flat(self, name: str, b: int) -> torch.Tensor:
        """Concatenate one field of image ``b`` over levels -> ``(L, C)``."""
        maps = getattr(self, name)
        return torch.cat([m[b].flatten(1).t() for m in maps], dim=0)


@dataclass
class NetworkOutputs:
    dense: DenseOutputs
    features: torch.Tensor              # B x C_F x H3 x W3
    offsets: torch.Tensor | None        # B x 2K x H3 x W3 (shared refinement)
    image_size: tuple[int, int]         # before padding
    padded_size: tuple[int, int]


class PoseNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        K = cfg.num_keypoints
        self.schema = FilterSchema.for_keypoints(cfg.feat_channels, cfg.head_depth, cfg.head_width, K)
        self.refine_schema = None
        if cfg.refinement_mode == "proposed" and not cfg.refinement_shared:
            self.refine_schema = FilterSchema(cfg.feat_channels + 2, (), 2 * K)

        self.backbone = TinyBackbone(cfg.backbone_widths)
        self.fpn = FPN(self.backbone.out_channels[1:], cfg.fpn_channels, cfg.levels)
        C = cfg.fpn_channels
        self.cls_tower = nn.Sequential(*[conv_block(C, C) for _ in range(cfg.tower_depth)])
        self.box_tower = nn.Sequential(*[conv_block(C, C) for _ in range(cfg.tower_depth)])
        self.cls_logits = nn.Conv2d(C, 1, 3, padding=1)
        self.bbox_pred = nn.Conv2d(C, 4, 3, padding=1)
        self.centerness = nn.Conv2d(C, 1, 3, padding=1)
        self.controller = nn.Conv2d(C, self.schema.total_weights, 1)
        if self.controller.out_channels != self.schema.total_weights:
            raise ConfigError("controller width does not match the filter schema")
        self.refine_controller = (nn.Conv2d(C, self.refine_schema.total_weights, 1)
                                  if self.refine_schema is not None else None)

        self.kpt_tower = nn.Sequential(*[conv_block(C, C) for _ in range(cfg.kpt_tower_depth)])
        self.kpt_proj = nn.Conv2d(C, cfg.feat_channels, 1)
        self.offset_head = (OffsetHead(cfg.feat_channels, K)
                            if cfg.refinement_mode == "proposed" and cfg.refinement_shared else None)
        self.upsampler = (DeconvUpsampler(K, cfg.deconv_layers) if cfg.refinement_mode == "deconv" else None)

    @property
    def strides(self) -> tuple[int, ...]:
        return self.cfg.strides

    @property
    def heatmap_stride(self) -> float:
        return 8 / self.upsampler.factor if self.upsampler is not None else 8

    def pad(self, images: torch.Tensor) -> torch.Tensor:
        m = max(self.strides)
        H, W = images.shape[-2:]
        ph, pw = (-H) % m, (-W) % m
        return F_.pad(images, (0, pw, 0, ph)) if ph or pw else images

    def forward(self, images: torch.Tensor) -> NetworkOutputs:
        size = tuple(images.shape[-2:])
        x = self.pad(images)
        pyramid = self.fpn(self.backbone(x))
        cls, box, ctr, ctl, rctl = [], [], [], [], []
        for lv, s in zip(self.cfg.levels, self.strides):
            p = pyramid[lv]
            ct = self.cls_tower(p)
            bt = self.box_tower(p)
            cls.append(self.cls_logits(ct))
            box.append(F_.softplus(self.bbox_pred(bt)) * s)
            ctr.append(self.centerness(bt))
            ctl.append(self.controller(bt))
            if self.refine_controller is not None:
                rctl.append(self.refine_controller(bt))
        feats = self.keypoint_features(pyramid)
        offsets = self.offset_head(feats) if self.offset_head is not None else None
        dense = DenseOutputs(self.strides, cls, box, ctr, ctl, rctl or None)
        return NetworkOutputs(dense, feats, offsets, size, tuple(x.shape[-2:]))

    def pyramid(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.fpn(self.backbone(self.pad(images)))

    def keypoint_features(self, pyramid) -> torch.Tensor:
        return self.kpt_proj(self.kpt_tower(pyramid[3]))


def build_model(cfg: ModelConfig, seed: int = 0) -> PoseNet:
    torch.manual_seed(seed)
    model = PoseNet(cfg)
    init_weights(model, seed)
    return model


def init_weights(model: PoseNet, seed: int) -> PoseNet:
    """He-normal convs, zero biases, prior-probability classification bias,
    and a controller output layer scaled down so early heads are near zero."""
    gen = torch.Generator().manual_seed(seed)
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel()
            std = math.sqrt(2.0 / fan_in)
            if m is model.controller or m is model.refine_controller:
                std *= model.cfg.controller_init_scale
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    with torch.no_grad():
        p = model.cfg.cls_prior
        model.cls_logits.bias.fill_(-math.log((1 - p) / p))
    return model


# --------------------------------------------------------------------------- assignment

@dataclass
class LevelGeometry:
    stride: int
    size: tuple[int, int]
    size_range: tuple[float, float]


def pyramid_geometry(cfg: ModelConfig, image_size: tuple[int, int]) -> list[LevelGeometry]:
    m = max(cfg.strides)
    H = math.ceil(image_size[0] / m) * m
    W = math.ceil(image_size[1] / m) * m
    return [LevelGeometry(s, (H // s, W // s), cfg.size_ranges[i]) for i, s in enumerate(cfg.strides)]


def level_locations(geom: LevelGeometry) -> np.ndarray:
    """``(H*W, 2)`` image ``(x, y)`` of every cell center, row-major."""
    H, W = geom.size
    s = geom.stride
    yy, xx = np.mgrid[0:H, 0:W]
    return np.stack([xx.ravel() * s + s / 2, yy.ravel() * s + s / 2], axis=1).astype(np.float64)


@dataclass
class LocationAssignment:
    """Flat over all levels (level-major, row-major within a level)."""

    level: np.ndarray        # L, level index into the geometry list
    rc: np.ndarray           # L x 2 grid (r, c)
    instance: np.ndarray     # L, matched instance or -1
    ltrb: np.ndarray         # L x 4 box regression targets (pixels)
    centerness: np.ndarray   # L
    locations: np.ndarray    # L x 2 image (x, y)

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.instance >= 0)

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.instance >= 0))


def assign_targets(annotations: list[InstanceAnnotation], geometry: list[LevelGeometry],
                   center_radius: float = 1.5) -> LocationAssignment:
    """Center-sampled, scale-ranged location assignment; overlaps go to the smaller box."""
    if not geometry:
        raise ValueError("need at least one pyramid level")
    levels, rcs, insts, ltrbs, ctrs, locs = [], [], [], [], [], []
    boxes = np.array([a.box for a in annotations]).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for li, g in enumerate(geometry):
        pts = level_locations(g)
        H, W = g.size
        rr, cc = np.divmod(np.arange(H * W), W)
        L = len(pts)
        inst = np.full(L, -1, dtype=np.int64)
        ltrb = np.zeros((L, 4))
        if len(boxes):
            x = pts[:, 0:1]
            y = pts[:, 1:2]
            l = x - boxes[None, :, 0]
            t = y - boxes[None, :, 1]
            r = boxes[None, :, 2] - x
            b = boxes[None, :, 3] - y
            reg = np.stack([l, t, r, b], axis=2)                      # L x N x 4
            cx = (boxes[:, 0] + boxes[:, 2]) / 2
            cy = (boxes[:, 1] + boxes[:, 3]) / 2
            rad = center_radius * g.stride
            cb = np.stack([np.maximum(cx - rad, boxes[:, 0]), np.maximum(cy - rad, boxes[:, 1]),
                           np.minimum(cx + rad, boxes[:, 2]), np.minimum(cy + rad, boxes[:, 3])], 1)
            in_center = ((x - cb[None, :, 0] > 0) & (y - cb[None, :, 1] > 0)
                         & (cb[None, :, 2] - x > 0) & (cb[None, :, 3] - y > 0))
            max_reg = reg.max(axis=2)
            lo, hi = g.size_range
            ok = in_center & (max_reg >= lo) & (max_reg <= hi)
            cand_area = np.where(ok, areas[None, :], np.inf)
            best = cand_area.argmin(axis=1)                           # first minimum -> lower index
            has = np.isfinite(cand_area.min(axis=1))
            inst[has] = best[has]
            ltrb[has] = reg[np.flatnonzero(has), best[has]]
        lr = ltrb[:, [0, 2]]
        tb = ltrb[:, [1, 3]]
        with np.errstate(divide="ignore", invalid="ignore"):
            ctr = np.sqrt((lr.min(1) / lr.max(1)) * (tb.min(1) / tb.max(1)))
        ctr = np.where(inst >= 0, np.nan_to_num(ctr), 0.0)
        levels.append(np.full(L, li))
        rcs.append(np.stack([rr, cc], 1))
        insts.append(inst)
        ltrbs.append(ltrb)
        ctrs.append(ctr)
        locs.append(pts)
    return LocationAssignment(np.concatenate(levels), np.concatenate(rcs), np.concatenate(insts),
                              np.concatenate(ltrbs), np.concatenate(ctrs), np.concatenate(locs))


# --------------------------------------------------------------------------- sampling

def allocate_quota(available: list[int], max_samples: int = 50) -> list[int]:
    """Split ``max_samples`` as evenly as the positives allow, extras to the earliest.

    Every instance gets ``min(available, level)`` for the highest common level
    the budget affords; what is left (fewer slots than uncapped instances)
    goes one each to the earliest uncapped instances. With enough positives
    everywhere this is ``max_samples // n`` each plus the remainder up front,
    and the total is always ``min(max_samples, sum(available))``.
    """
    n = len(available)
    if n == 0:
        return []
    budget = max(max_samples, n)
    if sum(available) <= budget:
        return list(available)
    lo, hi = 0, max(available)
    while lo < hi:                       # largest level whose capped sum fits
        mid = (lo + hi + 1) // 2
        if sum(min(a, mid) for a in available) <= budget:
            lo = mid
        else:
            hi = mid - 1
    alloc = [min(a, lo) for a in available]
    left = budget - sum(alloc)
    for i in range(n):
        if left == 0:
            break
        if available[i] > lo:
            alloc[i] += 1
            left -= 1
    return alloc


def sample_positive_locations(groups: list[np.ndarray], rank_scores: list[np.ndarray],
                              max_samples: int = 50) -> list[np.ndarray]:
    """Keep the highest-ranked positives of each instance within its quota.

    ``groups[i]`` holds the positive location ids of instance ``i`` (in batch
    order) and ``rank_scores[i]`` their scores. Returns the kept ids per
    instance, best first; ties keep the lower location id.
    """
    quota = allocate_quota([len(g) for g in groups], max_samples)
    kept = []
    for ids, sc, q in zip(groups, rank_scores, quota):
        ids = np.asarray(ids)
        order = np.lexsort((ids, -np.asarray(sc, dtype=np.float64)))
        kept.append(ids[order[:q]])
    return kept


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: PoseNet, path: str | Path, extra: dict | None = None) -> None:
    """Named parameter arrays with shape metadata; stored at full float32 precision."""
    params = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    blob = {
        "schema_version": CHECKPOINT_VERSION,
        "precision": "float32-exact",
        "model_config": json.loads(json.dumps(dataclasses.asdict(model.cfg), default=lambda x: "inf")),
        "filter_schema": model.schema.to_dict(),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "params": params,
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path: str | Path) -> tuple[PoseNet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {blob.get('schema_version')}")
    mc = dict(blob["model_config"])
    mc["size_ranges"] = [tuple(float(v) for v in pair) for pair in mc["size_ranges"]]
    cfg = ModelConfig(**mc)
    model = PoseNet(cfg)
    for k, shape in blob["shapes"].items():
        if list(blob["params"][k].shape) != shape:
            raise ValueError(f"checkpoint entry {k} has inconsistent shape metadata")
    model.load_state_dict(blob["params"])
    return model, blob.get("extra", {})
