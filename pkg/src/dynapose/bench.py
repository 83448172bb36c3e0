"""Timing versus instance count, model evaluation and ablation sweeps."""
from __future__ import annotations

import csv
import dataclasses
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, apply_overrides
from .data import Scene, generate_scene
from .dynamic_head import FilterSchema
from .evaluation import OksParams, average_precision, mean_keypoint_error
from .inference import decode_outputs
from .model import NetworkOutputs, PoseNet
from .training import build_datasets, images_to_tensor, train

TIMING_COLUMNS = ("path", "instance_count", "trials", "mean_ms", "std_ms", "e2e_mean_ms", "e2e_std_ms",
                  "image_h", "image_w")
ABLATION_COLUMNS = ("axis", "value", "seed", "controller_weights", "ap", "ap50", "ap75", "mean_error_px",
                    "decode_ms", "train_seconds", "num_detections")

# ablation axis name -> config key
ABLATION_AXES = {
    "input_channels": "model.feat_channels",
    "head_depth": "model.head_depth",
    "head_width": "model.head_width",
    "refinement_mode": "model.refinement_mode",
    "refinement_sharing": "model.refinement_shared",
}


@dataclass
class TimingRow:
    instance_count: int
    trials: int
    mean_ms: float          # decode only: thresholding, heads, peaks, refinement, NMS
    std_ms: float
    image_size: tuple[int, int]
    e2e_mean_ms: float      # forward pass + decode
    e2e_std_ms: float
    path: str = "batched"

    def as_dict(self) -> dict:
        return {"path": self.path, "instance_count": self.instance_count, "trials": self.trials,
                "mean_ms": self.mean_ms, "std_ms": self.std_ms, "e2e_mean_ms": self.e2e_mean_ms,
                "e2e_std_ms": self.e2e_std_ms, "image_h": self.image_size[0], "image_w": self.image_size[1]}


def force_instances(out: NetworkOutputs, count: int, box_half: float = 4.0, spacing: int = 3) -> NetworkOutputs:
    """Copy of ``out`` in which exactly ``count`` well separated stride-8 locations are confident.

    Everything else the decoder touches (features, offsets, controller
    vectors) stays as the network produced it, so the work per instance is
    real; only the number of instances is pinned. Boxes are small squares so
    suppression keeps all of them.
    """
    dense = out.dense
    cls = [torch.full_like(m, -30.0) for m in dense.cls_logits]
    box = [m.clone() for m in dense.box]
    H, W = cls[0].shape[-2:]
    rows = range(1, H, spacing)
    cols = range(1, W, spacing)
    cells = [(r, c) for r in rows for c in cols]
    if count > len(cells):
        raise ValueError(f"cannot place {count} separated instances on a {H}x{W} grid")
    for r, c in cells[:count]:
        cls[0][:, 0, r, c] = 10.0
        box[0][:, :, r, c] = box_half
    new_dense = dataclasses.replace(dense, cls_logits=cls, box=box)
    return dataclasses.replace(out, dense=new_dense)


def bench_instance_scaling(model: PoseNet, counts=(1, 2, 5, 10, 15, 20), image_size=(256, 256),
                           trials: int = 20, warmup: int = 10, batched: bool = True,
                           seed: int = 0) -> list[TimingRow]:
    """Wall-clock decode time per instance count at a fixed image size (batch 1)."""
    if trials < 5:
        raise ValueError("need at least 5 timed trials")
    model.eval()
    image = torch.from_numpy(generate_scene(seed, 1, image_size).image).permute(2, 0, 1)[None].contiguous()
    rows = []
    with torch.no_grad():
        for n in counts:
            dec, e2e = [], []
            for t in range(warmup + trials):
                t0 = time.perf_counter()
                out = model(image)
                t1 = time.perf_counter()
                forced = force_instances(out, n)
                t2 = time.perf_counter()
                dets = decode_outputs(model, forced, 0, batched=batched, max_detections=max(50, n),
                                      pre_nms_topk=max(100, n))
                t3 = time.perf_counter()
                if len(dets) != n:
                    raise RuntimeError(f"expected {n} detections, decoded {len(dets)}")
                if t >= warmup:
                    dec.append((t3 - t2) * 1e3)
                    e2e.append((t1 - t0 + t3 - t2) * 1e3)
            rows.append(TimingRow(int(n), trials, statistics.fmean(dec), statistics.stdev(dec),
                                  tuple(image_size), statistics.fmean(e2e), statistics.stdev(e2e),
                                  "batched" if batched else "loop"))
    return rows


def flatness(rows: list[TimingRow], field: str = "mean_ms") -> float:
    """``max / min`` of the mean times."""
    vals = [getattr(r, field) for r in rows]
    return max(vals) / min(vals)


def write_timing_csv(rows: list[TimingRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def read_timing_csv(path: str | Path) -> list[TimingRow]:
    with open(path) as fh:
        return [TimingRow(int(d["instance_count"]), int(d["trials"]), float(d["mean_ms"]), float(d["std_ms"]),
                          (int(d["image_h"]), int(d["image_w"])), float(d["e2e_mean_ms"]),
                          float(d["e2e_std_ms"]), d["path"]) for d in csv.DictReader(fh)]


def plot_timing(rows: list[TimingRow], path: str | Path, field: str = "mean_ms") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted({r.path for r in rows}):
        sub = sorted((r for r in rows if r.path == name), key=lambda r: r.instance_count)
        x = [r.instance_count for r in sub]
        y = [getattr(r, field) for r in sub]
        err = [getattr(r, field.replace("mean", "std")) for r in sub]
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=name)
    ax.set_xlabel("instances in image")
    ax.set_ylabel("decode time (ms)" if field == "mean_ms" else "forward + decode time (ms)")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------- evaluation

def evaluate_model(model: PoseNet, scenes: list[Scene], cfg: RunConfig, batched: bool = True) -> dict:
    """OKS AP, mean keypoint error and mean per-image decode time on ``scenes``."""
    ec = cfg.eval
    model.eval()
    with torch.no_grad():
        out = model(images_to_tensor(scenes))
        dets, times = [], []
        for b in range(len(scenes)):
            t0 = time.perf_counter()
            dets.append(decode_outputs(model, out, b, score_threshold=ec.score_threshold,
                                       pre_nms_topk=ec.pre_nms_topk, max_detections=ec.max_detections,
                                       nms_iou=ec.nms_iou, batched=batched))
            times.append((time.perf_counter() - t0) * 1e3)
    params = OksParams.uniform(cfg.model.num_keypoints, ec.oks_kappa)
    gts = [s.annotations for s in scenes]
    ap = average_precision(dets, gts, params)
    return {"ap": ap.ap, "ap50": ap.ap50, "ap75": ap.ap75, "per_threshold": ap.per_threshold,
            "mean_error_px": mean_keypoint_error(dets, gts, params), "decode_ms": float(np.mean(times)),
            "num_detections": ap.num_detections, "num_gt": ap.num_gt, "detections": dets}


# --------------------------------------------------------------------------- ablations

def controller_weights(cfg: RunConfig) -> int:
    m = cfg.model
    return FilterSchema.for_keypoints(m.feat_channels, m.head_depth, m.head_width, m.num_keypoints).total_weights


def ablation_grid(base: RunConfig, axis: str, values, seeds=(0,), out_dir: str | Path | None = None,
                  progress: bool = False) -> list[dict]:
    """Train and evaluate one variant per ``(value, seed)`` with a shared schedule and data."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key = ABLATION_AXES[axis]
    train_scenes, val_scenes = build_datasets(base)
    rows = []
    for value in values:
        for seed in seeds:
            cfg = apply_overrides(base, {key: value, "train.seed": seed})
            run_dir = Path(out_dir) / f"{axis}={value}_seed{seed}" if out_dir is not None else None
            res = train(cfg, train_scenes, run_dir, progress=progress)
            ev = evaluate_model(res.model, val_scenes, cfg)
            rows.append({"axis": axis, "value": value, "seed": seed, "controller_weights": controller_weights(cfg),
                         "ap": ev["ap"], "ap50": ev["ap50"], "ap75": ev["ap75"],
                         "mean_error_px": ev["mean_error_px"], "decode_ms": ev["decode_ms"],
                         "train_seconds": res.seconds, "num_detections": ev["num_detections"]})
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / f"ablation_{axis}.csv")
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
