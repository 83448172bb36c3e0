"""SGD training loop: batching, target construction, loss assembly, logging."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import (InstanceAnnotation, Scene, build_offset_targets, random_manifest,
                   scenes_from_manifest, target_indices)
from .dynamic_head import project_to_base_grid, rel_coord_maps, run_dynamic_heads
from .losses import LOG_COLUMNS, LossReport, detection_losses, heatmap_loss, offset_loss, total_loss
from .model import (PoseNet, assign_targets, build_model, pyramid_geometry,
                    sample_positive_locations, save_checkpoint)

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("iteration", "lr") + LOG_COLUMNS + (
    "n_pos", "n_sampled", "n_heatmap", "n_reg", "grad_norm", "clipped")


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, batch_seed, report: dict):
        super().__init__(f"non-finite loss at iteration {iteration} (batch seed {batch_seed}): {report}")
        self.iteration = iteration
        self.batch_seed = batch_seed
        self.report = report


def images_to_tensor(scenes: list[Scene]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in scenes])).permute(0, 3, 1, 2).contiguous()


def shift_scene(scene: Scene, rng: np.random.Generator, max_shift: int, margin: float = 2.0) -> Scene:
    """Random translation (crop analogue) keeping every labeled keypoint inside the image."""
    if max_shift <= 0 or not scene.annotations:
        return scene
    H, W = scene.size
    kps = np.concatenate([a.keypoints[a.labeled, :2] for a in scene.annotations] or [np.zeros((0, 2))])
    if len(kps) == 0:
        return scene
    lo_x = max(-max_shift, int(np.ceil(margin - kps[:, 0].min())))
    hi_x = min(max_shift, int(np.floor(W - 1 - margin - kps[:, 0].max())))
    lo_y = max(-max_shift, int(np.ceil(margin - kps[:, 1].min())))
    hi_y = min(max_shift, int(np.floor(H - 1 - margin - kps[:, 1].max())))
    dx = int(rng.integers(lo_x, hi_x + 1)) if hi_x >= lo_x else 0
    dy = int(rng.integers(lo_y, hi_y + 1)) if hi_y >= lo_y else 0
    if dx == 0 and dy == 0:
        return scene
    p = max_shift
    padded = np.pad(scene.image, ((p, p), (p, p), (0, 0)), mode="edge")
    image = padded[p - dy:p - dy + H, p - dx:p - dx + W]
    anns = []
    for a in scene.annotations:
        kp = a.keypoints.copy()
        kp[:, 0] += dx
        kp[:, 1] += dy
        box = a.box + np.array([dx, dy, dx, dy])
        box = np.clip(box, 0, [W, H, W, H])
        if box[2] - box[0] < 1 or box[3] - box[1] < 1:
            continue
        anns.append(InstanceAnnotation(box, kp))
    return Scene(image=image, annotations=anns, seed=scene.seed, image_id=scene.image_id)


@dataclass
class Batch:
    images: torch.Tensor
    annotations: list[list[InstanceAnnotation]]
    seed: tuple = ()


def make_batch(scenes: list[Scene], seed=()) -> Batch:
    return Batch(images_to_tensor(scenes), [s.annotations for s in scenes], tuple(seed))


def compute_losses(model: PoseNet, batch: Batch, cfg: RunConfig) -> LossReport:
    """Forward ``batch`` and assemble every loss term."""
    mc, tc = model.cfg, cfg.train
    out = model(batch.images)
    dense = out.dense
    B = batch.images.shape[0]
    geometry = pyramid_geometry(mc, out.image_size)
    strides = np.array([g.stride for g in geometry])

    cls_l, box_l, ctr_l, inst_l, ltrb_l, ctrt_l = [], [], [], [], [], []
    assignments = []
    for b in range(B):
        a = assign_targets(batch.annotations[b], geometry, mc.center_radius)
        assignments.append(a)
        cls_l.append(dense.flat("cls_logits", b)[:, 0])
        box_l.append(dense.flat("box", b))
        ctr_l.append(dense.flat("ctr_logits", b)[:, 0])
        inst_l.append(torch.from_numpy(a.instance))
        ltrb_l.append(torch.from_numpy(a.ltrb))
        ctrt_l.append(torch.from_numpy(a.centerness))
    cls_all = torch.cat(cls_l)
    ctr_all = torch.cat(ctr_l)
    l_cls, l_box, l_ctr, n_pos = detection_losses(
        cls_all, torch.cat(box_l), ctr_all, torch.cat(inst_l),
        torch.cat(ltrb_l), torch.cat(ctrt_l), tc.focal_alpha, tc.focal_gamma)

    # positives grouped per instance, batch order, for filter generation
    rank = torch.sigmoid(cls_all if tc.sample_rank == "cls" else ctr_all).detach().numpy()
    L = len(assignments[0].instance) if assignments else 0
    groups, scores, owners = [], [], []
    for b, a in enumerate(assignments):
        for i in range(len(batch.annotations[b])):
            ids = np.flatnonzero(a.instance == i) + b * L
            groups.append(ids)
            scores.append(rank[ids])
            owners.append((b, i))
    kept = sample_positive_locations(groups, scores, tc.max_samples)
    sel = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)
    sel_owner = [owners[g] for g, ids in enumerate(kept) for _ in ids]

    H3, W3 = out.features.shape[-2:]
    K = mc.num_keypoints
    n_hm = n_reg = 0
    l_hm = out.features.sum() * 0.0
    l_reg = out.features.sum() * 0.0
    if len(sel):
        b_idx = sel // L
        loc = sel % L
        a0 = assignments[0]
        lv = a0.level[loc]
        rc = a0.rc[loc].astype(np.float64)
        gen = np.stack(project_to_base_grid((rc[:, 0], rc[:, 1]), strides[lv]), 1)
        rel = rel_coord_maps((H3, W3), torch.from_numpy(gen), mc.rel_coord_norm)
        feats = out.features[torch.from_numpy(b_idx)]
        bundles = _gather(dense.controller, dense.strides, b_idx, lv, a0.rc[loc])
        heat = run_dynamic_heads(feats, rel, bundles, model.schema)
        if model.upsampler is not None:
            heat = model.upsampler(heat)
        hs = model.heatmap_stride
        Hh, Wh = heat.shape[-2:]
        kps = np.stack([batch.annotations[b][i].keypoints for b, i in sel_owner])     # S x K x 3
        r, c = target_indices(kps[:, :, :2].reshape(-1, 2), hs, (Hh, Wh))
        tgt = torch.from_numpy((r * Wh + c).reshape(len(sel), K))
        valid = torch.from_numpy(kps[:, :, 2] > 0)
        l_hm, n_hm = heatmap_loss(heat, tgt, valid)

        if model.refine_schema is not None:
            rb = _gather(dense.refine_controller, dense.strides, b_idx, lv, a0.rc[loc])
            offs = run_dynamic_heads(feats, rel, rb, model.refine_schema)
            tgts = [build_offset_targets([batch.annotations[b][i]], (H3, W3), 8, mc.offset_radius, K)
                    for b, i in sel_owner]
            delta = torch.from_numpy(np.stack([t.delta for t in tgts])).permute(0, 3, 1, 2)
            mask = torch.from_numpy(np.stack([t.mask for t in tgts])).permute(0, 3, 1, 2)
            l_reg, n_reg = offset_loss(offs, delta, mask)

    if out.offsets is not None:
        tgts = [build_offset_targets(batch.annotations[b], (H3, W3), 8, mc.offset_radius, K) for b in range(B)]
        delta = torch.from_numpy(np.stack([t.delta for t in tgts])).permute(0, 3, 1, 2)
        mask = torch.from_numpy(np.stack([t.mask for t in tgts])).permute(0, 3, 1, 2)
        l_reg, n_reg = offset_loss(out.offsets, delta, mask)

    counts = {"n_pos": n_pos, "n_sampled": int(len(sel)), "n_heatmap": n_hm, "n_reg": n_reg}
    return total_loss(l_cls, l_box, l_ctr, l_hm, l_reg, tc.alpha, tc.beta, counts)


def _gather(maps: list[torch.Tensor], strides, b_idx, lv, rc) -> torch.Tensor:
    """Pick ``(b, level, r, c)`` vectors out of per-level ``B x C x H x W`` maps."""
    C = maps[0].shape[1]
    out = maps[0].new_zeros((len(b_idx), C))
    for li in np.unique(lv):
        m = np.flatnonzero(lv == li)
        t = maps[li][torch.from_numpy(b_idx[m]), :, torch.from_numpy(rc[m, 0]), torch.from_numpy(rc[m, 1])]
        out = out.index_copy(0, torch.from_numpy(m), t)
    return out


def learning_rate(it: int, tc) -> float:
    lr = tc.base_lr * (0.1 ** sum(it >= s for s in tc.lr_decay_steps))
    if tc.warmup_iters and it < tc.warmup_iters:
        f = 1.0 / 3
        lr *= f + (1 - f) * it / tc.warmup_iters
    return lr


def build_datasets(cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    d = cfg.data
    train = scenes_from_manifest(random_manifest("train", d.num_train, d.train_seed, d.min_instances,
                                                 d.max_instances, d.image_size, d.allow_overlap))
    val = scenes_from_manifest(random_manifest("val", d.num_val, d.val_seed, d.min_instances,
                                               d.max_instances, d.image_size, d.allow_overlap))
    return train, val


@dataclass
class TrainResult:
    model: PoseNet
    rows: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def train(cfg: RunConfig, scenes: list[Scene] | None = None, out_dir: str | Path | None = None,
          progress: bool = False) -> TrainResult:
    """SGD with momentum, weight decay, warmup and x0.1 step decays."""
    tc = cfg.train
    torch.manual_seed(tc.seed)
    if scenes is None:
        scenes = build_datasets(cfg)[0]
    if not scenes:
        raise ValueError("training set is empty")
    model = build_model(cfg.model, tc.seed)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=tc.base_lr, momentum=tc.momentum,
                          weight_decay=tc.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(out_dir / "config.json")
    writer = fh = None
    if out_dir is not None:
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()

    rows = []
    t0 = time.perf_counter()
    try:
        for it in range(tc.iterations):
            batch_seed = (tc.seed, it)
            rng = np.random.default_rng(batch_seed)
            idx = rng.choice(len(scenes), size=min(tc.batch_size, len(scenes)), replace=False)
            chosen = [shift_scene(scenes[i], rng, cfg.data.max_shift) for i in idx]
            batch = make_batch(chosen, batch_seed)
            lr = learning_rate(it, tc)
            for g in opt.param_groups:
                g["lr"] = lr
            report = compute_losses(model, batch, cfg)
            if not report.is_finite():
                dump = {"iteration": it, "batch_seed": list(batch_seed),
                        "scene_indices": idx.tolist(), "report": report.row()}
                if out_dir is not None:
                    (out_dir / "nonfinite_batch.json").write_text(json.dumps(dump, indent=2))
                raise NonFiniteLossError(it, batch_seed, report.row())
            opt.zero_grad(set_to_none=True)
            report.l_total.backward()
            norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip))
            clipped = norm > tc.grad_clip
            if clipped:
                log.debug("iteration %d: gradient norm %.3f clipped to %.1f", it, norm, tc.grad_clip)
            opt.step()
            row = {"iteration": it, "lr": lr, **report.row(), "grad_norm": norm, "clipped": int(clipped)}
            rows.append(row)
            if writer is not None and it % tc.log_every == 0:
                writer.writerow(row)
            if progress and it % 100 == 0:
                log.info("it %d lr %.4g total %.4f hm %.4f reg %.4f", it, lr, row["l_total"],
                         row["l_heatmap"], row["l_reg"])
            if out_dir is not None and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"checkpoint_{it + 1:06d}.pt")
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(model, ckpt, {"run_config": cfg.to_dict(), "iterations": tc.iterations})
    return TrainResult(model, rows, ckpt, time.perf_counter() - t0)
