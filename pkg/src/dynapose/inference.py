"""Turn network outputs into per-person detections.

Pipeline per image: threshold classification scores, rank by
``score * centerness``, decode boxes, suppress duplicates, then run each
survivor's generated keypoint head over the shared features, take the
per-channel peak and refine it with the offset map.

Box suppression only looks at boxes and scores, so running it before the
keypoint heads gives the same result as running it after while skipping
heads for suppressed candidates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dynamic_head import (FilterSchema, apply_keypoint_head, project_to_base_grid, rel_coord_map,
                           rel_coord_maps, run_dynamic_heads, unpack_filters)
from .model import DenseOutputs, NetworkOutputs, PoseNet
from .refinement import refine_peak, refine_peaks


@dataclass
class Detection:
    score: float                 # classification probability (> threshold)
    rank_score: float            # score * centerness, used for ordering
    box: np.ndarray              # x0, y0, x1, y1
    keypoints: np.ndarray        # K x 3: x, y, confidence
    generator: tuple[int, int, int]   # level index, r, c

    def __eq__(self, other):
        return (isinstance(other, Detection) and self.score == other.score
                and self.rank_score == other.rank_score and self.generator == other.generator
                and np.array_equal(self.box, other.box) and np.array_equal(self.keypoints, other.keypoints))


def find_peak(heatmap: torch.Tensor) -> tuple[int, int, float]:
    """Argmax of one ``H x W`` map (first in row-major order on ties) and its softmax mass."""
    H, W = heatmap.shape
    flat = heatmap.reshape(-1)
    idx = int(torch.argmax(flat))
    conf = float(torch.softmax(flat, 0)[idx])
    return idx // W, idx % W, conf


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` boxes."""
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(br - tl, 0, None), axis=2)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.6) -> np.ndarray:
    """Greedy suppression in descending score order (stable on ties)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(order) == 0:
        return order
    iou = box_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def nms(detections: list[Detection], iou_threshold: float = 0.6) -> list[Detection]:
    if not detections:
        return []
    keep = nms_indices(np.stack([d.box for d in detections]),
                       np.array([d.rank_score for d in detections]), iou_threshold)
    return [detections[i] for i in keep]


def _flat_levels(dense: DenseOutputs, b: int):
    locs, levels, rcs = [], [], []
    for li, (s, m) in enumerate(zip(dense.strides, dense.cls_logits)):
        H, W = m.shape[-2:]
        rr, cc = np.divmod(np.arange(H * W), W)
        rcs.append(np.stack([rr, cc], 1))
        levels.append(np.full(H * W, li))
        locs.append(np.stack([cc * s + s / 2, rr * s + s / 2], 1))
    return np.concatenate(locs).astype(np.float64), np.concatenate(levels), np.concatenate(rcs)


def decode(dense: DenseOutputs, features: torch.Tensor, offsets: torch.Tensor | None, *,
           schema: FilterSchema, image_size: tuple[int, int], image_index: int = 0,
           score_threshold: float = 0.05, pre_nms_topk: int = 100, max_detections: int = 50,
           nms_iou: float = 0.6, rel_coord_norm: float = 32.0, upsampler=None,
           refine_schema: FilterSchema | None = None, batched: bool = True) -> list[Detection]:
    """Detections for image ``image_index`` of a batch of network outputs.

    ``features`` is that image's ``(C_F, H, W)`` stride-8 map and ``offsets``
    its shared ``(2K, H, W)`` offset map (``None`` disables refinement).
    """
    b = image_index
    with torch.no_grad():
        probs = torch.cat([torch.sigmoid(m[b]).reshape(-1) for m in dense.cls_logits])
        keep = torch.nonzero(probs > score_threshold).reshape(-1)
        if len(keep) == 0:
            return []
        ctr = torch.cat([torch.sigmoid(m[b]).reshape(-1) for m in dense.ctr_logits])
        rank = probs[keep] * ctr[keep]
        order = torch.argsort(-rank, stable=True)[:pre_nms_topk]
        keep, rank = keep[order].numpy(), rank[order].numpy().astype(np.float64)

        locs, levels, rcs = _flat_levels(dense, b)
        ltrb = torch.cat([m[b].reshape(4, -1).t() for m in dense.box])[torch.from_numpy(keep)]
        ltrb = ltrb.double().numpy()
        xy = locs[keep]
        H_img, W_img = image_size
        boxes = np.stack([xy[:, 0] - ltrb[:, 0], xy[:, 1] - ltrb[:, 1],
                          xy[:, 0] + ltrb[:, 2], xy[:, 1] + ltrb[:, 3]], 1)
        boxes = np.clip(boxes, 0, [W_img, H_img, W_img, H_img])
        survivors = nms_indices(boxes, rank, nms_iou)[:max_detections]
        if len(survivors) == 0:
            return []
        keep, rank, boxes = keep[survivors], rank[survivors], boxes[survivors]
        lv, rc = levels[keep], rcs[keep]
        strides = np.array(dense.strides)[lv]
        bundles = torch.stack([dense.controller[l][b, :, r, c] for l, (r, c) in zip(lv, rc)])
        gen = np.stack(project_to_base_grid((rc[:, 0].astype(np.float64), rc[:, 1].astype(np.float64)),
                                            strides), 1)
        rbundles = None
        if refine_schema is not None:
            rbundles = torch.stack([dense.refine_controller[l][b, :, r, c] for l, (r, c) in zip(lv, rc)])

        if batched:
            kps = _keypoints_batched(features, offsets, bundles, gen, schema, rel_coord_norm,
                                     upsampler, refine_schema, rbundles)
        else:
            kps = _keypoints_looped(features, offsets, bundles, gen, strides, rc, schema, rel_coord_norm,
                                    upsampler, refine_schema, rbundles)
        score = probs[torch.from_numpy(keep)].double().numpy()
    return [Detection(float(score[n]), float(rank[n]), boxes[n], kps[n], (int(lv[n]), int(rc[n, 0]), int(rc[n, 1])))
            for n in range(len(keep))]


def _keypoints_batched(features, offsets, bundles, gen, schema, norm, upsampler, refine_schema, rbundles):
    H, W = features.shape[-2:]
    rel = rel_coord_maps((H, W), torch.from_numpy(gen), norm, dtype=features.dtype)
    heat = run_dynamic_heads(features, rel, bundles.to(features.dtype), schema)
    stride = 8.0
    if upsampler is not None:
        heat = upsampler(heat)
        stride = 8.0 / upsampler.factor
    N, K, Hh, Wh = heat.shape
    flat = heat.reshape(N, K, Hh * Wh)
    idx = torch.argmax(flat, dim=2)
    conf = torch.gather(torch.softmax(flat, dim=2), 2, idx[..., None])[..., 0]
    rows, cols = idx // Wh, idx % Wh
    if refine_schema is not None:
        offs = run_dynamic_heads(features, rel, rbundles.to(features.dtype), refine_schema)
        r, c = refine_peaks(rows, cols, offs)
    elif offsets is not None and upsampler is None:
        r, c = refine_peaks(rows, cols, offsets)
    else:
        r, c = rows.to(heat.dtype), cols.to(heat.dtype)
    x = stride * c.double() + stride / 2
    y = stride * r.double() + stride / 2
    return torch.stack([x, y, conf.double()], dim=2).numpy()


def _keypoints_looped(features, offsets, bundles, gen, strides, rc, schema, norm, upsampler,
                      refine_schema, rbundles):
    """One head, one peak and one refinement at a time."""
    H, W = features.shape[-2:]
    out = []
    for n in range(len(bundles)):
        rel = rel_coord_map((H, W), (rc[n, 0], rc[n, 1]), int(strides[n]), norm, dtype=features.dtype)
        head = unpack_filters(bundles[n].to(features.dtype), schema)
        heat = apply_keypoint_head(features, rel, head)
        stride = 8.0
        if upsampler is not None:
            heat = upsampler(heat[None])[0]
            stride = 8.0 / upsampler.factor
        inst_off = offsets
        if refine_schema is not None:
            inst_off = apply_keypoint_head(features, rel, unpack_filters(rbundles[n].to(features.dtype),
                                                                         refine_schema))
        kp = np.zeros((heat.shape[0], 3))
        for k in range(heat.shape[0]):
            r, c, conf = find_peak(heat[k])
            if inst_off is not None and upsampler is None:
                r, c = refine_peak((r, c), k, inst_off)
            kp[k] = (stride * c + stride / 2, stride * r + stride / 2, conf)
        out.append(kp)
    return np.stack(out)


def infer(model: PoseNet, images: torch.Tensor, *, score_threshold: float = 0.05, pre_nms_topk: int = 100,
          max_detections: int = 50, nms_iou: float = 0.6, batched: bool = True,
          outputs: NetworkOutputs | None = None) -> list[list[Detection]]:
    """Forward ``images`` (``B x 3 x H x W``) and decode every image."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = outputs if outputs is not None else model(images)
        results = [decode_outputs(model, out, b, score_threshold=score_threshold, pre_nms_topk=pre_nms_topk,
                                  max_detections=max_detections, nms_iou=nms_iou, batched=batched)
                   for b in range(out.features.shape[0])]
    model.train(was_training)
    return results


def decode_outputs(model: PoseNet, out: NetworkOutputs, b: int, **kw) -> list[Detection]:
    return decode(out.dense, out.features[b], out.offsets[b] if out.offsets is not None else None,
                  schema=model.schema, image_size=out.image_size, image_index=b,
                  rel_coord_norm=model.cfg.rel_coord_norm, upsampler=model.upsampler,
                  refine_schema=model.refine_schema, **kw)


def to_coco_results(detections: list[Detection], image_id) -> list[dict]:
    """COCO keypoint results entries (x, y, confidence triplets)."""
    return [{"image_id": image_id, "category_id": 1,
             "keypoints": [float(v) for v in d.keypoints.reshape(-1)],
             "score": float(d.rank_score), "bbox": [float(d.box[0]), float(d.box[1]),
                                                     float(d.box[2] - d.box[0]), float(d.box[3] - d.box[1])]}
            for d in detections]
