"""Training losses: flattened-softmax heatmap CE, masked offset MSE, dense detection
losses (focal / -log IoU / centerness BCE) and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F_

LOG_COLUMNS = ("l_fcos_cls", "l_fcos_box", "l_fcos_ctr", "l_heatmap", "l_reg", "l_total")


def heatmap_loss(logits: torch.Tensor, target_index: torch.Tensor, valid: torch.Tensor | None = None
                 ) -> tuple[torch.Tensor, int]:
    """Cross entropy of each flattened ``H x W`` map against its one-hot target.

    ``logits`` is ``(N, K, H, W)``, ``target_index`` the flat ``r*W + c`` per
    ``(N, K)``. Invalid pairs are skipped; the result is the mean over the
    valid ones (0 if there are none).
    """
    N, K, H, W = logits.shape
    flat = logits.reshape(N * K, H * W)
    tgt = target_index.reshape(-1).long()
    if valid is None:
        valid = torch.ones_like(tgt, dtype=torch.bool)
    valid = valid.reshape(-1).bool()
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    return F_.cross_entropy(flat[valid], tgt[valid], reduction="mean"), n


def offset_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean squared error over supervised ``(dx, dy)`` components.

    ``pred``/``target`` are ``(..., 2K, H, W)``, ``mask`` is ``(..., K, H, W)``.
    """
    m = mask.bool().repeat_interleave(2, dim=-3)
    n = int(m.sum())
    if n == 0:
        return pred.sum() * 0.0, 0
    diff = (pred - target.to(pred.dtype))[m]
    return (diff * diff).mean(), n


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Summed sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F_.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (a_t * (1 - p_t) ** gamma * ce).sum()


def iou_loss(pred_ltrb: torch.Tensor, target_ltrb: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Per-location ``-log IoU`` of two boxes sharing an anchor point."""
    pl, pt, pr, pb = pred_ltrb.unbind(-1)
    tl, tt, tr, tb = target_ltrb.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    tgt_area = (tl + tr) * (tt + tb)
    w = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    h = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = w * h
    union = pred_area + tgt_area - inter
    iou = (inter + eps) / (union + eps)
    return -torch.log(iou)


def detection_losses(cls_logits: torch.Tensor, box_pred: torch.Tensor, ctr_logits: torch.Tensor,
                     instance: torch.Tensor, ltrb_target: torch.Tensor, ctr_target: torch.Tensor,
                     alpha: float = 0.25, gamma: float = 2.0):
    """Dense person-detection losses over flat locations.

    Classification is normalized by ``max(#positives, 1)``; box and
    centerness losses are means over positives (0 when there are none).
    """
    pos = instance >= 0
    n_pos = int(pos.sum())
    cls_t = pos.to(cls_logits.dtype)
    l_cls = focal_loss(cls_logits, cls_t, alpha, gamma) / max(n_pos, 1)
    if n_pos == 0:
        zero = box_pred.sum() * 0.0 + ctr_logits.sum() * 0.0
        return l_cls, zero, zero, 0
    l_box = iou_loss(box_pred[pos], ltrb_target[pos].to(box_pred.dtype)).mean()
    l_ctr = F_.binary_cross_entropy_with_logits(ctr_logits[pos], ctr_target[pos].to(ctr_logits.dtype))
    return l_cls, l_box, l_ctr, n_pos


@dataclass
class LossReport:
    l_fcos_cls: torch.Tensor
    l_fcos_box: torch.Tensor
    l_fcos_ctr: torch.Tensor
    l_heatmap: torch.Tensor
    l_reg: torch.Tensor
    l_total: torch.Tensor
    alpha: float
    beta: float
    counts: dict = field(default_factory=dict)

    @property
    def l_fcos(self) -> torch.Tensor:
        return self.l_fcos_cls + self.l_fcos_box + self.l_fcos_ctr

    def row(self) -> dict[str, float]:
        out = {c: float(torch.as_tensor(getattr(self, c)).detach()) for c in LOG_COLUMNS}
        out.update(self.counts)
        return out

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.as_tensor(getattr(self, c))).all() for c in LOG_COLUMNS)


def total_loss(cls, box, ctr, heatmap, reg, alpha: float = 1.0, beta: float = 0.25,
               counts: dict | None = None) -> LossReport:
    """``fcos + alpha * heatmap + beta * reg``."""
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"loss weights must be positive, got alpha={alpha}, beta={beta}")
    parts = [torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
             for v in (cls, box, ctr, heatmap, reg)]
    cls, box, ctr, heatmap, reg = parts
    total = cls + box + ctr + alpha * heatmap + beta * reg
    return LossReport(cls, box, ctr, heatmap, reg, total, alpha, beta, dict(counts or {}))
