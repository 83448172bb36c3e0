"""Keypoint similarity and COCO-style average precision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InstanceAnnotation

# COCO person keypoint sigmas; the falloff constant used here is 2 * sigma
COCO_SIGMAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62,
                        1.07, 1.07, .87, .87, .89, .89]) / 10.0
SYNTHETIC_KAPPA = 0.08
OKS_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class UndefinedMetricError(ValueError):
    """Raised when a metric has no ground truth to be computed against."""


@dataclass(frozen=True)
class OksParams:
    kappas: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kappas, dtype=np.float64)
        if np.any(k <= 0):
            raise ValueError("falloff constants must be positive")
        object.__setattr__(self, "kappas", k)

    @classmethod
    def coco(cls) -> "OksParams":
        return cls(2 * COCO_SIGMAS)

    @classmethod
    def uniform(cls, num_keypoints: int = 17, kappa: float = SYNTHETIC_KAPPA) -> "OksParams":
        return cls(np.full(num_keypoints, kappa))


def oks(pred: np.ndarray, gt: InstanceAnnotation, params: OksParams) -> float:
    """Mean over labeled keypoints of ``exp(-d^2 / (2 * area * kappa^2))``."""
    labeled = gt.labeled
    if not labeled.any():
        raise UndefinedMetricError("ground truth has no labeled keypoints")
    pred = np.asarray(pred, dtype=np.float64)[:, :2]
    d2 = np.sum((pred - gt.keypoints[:, :2]) ** 2, axis=1)
    e = d2 / (2.0 * gt.area * params.kappas ** 2)
    return float(np.mean(np.exp(-e[labeled])))


@dataclass
class APResult:
    ap: float
    per_threshold: dict[float, float]
    num_gt: int
    num_detections: int

    @property
    def ap50(self) -> float:
        return self.per_threshold[0.5]

    @property
    def ap75(self) -> float:
        return self.per_threshold[0.75]


def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(detections: list[list], ground_truth: list[list[InstanceAnnotation]],
                      params: OksParams, thresholds=OKS_THRESHOLDS) -> APResult:
    """COCO-style AP over OKS thresholds.

    ``detections[i]`` is a list of ``(score, keypoints)`` pairs (or objects
    with ``rank_score``/``keypoints``) for image ``i``. Within an image,
    detections are matched greedily by descending score, each to the unmatched
    ground truth of highest OKS at or above the threshold. Ground truth with no
    labeled keypoint is left out.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same images")
    gts = [[g for g in img if g.labeled.any()] for img in ground_truth]
    num_gt = sum(len(g) for g in gts)
    if num_gt == 0:
        raise UndefinedMetricError("no ground-truth instances with labeled keypoints")

    per_img = []
    for dets, g in zip(detections, gts):
        pairs = [_as_pair(d) for d in dets]
        scores = np.array([p[0] for p in pairs], dtype=np.float64)
        order = np.argsort(-scores, kind="mergesort")
        pairs = [pairs[i] for i in order]
        sim = np.array([[oks(kp, gi, params) for gi in g] for _, kp in pairs]).reshape(len(pairs), len(g))
        per_img.append((scores[order], sim))

    all_scores = np.concatenate([s for s, _ in per_img]) if per_img else np.zeros(0)
    glob = np.argsort(-all_scores, kind="mergesort")
    result = {}
    for t in thresholds:
        tps = []
        for scores, sim in per_img:
            matched = np.zeros(sim.shape[1], dtype=bool)
            tp = np.zeros(len(scores), dtype=bool)
            for d in range(len(scores)):
                cand = np.where(matched, -1.0, sim[d])
                if cand.size and cand.max() >= t:
                    g = int(np.argmax(cand))
                    matched[g] = True
                    tp[d] = True
            tps.append(tp)
        tp_all = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
        result[float(t)] = _interpolated_ap(tp_all[glob], num_gt)
    return APResult(float(np.mean(list(result.values()))), result, num_gt, int(len(all_scores)))


def _as_pair(d):
    if hasattr(d, "keypoints"):
        return float(d.rank_score), np.asarray(d.keypoints)
    score, kp = d
    return float(score), np.asarray(kp)


def mean_keypoint_error(detections: list[list], ground_truth: list[list[InstanceAnnotation]],
                        params: OksParams) -> float:
    """Mean pixel distance over labeled keypoints of each ground truth and its best-OKS
    detection (one-to-one, by descending detection score). Unmatched ground truth is skipped."""
    errs = []
    for dets, gts in zip(detections, ground_truth):
        gts = [g for g in gts if g.labeled.any()]
        pairs = sorted((_as_pair(d) for d in dets), key=lambda p: -p[0])
        used = set()
        for _, kp in pairs:
            best, bi = -1.0, None
            for gi, g in enumerate(gts):
                if gi in used:
                    continue
                o = oks(kp, g, params)
                if o > best:
                    best, bi = o, gi
            if bi is None:
                continue
            used.add(bi)
            g = gts[bi]
            d = np.hypot(*(kp[:, :2] - g.keypoints[:, :2]).T)
            errs.append(d[g.labeled].mean())
    return float(np.mean(errs)) if errs else float("nan")
