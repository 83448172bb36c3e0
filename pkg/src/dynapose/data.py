"""Synthetic multi-person scenes, COCO keypoint loading and ground-truth targets.

Grid convention used everywhere: cell ``(r, c)`` of a stride-``s`` map has the
image-space center ``(s*c + s/2, s*r + s/2)``. A keypoint ``(x, y)`` sits at the
continuous grid position ``((x - s/2)/s, (y - s/2)/s)``.
"""
from __future__ import annotations

import collections
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)
NUM_KEYPOINTS = len(COCO_KEYPOINT_NAMES)

MIN_FIGURE_WIDTH = 32
MIN_FIGURE_HEIGHT = 48
MIN_IMAGE_SIZE = 64

# how often a target index had to be clamped into the map
clamp_stats: collections.Counter = collections.Counter()


class Visibility(enum.IntEnum):
    ABSENT = 0
    OCCLUDED = 1
    VISIBLE = 2


class CocoFormatError(ValueError):
    def __init__(self, message: str, record_id=None):
        super().__init__(f"{message} (record id={record_id})" if record_id is not None else message)
        self.record_id = record_id


@dataclass
class InstanceAnnotation:
    """One person. ``keypoints`` is a ``(K, 3)`` array of ``x, y, visibility``."""

    box: np.ndarray
    keypoints: np.ndarray

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if not (self.box[0] < self.box[2] and self.box[1] < self.box[3]):
            raise ValueError(f"degenerate box {self.box.tolist()}")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def labeled(self) -> np.ndarray:
        return self.keypoints[:, 2] > Visibility.ABSENT

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return float((x1 - x0) * (y1 - y0))


@dataclass
class Scene:
    image: np.ndarray                 # H x W x C, values in [0, 1]
    annotations: list[InstanceAnnotation]
    seed: int | None = None
    image_id: int | None = None
    file_name: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class OffsetTarget:
    delta: np.ndarray   # H x W x 2K, (dx, dy) per keypoint, grid units
    mask: np.ndarray    # H x W x K, bool


# --------------------------------------------------------------------------- targets

def heatmap_target_index(x_star: float, y_star: float, stride: int = 8,
                         map_size: tuple[int, int] | None = None) -> tuple[int, int]:
    """One-hot heatmap cell ``(row, col)`` for a keypoint in image pixels."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    half = stride / 2
    row = math.floor((y_star - half) / stride)
    col = math.floor((x_star - half) / stride)
    hi_r = map_size[0] - 1 if map_size else None
    hi_c = map_size[1] - 1 if map_size else None
    r = min(max(row, 0), hi_r) if hi_r is not None else max(row, 0)
    c = min(max(col, 0), hi_c) if hi_c is not None else max(col, 0)
    clamp_stats["total"] += 1
    if (r, c) != (row, col):
        clamp_stats["clamped"] += 1
    return r, c


def target_indices(xy: np.ndarray, stride: int, map_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``heatmap_target_index`` for an ``(n, 2)`` array of x, y."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    half = stride / 2
    col = np.floor((xy[:, 0] - half) / stride).astype(np.int64)
    row = np.floor((xy[:, 1] - half) / stride).astype(np.int64)
    r = np.clip(row, 0, map_size[0] - 1)
    c = np.clip(col, 0, map_size[1] - 1)
    clamp_stats["total"] += len(xy)
    clamp_stats["clamped"] += int(np.count_nonzero((r != row) | (c != col)))
    return r, c


def image_to_grid(xy: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(xy, dtype=np.float64) - stride / 2) / stride


def grid_to_image(rc_or_xy: np.ndarray, stride: int) -> np.ndarray:
    """Continuous grid coordinates (same axis order as given) to image pixels."""
    return stride * np.asarray(rc_or_xy, dtype=np.float64) + stride / 2


def build_offset_targets(annotations: list[InstanceAnnotation], map_size: tuple[int, int],
                         stride: int = 8, radius: float = 3.0,
                         num_keypoints: int | None = None) -> OffsetTarget:
    """Per-channel displacement from each cell to the nearest keypoint of that channel.

    Only cells within ``radius`` grid cells (euclidean) of some keypoint are
    supervised. Ties go to the keypoint whose target cell has the lowest
    ``(row, col)``, then to the earlier instance.
    """
    H, W = map_size
    K = num_keypoints if num_keypoints is not None else (
        annotations[0].num_keypoints if annotations else NUM_KEYPOINTS)
    delta = np.zeros((H, W, 2 * K))
    mask = np.zeros((H, W, K), dtype=bool)
    if not annotations:
        return OffsetTarget(delta, mask)
    kps = np.stack([a.keypoints for a in annotations])          # N x K x 3
    rows, cols = np.mgrid[0:H, 0:W]
    for k in range(K):
        pts = kps[:, k]
        pts = pts[pts[:, 2] > Visibility.ABSENT]
        if len(pts) == 0:
            continue
        tr, tc = target_indices(pts[:, :2], stride, map_size)
        order = np.lexsort((np.arange(len(pts)), tc, tr))
        g = image_to_grid(pts[order, :2], stride)                # n x 2 (gx, gy)
        dx = g[:, 0][:, None, None] - cols[None]
        dy = g[:, 1][:, None, None] - rows[None]
        d2 = dx * dx + dy * dy
        nearest = np.argmin(d2, axis=0)                          # first minimum wins
        sel = np.take_along_axis(d2, nearest[None], 0)[0]
        mask[:, :, k] = sel <= radius * radius
        delta[:, :, 2 * k] = np.take_along_axis(dx, nearest[None], 0)[0]
        delta[:, :, 2 * k + 1] = np.take_along_axis(dy, nearest[None], 0)[0]
    delta[~np.repeat(mask, 2, axis=2)] = 0.0
    return OffsetTarget(delta, mask)


def build_instance_offset_targets(annotation: InstanceAnnotation, map_size: tuple[int, int],
                                  stride: int = 8, radius: float = 3.0) -> OffsetTarget:
    """Offsets scoped to a single instance (per-instance refinement heads)."""
    return build_offset_targets([annotation], map_size, stride, radius, annotation.num_keypoints)


# --------------------------------------------------------------------------- synthetic scenes

# canonical pose, unit height, y pointing down, +x is the person's left
_HEAD = {0: (0.0, 0.08), 1: (0.04, 0.045), 2: (-0.04, 0.045), 3: (0.085, 0.075), 4: (-0.085, 0.075)}
_SHOULDER_Y, _SHOULDER_X = 0.22, 0.13
_HIP_Y, _HIP_X = 0.55, 0.08
_UPPER_ARM, _FOREARM = 0.17, 0.15
_THIGH, _SHIN = 0.22, 0.21

# fixed per-keypoint-type marker colors so left/right parts are distinguishable
_MARKER_COLORS = np.array([
    [1.00, 1.00, 1.00], [1.00, 0.20, 0.20], [0.20, 0.20, 1.00], [1.00, 0.60, 0.00], [0.00, 0.70, 1.00],
    [1.00, 1.00, 0.00], [0.00, 1.00, 1.00], [1.00, 0.00, 1.00], [0.00, 1.00, 0.00], [0.60, 0.00, 0.00],
    [0.00, 0.00, 0.60], [1.00, 0.50, 0.50], [0.50, 0.50, 1.00], [0.60, 0.60, 0.00], [0.00, 0.60, 0.60],
    [0.60, 0.00, 0.60], [0.00, 0.50, 0.00],
])


def _pose(rng: np.random.Generator) -> np.ndarray:
    """Random articulated 17-keypoint pose in template units (x, y)."""
    p = np.zeros((NUM_KEYPOINTS, 2))
    for k, xy in _HEAD.items():
        p[k] = xy
    turn = rng.uniform(-0.02, 0.02)
    p[:5, 0] += turn
    for side, (sh, el, wr, hip, kn, an) in ((1, (5, 7, 9, 11, 13, 15)), (-1, (6, 8, 10, 12, 14, 16))):
        p[sh] = (side * _SHOULDER_X, _SHOULDER_Y)
        p[hip] = (side * _HIP_X, _HIP_Y)
        a = rng.uniform(0.15, 2.3)
        p[el] = p[sh] + _UPPER_ARM * np.array([side * math.sin(a), math.cos(a)])
        b = a + rng.uniform(-1.2, 1.2)
        p[wr] = p[el] + _FOREARM * np.array([side * math.sin(b), math.cos(b)])
        a = rng.uniform(0.0, 0.45)
        p[kn] = p[hip] + _THIGH * np.array([side * math.sin(a), math.cos(a)])
        b = a + rng.uniform(-0.45, 0.3)
        p[an] = p[kn] + _SHIN * np.array([side * math.sin(b), math.cos(b)])
    theta = rng.uniform(-0.2, 0.2)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    center = np.array([0.0, 0.5])
    return (p - center) @ rot.T + center


def _segment_coverage(xx, yy, p0, p1, half_width):
    d = p1 - p0
    L2 = float(d @ d)
    if L2 == 0:
        dist = np.hypot(xx - p0[0], yy - p0[1])
    else:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / L2, 0.0, 1.0)
        dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _disc_coverage(xx, yy, c, radius):
    return np.clip(radius + 0.5 - np.hypot(xx - c[0], yy - c[1]), 0.0, 1.0)


def _ring_coverage(xx, yy, c, radius, half_width):
    return np.clip(half_width + 0.5 - np.abs(np.hypot(xx - c[0], yy - c[1]) - radius), 0.0, 1.0)


def _box_of(points: np.ndarray, pad: float, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    x0, y0 = points.min(0) - pad
    x1, y1 = points.max(0) + pad
    return np.array([max(x0, 0.0), max(y0, 0.0), min(x1, float(W)), min(y1, float(H))])


def _overlap_area(a, b, gap=2.0) -> float:
    w = min(a[2], b[2]) + gap - max(a[0], b[0])
    h = min(a[3], b[3]) + gap - max(a[1], b[1])
    return float(max(w, 0.0) * max(h, 0.0))


def generate_scene(seed: int, num_instances: int, image_size: tuple[int, int] = (128, 128), *,
                   allow_overlap: bool = False, p_absent: float = 0.0,
                   max_height: float | None = None) -> Scene:
    """Render ``num_instances`` stick figures with exact COCO-topology annotations.

    Deterministic in ``(seed, num_instances, image_size)`` and the keyword flags.
    With ``allow_overlap=False`` figures are shrunk (down to the minimum
    template) to find disjoint placements and only overlap as a last resort.
    """
    if num_instances < 0:
        raise ValueError("num_instances must be >= 0")
    H, W = (int(v) for v in image_size)
    if H < MIN_IMAGE_SIZE or W < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size {image_size} too small: need >= {MIN_IMAGE_SIZE} to place a "
                         f"{MIN_FIGURE_WIDTH}x{MIN_FIGURE_HEIGHT} figure template")
    rng = np.random.default_rng([int(seed), int(num_instances), H, W])
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    base = rng.uniform(0.05, 0.25, size=3)
    grad = rng.uniform(-0.08, 0.08, size=(2, 3))
    image = (base + (yy / H)[..., None] * grad[0] + (xx / W)[..., None] * grad[1]
             + rng.normal(0.0, 0.015, size=(H, W, 3)))

    h_hi = max_height if max_height is not None else min(72.0, 0.5 * min(H, W))
    h_hi = max(h_hi, MIN_FIGURE_HEIGHT)
    hues = rng.permutation(12)[:max(num_instances, 1)] if num_instances <= 12 else rng.integers(0, 12, num_instances)

    figures = []
    placed_boxes = []
    margin = 3.0
    for n in range(num_instances):
        scale = rng.uniform(MIN_FIGURE_HEIGHT, h_hi)
        width_gain = rng.uniform(0.9, 1.2)
        pose = _pose(rng)
        chosen, best = None, None
        for attempt in range(120):
            if attempt and attempt % 30 == 0:
                scale = max(MIN_FIGURE_HEIGHT, scale * 0.85)
                pose = _pose(rng)
            pts = pose * np.array([scale * width_gain, scale])
            pad = 0.07 * scale + 3
            lo_x = margin - pts[:, 0].min()
            hi_x = W - margin - 1 - pts[:, 0].max()
            lo_y = margin - pts[:, 1].min()
            hi_y = H - margin - 1 - pts[:, 1].max()
            if hi_x < lo_x or hi_y < lo_y:
                scale = max(MIN_FIGURE_HEIGHT, scale * 0.9)
                pose = _pose(rng)
                continue
            off = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
            cand = pts + off
            box = _box_of(cand, pad, (H, W))
            overlap = sum(_overlap_area(box, b) for b in placed_boxes)
            if best is None or overlap < best[0]:
                best = (overlap, (cand, box, scale))
            if allow_overlap or overlap == 0.0:
                chosen = (cand, box, scale)
                break
        if chosen is None:
            if best is None:
                raise ValueError(f"could not place a figure in image_size {image_size}")
            chosen = best[1]
        cand, box, scale = chosen
        placed_boxes.append(box)
        hue = hues[n] / 12.0
        color = np.array(_hsv(hue, rng.uniform(0.5, 0.9), rng.uniform(0.55, 0.95)))
        absent = rng.random(NUM_KEYPOINTS) < p_absent
        figures.append((cand, box, scale, color, absent))

    annotations = []
    coverages = []
    for cand, box, scale, color, absent in figures:
        limb_hw = max(1.0, 0.022 * scale)
        cov_total = np.zeros((H, W))
        # limbs, head ring, markers
        for a, b in COCO_SKELETON:
            if absent[a] or absent[b] or (a < 5 and b < 5):
                continue
            cov = _segment_coverage(xx, yy, cand[a], cand[b], limb_hw)
            image = image * (1 - cov[..., None]) + color * cov[..., None]
            cov_total = np.maximum(cov_total, cov)
        if not absent[0]:
            cov = _ring_coverage(xx, yy, cand[0], 0.1 * scale, 0.6)
            image = image * (1 - cov[..., None]) + color * cov[..., None]
            cov_total = np.maximum(cov_total, cov)
        for k in range(NUM_KEYPOINTS):
            if absent[k]:
                continue
            cov = _disc_coverage(xx, yy, cand[k], 1.6)
            image = image * (1 - cov[..., None]) + _MARKER_COLORS[k] * cov[..., None]
            cov_total = np.maximum(cov_total, cov)
        coverages.append(cov_total)
        vis = np.where(absent, Visibility.ABSENT, Visibility.VISIBLE).astype(np.float64)
        annotations.append(InstanceAnnotation(box=box, keypoints=np.column_stack([cand, vis])))

    # a keypoint covered by a later figure is occluded
    for i, ann in enumerate(annotations):
        for cov in coverages[i + 1:]:
            for k in range(NUM_KEYPOINTS):
                if ann.keypoints[k, 2] == Visibility.VISIBLE:
                    x, y = ann.keypoints[k, :2]
                    if cov[int(round(y)) % H, int(round(x)) % W] > 0.5:
                        ann.keypoints[k, 2] = Visibility.OCCLUDED

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Scene(image=image, annotations=annotations, seed=int(seed),
                 meta={"num_instances": num_instances, "allow_overlap": allow_overlap, "p_absent": p_absent})


def _hsv(h, s, v):
    import colorsys
    return colorsys.hsv_to_rgb(h, s, v)


# --------------------------------------------------------------------------- manifests

MANIFEST_FORMAT = "dynapose-synthetic-manifest"


def make_manifest(split: str, seeds, counts, image_size, allow_overlap=False, p_absent=0.0) -> dict:
    seeds, counts = list(seeds), list(counts)
    if len(seeds) != len(counts):
        raise ValueError("seeds and counts must have equal length")
    return {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "split": split,
        "image_size": [int(image_size[0]), int(image_size[1])],
        "allow_overlap": bool(allow_overlap),
        "p_absent": float(p_absent),
        "scenes": [{"seed": int(s), "num_instances": int(n)} for s, n in zip(seeds, counts)],
    }


def random_manifest(split: str, n_scenes: int, base_seed: int, min_instances: int, max_instances: int,
                    image_size, allow_overlap=False, p_absent=0.0) -> dict:
    rng = np.random.default_rng(base_seed)
    counts = rng.integers(min_instances, max_instances + 1, size=n_scenes)
    seeds = base_seed + np.arange(n_scenes)
    return make_manifest(split, seeds, counts, image_size, allow_overlap, p_absent)


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a synthetic dataset manifest")
    return doc


def scenes_from_manifest(manifest: dict) -> list[Scene]:
    size = tuple(manifest["image_size"])
    scenes = []
    for i, row in enumerate(manifest["scenes"]):
        s = generate_scene(row["seed"], row["num_instances"], size,
                           allow_overlap=manifest.get("allow_overlap", False),
                           p_absent=manifest.get("p_absent", 0.0))
        s.image_id = i
        s.file_name = f"{i:06d}.png"
        scenes.append(s)
    return scenes


# --------------------------------------------------------------------------- COCO

def load_coco_keypoints(path: str | Path, image_dir: str | Path | None = None, *,
                        missing: str = "skip", load_images: bool = True) -> list[Scene]:
    """Load a COCO person-keypoints document into scenes.

    ``missing`` is ``"skip"`` (warn and drop the image) or ``"fail"``.
    """
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise CocoFormatError(f"{path}: missing 'images' or 'annotations'")

    by_image: dict = collections.defaultdict(list)
    for ann in doc["annotations"]:
        rid = ann.get("id") if isinstance(ann, dict) else None
        try:
            kps = np.asarray(ann["keypoints"], dtype=np.float64)
            if kps.size % 3:
                raise ValueError("keypoints length not a multiple of 3")
            kps = kps.reshape(-1, 3)
            if not set(np.unique(kps[:, 2])) <= {0.0, 1.0, 2.0}:
                raise ValueError("visibility codes must be 0, 1 or 2")
            x, y, w, h = (float(v) for v in ann["bbox"])
            if w <= 0 or h <= 0:
                raise ValueError("non-positive bbox size")
            inst = InstanceAnnotation(box=[x, y, x + w, y + h], keypoints=kps)
            by_image[ann["image_id"]].append(inst)
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoFormatError(f"malformed annotation: {exc}", rid) from exc

    scenes = []
    for img in doc["images"]:
        rid = img.get("id") if isinstance(img, dict) else None
        try:
            iid, fname = img["id"], img["file_name"]
            H, W = int(img["height"]), int(img["width"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoFormatError(f"malformed image record: {exc}", rid) from exc
        fpath = image_dir / fname
        if load_images:
            if not fpath.exists():
                if missing == "fail":
                    raise FileNotFoundError(f"image file not found: {fpath}")
                log.warning("skipping image %s: file not found", fpath)
                continue
            from PIL import Image
            arr = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.float32) / 255.0
        else:
            arr = np.zeros((H, W, 3), dtype=np.float32)
        scenes.append(Scene(image=arr, annotations=by_image.get(iid, []), image_id=iid, file_name=fname))
    return scenes


def scenes_to_coco(scenes: list[Scene]) -> dict:
    """COCO keypoints ground-truth document for ``scenes`` (image ids in order)."""
    images, anns = [], []
    aid = 1
    for i, s in enumerate(scenes):
        iid = s.image_id if s.image_id is not None else i
        H, W = s.size
        images.append({"id": iid, "file_name": s.file_name or f"{iid:06d}.png", "height": H, "width": W})
        for a in s.annotations:
            x0, y0, x1, y1 = a.box.tolist()
            kp = a.keypoints.copy()
            kp[kp[:, 2] == 0, :2] = 0.0
            anns.append({
                "id": aid, "image_id": iid, "category_id": 1, "iscrowd": 0,
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0),
                "keypoints": [float(v) if j % 3 < 2 else int(v) for j, v in enumerate(kp.reshape(-1))],
                "num_keypoints": int(np.count_nonzero(kp[:, 2] > 0)),
            })
            aid += 1
    return {
        "images": images, "annotations": anns,
        "categories": [{"id": 1, "name": "person", "keypoints": list(COCO_KEYPOINT_NAMES),
                        "skeleton": [[a + 1, b + 1] for a, b in COCO_SKELETON]}],
    }


def save_scene_image(scene: Scene, path: str | Path) -> None:
    from PIL import Image
    Image.fromarray((np.clip(scene.image, 0, 1) * 255).round().astype(np.uint8)).save(path)
