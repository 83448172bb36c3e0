import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynapose.config import ConfigError, ModelConfig
from dynapose.data import InstanceAnnotation, generate_scene
from dynapose.model import (allocate_quota, assign_targets, build_model, load_checkpoint, pyramid_geometry,
                            sample_positive_locations, save_checkpoint)


def _small_cfg(**kw):
    base = dict(backbone_widths=(8, 8, 8, 8), fpn_channels=8, feat_channels=8, head_width=8, tower_depth=1,
                kpt_tower_depth=1, num_keypoints=3)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------------- network

def test_forward_shapes():
    cfg = _small_cfg()
    m = build_model(cfg)
    out = m(torch.zeros(2, 3, 100, 120))
    assert out.padded_size == (128, 128) and out.image_size == (100, 120)
    assert out.features.shape == (2, 8, 16, 16)
    assert out.offsets.shape == (2, 6, 16, 16)
    assert [c.shape[1] for c in out.dense.controller] == [m.schema.total_weights] * 3
    assert [c.shape[-1] for c in out.dense.cls_logits] == [16, 8, 4]
    assert all((b >= 0).all() for b in out.dense.box)


def test_default_controller_width():
    m = build_model(ModelConfig())
    assert m.controller.out_channels == 2737


@pytest.mark.parametrize("mode,shared", [("none", True), ("deconv", True), ("proposed", False)])
def test_refinement_variants(mode, shared):
    m = build_model(_small_cfg(refinement_mode=mode, refinement_shared=shared))
    out = m(torch.zeros(1, 3, 64, 64))
    if mode == "proposed":
        assert out.offsets is None
        assert m.refine_schema.output_channels == 6
        assert out.dense.refine_controller[0].shape[1] == m.refine_schema.total_weights
    else:
        assert out.offsets is None and out.dense.refine_controller is None
    assert m.heatmap_stride == (2 if mode == "deconv" else 8)


def test_pyramid_levels_configurable():
    m = build_model(_small_cfg(levels=(3, 4, 5, 6, 7)))
    out = m(torch.zeros(1, 3, 128, 128))
    assert out.dense.strides == (8, 16, 32, 64, 128)
    with pytest.raises(ConfigError):
        _small_cfg(levels=(4, 5))
    with pytest.raises(ConfigError):
        _small_cfg(refinement_mode="bilinear")


def test_init_is_seeded_and_controller_small():
    a = build_model(_small_cfg(), seed=3)
    b = build_model(_small_cfg(), seed=3)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    with torch.no_grad():
        assert float(a.controller.weight.std()) < 0.05 * float(a.bbox_pred.weight.std())
    assert torch.allclose(a.cls_logits.bias, torch.tensor([-math.log(99.0)]))
    assert float(a.bbox_pred.bias.abs().max()) == 0.0


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(_small_cfg(), seed=1)
    save_checkpoint(m, tmp_path / "c.pt", {"iteration": 5})
    m2, extra = load_checkpoint(tmp_path / "c.pt")
    assert extra == {"iteration": 5}
    x = torch.rand(1, 3, 64, 64)
    m.eval()
    m2.eval()
    assert torch.equal(m(x).features, m2(x).features)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


# --------------------------------------------------------------------------- assignment

def _brute_assign(annotations, geometry, radius):
    """Per-location scalar loops over every candidate box."""
    out = []
    for g in geometry:
        H, W = g.size
        s = g.stride
        for r in range(H):
            for c in range(W):
                x, y = s * c + s / 2, s * r + s / 2
                best, best_area = -1, math.inf
                for n, a in enumerate(annotations):
                    x0, y0, x1, y1 = a.box
                    l, t, rr, b = x - x0, y - y0, x1 - x, y1 - y
                    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
                    inside = (x > max(cx - radius * s, x0) and x < min(cx + radius * s, x1)
                              and y > max(cy - radius * s, y0) and y < min(cy + radius * s, y1))
                    m = max(l, t, rr, b)
                    area = (x1 - x0) * (y1 - y0)
                    if inside and g.size_range[0] <= m <= g.size_range[1] and area < best_area:
                        best, best_area = n, area
                ctr = 0.0
                if best >= 0:
                    x0, y0, x1, y1 = annotations[best].box
                    l, t, rr, b = x - x0, y - y0, x1 - x, y1 - y
                    ctr = math.sqrt(min(l, rr) / max(l, rr) * min(t, b) / max(t, b))
                out.append((best, ctr))
    return out


def _random_boxes(rng, n, size):
    anns = []
    for _ in range(n):
        w, h = rng.uniform(4, size * 0.9, 2)
        x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        anns.append(InstanceAnnotation([x0, y0, x0 + w, y0 + h], np.zeros((1, 3))))
    return anns


def test_assignment_matches_brute_force():
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    for trial in range(60):
        anns = _random_boxes(rng, int(rng.integers(0, 5)), 64)
        geom = pyramid_geometry(cfg, (64, 64))
        got = assign_targets(anns, geom, cfg.center_radius)
        ref = _brute_assign(anns, geom, cfg.center_radius)
        assert got.instance.tolist() == [r[0] for r in ref]
        assert np.allclose(got.centerness, [r[1] for r in ref], atol=1e-12)


def test_assignment_small_box_wins_overlap():
    cfg = ModelConfig()
    big = InstanceAnnotation([0, 0, 60, 60], np.zeros((1, 3)))
    small = InstanceAnnotation([16, 16, 44, 44], np.zeros((1, 3)))
    geom = pyramid_geometry(cfg, (64, 64))
    a = assign_targets([big, small], geom, 1.5)
    # the center cell at stride 8 lies in both center regions but only the small box fits range (0, 32]
    assert set(a.instance[a.level == 0]) <= {-1, 1}


def test_assignment_on_scenes_has_positives():
    cfg = ModelConfig()
    for seed in range(10):
        s = generate_scene(seed, 3, (128, 128))
        a = assign_targets(s.annotations, pyramid_geometry(cfg, (128, 128)), cfg.center_radius)
        pos = a.positive
        assert set(a.instance[pos]) == {0, 1, 2}
        assert np.all(a.ltrb[pos] > 0)
        assert np.all((a.centerness[pos] > 0) & (a.centerness[pos] <= 1))


# --------------------------------------------------------------------------- sampling

def round_robin_quota(available, max_samples):
    """Hand out one slot per instance per round, in order, until the budget runs out."""
    budget = max(max_samples, len(available))
    alloc = [0] * len(available)
    while budget > 0 and any(a < n for a, n in zip(alloc, available)):
        for i in range(len(available)):
            if budget > 0 and alloc[i] < available[i]:
                alloc[i] += 1
                budget -= 1
    return alloc


def test_quota_examples():
    assert allocate_quota([60, 60], 50) == [25, 25]
    assert allocate_quota([10], 50) == [10]
    # 50 over 7 instances: 7 each, the single leftover slot to the first
    assert allocate_quota([100] * 7, 50) == [8, 7, 7, 7, 7, 7, 7]
    assert allocate_quota([10, 1, 10], 7) == [3, 1, 3]
    assert allocate_quota([], 50) == []
    assert allocate_quota([2] * 60, 50) == [1] * 60


@settings(max_examples=300)
@given(st.lists(st.integers(0, 80), max_size=12), st.integers(1, 80))
def test_quota_matches_round_robin(available, m):
    got = allocate_quota(available, m)
    assert got == round_robin_quota(available, m)
    assert sum(got) == min(max(m, len(available)), sum(available))


def test_sampling_ranks_by_score_with_id_ties():
    groups = [np.array([4, 7, 9, 11]), np.array([20, 21])]
    scores = [np.array([0.1, 0.9, 0.9, 0.5]), np.array([0.3, 0.2])]
    kept = sample_positive_locations(groups, scores, max_samples=4)
    assert kept[0].tolist() == [7, 9]
    assert kept[1].tolist() == [20, 21]


@settings(max_examples=200)
@given(st.lists(st.integers(0, 40), max_size=8), st.integers(0, 2**31 - 1))
def test_sampling_never_exceeds_budget(sizes, seed):
    rng = np.random.default_rng(seed)
    groups, scores, start = [], [], 0
    for n in sizes:
        groups.append(np.arange(start, start + n))
        scores.append(rng.random(n))
        start += n
    kept = sample_positive_locations(groups, scores, 50)
    assert sum(len(k) for k in kept) <= max(50, len(sizes))
    for k, g, sc in zip(kept, groups, scores):
        assert set(k) <= set(g)
        if len(k) and len(k) < len(g):
            assert sc[np.searchsorted(g, k)].min() >= np.delete(sc, np.searchsorted(g, k)).max()
