import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynapose.data import (NUM_KEYPOINTS, CocoFormatError, InstanceAnnotation, Visibility,
                           build_offset_targets, clamp_stats, generate_scene, grid_to_image,
                           heatmap_target_index, load_coco_keypoints, make_manifest, read_manifest,
                           save_scene_image, scenes_from_manifest, scenes_to_coco, target_indices,
                           write_manifest)


def _ann(points, vis=2):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    kp = np.column_stack([pts, np.full(len(pts), vis)])
    x0, y0 = pts.min(0) - 2
    x1, y1 = pts.max(0) + 2
    return InstanceAnnotation([x0, y0, x1, y1], kp)


# --------------------------------------------------------------------------- scenes

def test_empty_scene_is_background_only():
    s = generate_scene(0, 0, (128, 128))
    assert s.annotations == []
    assert s.image.shape == (128, 128, 3)
    assert s.image.min() >= 0 and s.image.max() <= 1
    # no saturated marker colors anywhere
    assert s.image.max() < 0.5


def test_scene_determinism():
    a = generate_scene(7, 3, (256, 256))
    b = generate_scene(7, 3, (256, 256))
    assert np.array_equal(a.image, b.image)
    for x, y in zip(a.annotations, b.annotations):
        assert np.array_equal(x.keypoints, y.keypoints)
        assert np.array_equal(x.box, y.box)


def test_scene_invariants_over_seeds():
    for seed in range(100):
        s = generate_scene(seed, 3, (256, 256))
        assert len(s.annotations) == 3
        for a in s.annotations:
            assert a.keypoints.shape == (NUM_KEYPOINTS, 3)
            assert a.box[0] < a.box[2] and a.box[1] < a.box[3]
            lab = a.keypoints[a.keypoints[:, 2] > 0]
            assert len(lab) == NUM_KEYPOINTS
            assert np.all((lab[:, 0] >= 0) & (lab[:, 0] < 256))
            assert np.all((lab[:, 1] >= 0) & (lab[:, 1] < 256))
            assert set(np.unique(a.keypoints[:, 2])) <= {Visibility.OCCLUDED, Visibility.VISIBLE}


def test_scene_rejects_tiny_images():
    with pytest.raises(ValueError, match="too small"):
        generate_scene(0, 1, (40, 40))


def test_figures_are_distinct_colors():
    s = generate_scene(3, 2, (128, 128))
    colors = []
    for a in s.annotations:
        # sample the limb between the two hips (marker-free midpoint)
        mid = (a.keypoints[11, :2] + a.keypoints[12, :2]) / 2
        colors.append(s.image[int(round(mid[1])), int(round(mid[0]))])
    assert np.abs(colors[0] - colors[1]).max() > 0.05


def test_occlusion_marks_covered_keypoints():
    found = False
    for seed in range(30):
        s = generate_scene(seed, 6, (128, 128), allow_overlap=True)
        if any((a.keypoints[:, 2] == Visibility.OCCLUDED).any() for a in s.annotations):
            found = True
            break
    assert found


# --------------------------------------------------------------------------- target index

def test_target_index_paper_example():
    assert heatmap_target_index(100, 60, 8) == (7, 12)


def test_target_index_zero_case():
    assert heatmap_target_index(4, 4, 8) == (0, 0)


def _scalar_index(x, y, s, H, W):
    c = int(math.floor((x - s / 2) / s))
    r = int(math.floor((y - s / 2) / s))
    return min(max(r, 0), H - 1), min(max(c, 0), W - 1)


def test_target_index_clamps_and_counts():
    before = clamp_stats["clamped"]
    assert heatmap_target_index(3, 3, 8, (16, 16)) == (0, 0)
    assert clamp_stats["clamped"] == before + 1
    for i in range(160):
        x = i / 10.0
        assert heatmap_target_index(x, x, 8, (16, 16)) == _scalar_index(x, x, 8, 16, 16)


def test_target_index_upper_clamp():
    assert heatmap_target_index(127.9, 127.9, 8, (16, 16)) == (15, 15)
    assert heatmap_target_index(200, 10, 8, (16, 16)) == (0, 15)


@given(st.floats(0, 255.99), st.floats(0, 255.99), st.sampled_from([4, 8, 16]))
def test_vectorized_matches_scalar(x, y, s):
    H = W = 256 // s
    r, c = target_indices(np.array([[x, y]]), s, (H, W))
    assert (int(r[0]), int(c[0])) == heatmap_target_index(x, y, s, (H, W))


@given(st.floats(4, 250), st.floats(4, 250))
def test_target_cell_residual_within_one_cell(x, y):
    # floor-based assignment puts the keypoint within [0, stride) of the cell center
    r, c = heatmap_target_index(x, y, 8, (32, 32))
    cx, cy = grid_to_image([c, r], 8)
    assert 0 <= x - cx < 8 and 0 <= y - cy < 8


# --------------------------------------------------------------------------- offset targets

def test_offset_at_cell_center_is_zero():
    a = _ann([[8 * 5 + 4, 8 * 3 + 4]])
    t = build_offset_targets([a], (16, 16), 8, 3.0, num_keypoints=1)
    assert t.mask[3, 5, 0]
    assert np.allclose(t.delta[3, 5], 0)


def test_offset_empty_channel():
    kp = np.array([[50, 50, 2], [0, 0, 0]], dtype=float)
    a = InstanceAnnotation([40, 40, 60, 60], kp)
    t = build_offset_targets([a], (16, 16), 8, 3.0)
    assert not t.mask[:, :, 1].any()
    assert np.all(t.delta[:, :, 2:] == 0)


def _brute_offsets(points, H, W, s, R):
    delta = np.zeros((H, W, 2))
    mask = np.zeros((H, W), dtype=bool)
    keys = []
    for n, (x, y) in enumerate(points):
        r, c = _scalar_index(x, y, s, H, W)
        keys.append((r, c, n))
    for i in range(H):
        for j in range(W):
            best = None
            for (r, c, n) in keys:
                gx = (points[n][0] - s / 2) / s
                gy = (points[n][1] - s / 2) / s
                d2 = (gx - j) ** 2 + (gy - i) ** 2
                cand = (d2, r, c, n)
                if best is None or cand < best:
                    best = cand
                    best_delta = (gx - j, gy - i)
            if best[0] <= R * R:
                mask[i, j] = True
                delta[i, j] = best_delta
    return delta, mask


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 127.9), st.floats(0, 127.9)), min_size=1, max_size=4))
def test_offsets_match_brute_force(points):
    anns = [_ann([p]) if p[0] > 2 and p[1] > 2 else InstanceAnnotation([0, 0, 5, 5], [[p[0], p[1], 2]])
            for p in points]
    t = build_offset_targets(anns, (16, 16), 8, 3.0, num_keypoints=1)
    d, m = _brute_offsets(points, 16, 16, 8, 3.0)
    assert np.array_equal(t.mask[:, :, 0], m)
    assert np.allclose(t.delta, d, atol=1e-12)


def test_offset_tie_goes_to_lower_cell():
    # two keypoints equidistant from cell (4, 4): target cells (4, 2) and (4, 6)
    a = _ann([[8 * 2 + 4, 8 * 4 + 4]])
    b = _ann([[8 * 6 + 4, 8 * 4 + 4]])
    t = build_offset_targets([b, a], (16, 16), 8, 3.0, num_keypoints=1)
    assert np.allclose(t.delta[4, 4], [-2, 0])


def test_offset_heatmap_agreement_on_scenes():
    for seed in range(20):
        s = generate_scene(seed, 2, (128, 128))
        t = build_offset_targets(s.annotations, (16, 16), 8, 3.0)
        for a in s.annotations:
            for k, (x, y, v) in enumerate(a.keypoints):
                r, c = heatmap_target_index(x, y, 8, (16, 16))
                gx, gy = (x - 4) / 8, (y - 4) / 8
                assert t.mask[r, c, k]
                dx, dy = t.delta[r, c, 2 * k:2 * k + 2]
                # unless another person's same keypoint is closer to this cell
                others = [o.keypoints[k] for o in s.annotations if o is not a]
                closer = any(((ox - 4) / 8 - c) ** 2 + ((oy - 4) / 8 - r) ** 2
                             < (gx - c) ** 2 + (gy - r) ** 2 for ox, oy, _ in others)
                if not closer:
                    assert abs(dx - (gx - c)) < 1e-12 and abs(dy - (gy - r)) < 1e-12
                    assert abs(dx) < 1 and abs(dy) < 1


# --------------------------------------------------------------------------- COCO + manifests

def _coco_doc(kps_list, bbox=(10, 10, 50, 80)):
    return {
        "images": [{"id": 1, "file_name": "a.png", "height": 128, "width": 128}],
        "annotations": [{"id": 10 + n, "image_id": 1, "bbox": list(bbox), "keypoints": kps,
                         "num_keypoints": sum(1 for v in kps[2::3] if v > 0), "category_id": 1}
                        for n, kps in enumerate(kps_list)],
        "categories": [{"id": 1, "name": "person"}],
    }


def test_coco_load_visible(tmp_path):
    kps = []
    for k in range(17):
        kps += [20 + k, 20 + 2 * k, 2]
    (tmp_path / "ann.json").write_text(json.dumps(_coco_doc([kps])))
    scenes = load_coco_keypoints(tmp_path / "ann.json", load_images=False)
    assert len(scenes) == 1
    a = scenes[0].annotations[0]
    assert a.num_keypoints == 17
    assert np.all(a.keypoints[:, 2] == Visibility.VISIBLE)
    assert np.allclose(a.box, [10, 10, 60, 90])


def test_coco_unlabeled_person_excluded_from_keypoint_targets(tmp_path):
    (tmp_path / "ann.json").write_text(json.dumps(_coco_doc([[0, 0, 0] * 17])))
    scenes = load_coco_keypoints(tmp_path / "ann.json", load_images=False)
    a = scenes[0].annotations[0]
    assert np.all(a.keypoints[:, 2] == Visibility.ABSENT)
    t = build_offset_targets([a], (16, 16), 8)
    assert not t.mask.any()


def test_coco_empty_annotations(tmp_path):
    doc = _coco_doc([])
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    scenes = load_coco_keypoints(tmp_path / "ann.json", load_images=False)
    assert len(scenes) == 1 and scenes[0].annotations == []
    doc["images"] = []
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    assert load_coco_keypoints(tmp_path / "ann.json") == []


def test_coco_malformed_names_record(tmp_path):
    doc = _coco_doc([[1, 2, 2] * 16 + [1, 2]])
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    with pytest.raises(CocoFormatError) as err:
        load_coco_keypoints(tmp_path / "ann.json", load_images=False)
    assert err.value.record_id == 10


def test_coco_missing_image(tmp_path, caplog):
    (tmp_path / "ann.json").write_text(json.dumps(_coco_doc([])))
    assert load_coco_keypoints(tmp_path / "ann.json", missing="skip") == []
    with pytest.raises(FileNotFoundError):
        load_coco_keypoints(tmp_path / "ann.json", missing="fail")


def test_coco_roundtrip_with_images(tmp_path):
    m = make_manifest("t", [1, 2], [1, 2], (128, 128))
    scenes = scenes_from_manifest(m)
    for s in scenes:
        save_scene_image(s, tmp_path / s.file_name)
    (tmp_path / "gt.json").write_text(json.dumps(scenes_to_coco(scenes)))
    loaded = load_coco_keypoints(tmp_path / "gt.json")
    assert len(loaded) == 2
    for a, b in zip(scenes, loaded):
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
        for x, y in zip(a.annotations, b.annotations):
            assert np.allclose(x.keypoints, y.keypoints)


def test_manifest_reproduces_scenes(tmp_path):
    m = make_manifest("train", [5, 6, 7], [1, 2, 3], (128, 128))
    write_manifest(m, tmp_path / "m.json")
    again = read_manifest(tmp_path / "m.json")
    a = scenes_from_manifest(m)
    b = scenes_from_manifest(again)
    assert [len(s.annotations) for s in a] == [1, 2, 3]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
