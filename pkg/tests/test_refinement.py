import pytest
import torch

from dynapose.data import build_offset_targets, generate_scene, heatmap_target_index
from dynapose.refinement import DeconvUpsampler, OffsetHead, grid_rc_to_image_xy, refine_peak, refine_peaks


def test_offset_head_channels():
    assert OffsetHead(32, 17)(torch.randn(1, 32, 4, 4)).shape == (1, 34, 4, 4)
    assert OffsetHead(8, 1)(torch.randn(1, 8, 4, 4)).shape == (1, 2, 4, 4)


def test_zero_weights_give_cell_centers():
    head = OffsetHead(8, 2)
    torch.nn.init.zeros_(head.conv.weight)
    torch.nn.init.zeros_(head.conv.bias)
    off = head(torch.randn(1, 8, 6, 6))[0]
    assert refine_peak((3, 4), 1, off) == (3.0, 4.0)


def test_refine_peak_example():
    off = torch.zeros(4, 16, 16)
    off[2, 7, 12] = 0.5      # dx for keypoint 1
    off[3, 7, 12] = -0.25    # dy
    r, c = refine_peak((7, 12), 1, off)
    assert (r, c) == (6.75, 12.5)
    assert grid_rc_to_image_xy(6.5, 12.25) == (102.0, 56.0)


def test_refine_peaks_matches_scalar():
    g = torch.Generator().manual_seed(1)
    off = torch.randn(6, 5, 7, generator=g, dtype=torch.float64)
    rows = torch.randint(0, 5, (4, 3), generator=g)
    cols = torch.randint(0, 7, (4, 3), generator=g)
    r, c = refine_peaks(rows, cols, off)
    per = off.expand(4, -1, -1, -1)
    r2, c2 = refine_peaks(rows, cols, per)
    for n in range(4):
        for k in range(3):
            assert (float(r[n, k]), float(c[n, k])) == refine_peak((rows[n, k], cols[n, k]), k, off)
    assert torch.equal(r, r2) and torch.equal(c, c2)


def test_oracle_offsets_recover_keypoints():
    for seed in range(30):
        s = generate_scene(seed, 2, (128, 128))
        t = build_offset_targets(s.annotations, (16, 16), 8, 3)
        off = torch.from_numpy(t.delta.transpose(2, 0, 1).copy())
        for a in s.annotations:
            for k, (x, y, _) in enumerate(a.keypoints):
                cell = heatmap_target_index(x, y, 8, (16, 16))
                others = [o.keypoints[k] for o in s.annotations if o is not a]
                gx, gy = (x - 4) / 8, (y - 4) / 8
                if any(((ox - 4) / 8 - cell[1]) ** 2 + ((oy - 4) / 8 - cell[0]) ** 2
                       < (gx - cell[1]) ** 2 + (gy - cell[0]) ** 2 for ox, oy, _ in others):
                    continue
                r, c = refine_peak(cell, k, off)
                px, py = grid_rc_to_image_xy(r, c)
                assert abs(px - x) < 1e-6 and abs(py - y) < 1e-6


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_deconv_upsampling_factor(layers):
    up = DeconvUpsampler(5, layers)
    assert up.factor == 2 ** layers
    assert up(torch.randn(2, 5, 8, 8)).shape == (2, 5, 8 * 2 ** layers, 8 * 2 ** layers)
