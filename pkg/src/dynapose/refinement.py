"""Sub-cell keypoint refinement from a regressed offset map.

Offset maps are channel-first ``(2K, H, W)``; channels ``2k`` and ``2k+1``
hold ``(dx, dy)`` for keypoint ``k`` in grid units.
"""
from __future__ import annotations

import torch
from torch import nn

from .data import grid_to_image


class OffsetHead(nn.Module):
    """Shared 1x1 regression of per-keypoint offsets on the stride-8 features."""

    def __init__(self, in_channels: int, num_keypoints: int):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.conv = nn.Conv2d(in_channels, 2 * num_keypoints, kernel_size=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.conv(features)


class DeconvUpsampler(nn.Module):
    """Heatmap upsampling by transposed convolutions, x2 per layer.

    Only used as the comparison baseline against offset refinement.
    """

    def __init__(self, num_keypoints: int, num_layers: int = 2):
        super().__init__()
        layers = []
        for n in range(num_layers):
            layers.append(nn.ConvTranspose2d(num_keypoints, num_keypoints, 4, stride=2, padding=1))
            if n < num_layers - 1:
                layers.append(nn.ReLU())
        self.body = nn.Sequential(*layers)
        self.factor = 2 ** num_layers

    def forward(self, heatmaps: torch.Tensor) -> torch.Tensor:
        return self.body(heatmaps)


def refine_peak(peak, k: int, offsets: torch.Tensor) -> tuple[float, float]:
    """``(r + dy, c + dx)`` for the peak ``(r, c)`` of keypoint ``k``."""
    r, c = int(peak[0]), int(peak[1])
    dx = float(offsets[2 * k, r, c].detach())
    dy = float(offsets[2 * k + 1, r, c].detach())
    return r + dy, c + dx


def refine_peaks(rows: torch.Tensor, cols: torch.Tensor, offsets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized refinement.

    ``rows``/``cols`` are ``(N, K)`` peak cells; ``offsets`` is the shared
    ``(2K, H, W)`` map or a per-instance ``(N, 2K, H, W)`` stack.
    """
    N, K = rows.shape
    kk = torch.arange(K).expand(N, K)
    if offsets.dim() == 3:
        dx = offsets[2 * kk, rows, cols]
        dy = offsets[2 * kk + 1, rows, cols]
    else:
        nn_ = torch.arange(N)[:, None].expand(N, K)
        dx = offsets[nn_, 2 * kk, rows, cols]
        dy = offsets[nn_, 2 * kk + 1, rows, cols]
    return rows.to(offsets.dtype) + dy, cols.to(offsets.dtype) + dx


def grid_rc_to_image_xy(r, c, stride: int = 8) -> tuple[float, float]:
    """Continuous grid ``(row, col)`` to image ``(x, y)``."""
    x, y = grid_to_image([c, r], stride)
    return float(x), float(y)
