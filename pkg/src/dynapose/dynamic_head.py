"""Instance-conditioned keypoint heads built from generated filter vectors.

A controller emits one flat vector per location. The vector is cut into the
weights of a tiny per-pixel MLP (1x1 convolutions), which is then run over
the shared stride-8 features concatenated with a relative-coordinate map
centered on the generating location.

Maps are channel-first torch tensors: features ``(C, H, W)``, relative
coordinates ``(2, H, W)`` with channel 0 = dx and channel 1 = dy.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F_


@dataclass(frozen=True)
class FilterSchema:
    """Layer layout of a dynamic head: ``input -> layer_widths... -> output``."""

    input_channels: int
    layer_widths: tuple[int, ...]
    output_channels: int
    kernel_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kernel_size != 1:
            raise ValueError("only 1x1 dynamic kernels are supported")
        if min((self.input_channels, self.output_channels) + self.layer_widths) <= 0:
            raise ValueError("all channel counts must be positive")

    @classmethod
    def for_keypoints(cls, feat_channels: int = 32, depth: int = 3, width: int = 32,
                      num_keypoints: int = 17) -> "FilterSchema":
        """Head of ``depth`` layers over ``feat_channels`` + 2 relative-coordinate inputs."""
        return cls(feat_channels + 2, (width,) * (depth - 1), num_keypoints)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_channels,) + self.layer_widths + (self.output_channels,)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def layer_sizes(self) -> list[int]:
        return [i * o + o for i, o in self.layer_shapes]

    @property
    def total_weights(self) -> int:
        return sum(self.layer_sizes)

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels, "layer_widths": list(self.layer_widths),
                "output_channels": self.output_channels, "kernel_size": self.kernel_size}


@dataclass
class UnpackedHead:
    """Per-layer ``(weight, bias)``; weight is ``in x out`` (with optional leading batch dims)."""

    schema: FilterSchema
    layers: list[tuple[torch.Tensor, torch.Tensor]]

    def flatten(self) -> torch.Tensor:
        parts = []
        for w, b in self.layers:
            parts.append(w.reshape(*w.shape[:-2], -1))
            parts.append(b)
        return torch.cat(parts, dim=-1)


def unpack_filters(flat: torch.Tensor, schema: FilterSchema) -> UnpackedHead:
    """Split ``(..., total_weights)`` into layer weights and biases, layer-major."""
    if flat.shape[-1] != schema.total_weights:
        raise ValueError(f"filter vector length mismatch: expected {schema.total_weights}, "
                         f"got {flat.shape[-1]}")
    lead = flat.shape[:-1]
    layers = []
    pos = 0
    for n_in, n_out in schema.layer_shapes:
        w = flat[..., pos:pos + n_in * n_out].reshape(*lead, n_in, n_out)
        pos += n_in * n_out
        b = flat[..., pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return UnpackedHead(schema, layers)


def project_to_base_grid(rc, level_stride: int, base_stride: int = 8):
    """Location ``(r, c)`` on a stride-``level_stride`` map, expressed on the base grid.

    Cell centers coincide: ``s*c + s/2 == b*c' + b/2``.
    """
    ratio = level_stride / base_stride
    shift = (ratio - 1) / 2
    r, c = rc
    return r * ratio + shift, c * ratio + shift


def rel_coord_map(map_size: tuple[int, int], generator, level_stride: int = 8,
                  normalizer: float = 32.0, base_stride: int = 8, dtype=torch.float32) -> torch.Tensor:
    """``(2, H, W)`` map whose entry at ``(i, j)`` is ``((j - c)/norm, (i - r)/norm)``.

    ``generator`` is given on the ``level_stride`` grid and projected onto the
    base grid first.
    """
    r, c = project_to_base_grid(generator, level_stride, base_stride)
    H, W = map_size
    ii = torch.arange(H, dtype=dtype)[:, None].expand(H, W)
    jj = torch.arange(W, dtype=dtype)[None, :].expand(H, W)
    return torch.stack([(jj - c) / normalizer, (ii - r) / normalizer])


def rel_coord_maps(map_size: tuple[int, int], generators: torch.Tensor, normalizer: float,
                   dtype=torch.float32) -> torch.Tensor:
    """Batched variant: ``generators`` is ``(N, 2)`` base-grid ``(r, c)`` -> ``(N, 2, H, W)``."""
    H, W = map_size
    generators = generators.to(dtype)
    jj = torch.arange(W, dtype=dtype).view(1, 1, W)
    ii = torch.arange(H, dtype=dtype).view(1, H, 1)
    dx = (jj - generators[:, 1].view(-1, 1, 1)) / normalizer
    dy = (ii - generators[:, 0].view(-1, 1, 1)) / normalizer
    return torch.stack([dx.expand(-1, H, W), dy.expand(-1, H, W)], dim=1)


def apply_keypoint_head(features: torch.Tensor, relmap: torch.Tensor, head: UnpackedHead) -> torch.Tensor:
    """Run one head over ``features`` ``(C_F, H, W)``; returns pre-softmax ``(K, H, W)``."""
    x = torch.cat([features, relmap.to(features.dtype)], dim=0)
    C, H, W = x.shape
    if C != head.schema.input_channels:
        raise ValueError(f"head expects {head.schema.input_channels} input channels, got {C}")
    x = x.reshape(C, H * W).t()
    last = len(head.layers) - 1
    for n, (w, b) in enumerate(head.layers):
        x = x @ w + b
        if n < last:
            x = F_.relu(x)
    return x.t().reshape(-1, H, W)


def run_dynamic_heads(features: torch.Tensor, relmaps: torch.Tensor, flat: torch.Tensor,
                      schema: FilterSchema) -> torch.Tensor:
    """Grouped evaluation of ``N`` heads.

    ``features`` is shared ``(C, H, W)`` or per-head ``(N, C, H, W)``;
    ``relmaps`` is ``(N, 2, H, W)``; ``flat`` is ``(N, total_weights)``.
    Returns ``(N, K, H, W)``.
    """
    N = flat.shape[0]
    H, W = relmaps.shape[-2:]
    if N == 0:
        return flat.new_zeros((0, schema.output_channels, H, W))
    if features.dim() == 3:
        features = features.unsqueeze(0).expand(N, -1, -1, -1)
    x = torch.cat([features, relmaps.to(features.dtype)], dim=1)
    if x.shape[1] != schema.input_channels:
        raise ValueError(f"heads expect {schema.input_channels} input channels, got {x.shape[1]}")
    x = x.reshape(N, schema.input_channels, H * W).transpose(1, 2)      # N x HW x C
    head = unpack_filters(flat, schema)
    last = len(head.layers) - 1
    for n, (w, b) in enumerate(head.layers):
        x = torch.baddbmm(b.unsqueeze(1), x, w)
        if n < last:
            x = F_.relu(x)
    return x.transpose(1, 2).reshape(N, schema.output_channels, H, W)


def apply_heads_batched(features: torch.Tensor, relmaps, heads: list[UnpackedHead]) -> list[torch.Tensor]:
    """Evaluate many unpacked heads in one grouped computation."""
    if not heads:
        return []
    schema = heads[0].schema
    if any(h.schema != schema for h in heads):
        raise ValueError("apply_heads_batched requires all heads to share one schema")
    flat = torch.stack([h.flatten() for h in heads])
    rel = torch.stack(list(relmaps)) if not torch.is_tensor(relmaps) else relmaps
    out = run_dynamic_heads(features, rel, flat, schema)
    return list(out.unbind(0))
