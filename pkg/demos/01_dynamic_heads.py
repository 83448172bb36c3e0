"""Per-instance keypoint heads built from a flat weight vector.

Shows how many weights the controller must emit for a few head shapes, how a
flat vector becomes a tiny 1x1-conv network, and that evaluating many heads in
one batched call gives the same heatmaps as looping over instances.
"""
import torch

from dynapose.dynamic_head import (FilterSchema, apply_keypoint_head, rel_coord_maps, run_dynamic_heads,
                                   unpack_filters)

print("controller width for 17 keypoints, 32 feature channels:")
for depth in (2, 3, 4):
    for width in (16, 32, 64):
        s = FilterSchema.for_keypoints(32, depth, width, 17)
        print(f"  depth {depth} width {width:2d}: {s.total_weights:5d} weights, layers {s.layer_shapes}")

schema = FilterSchema.for_keypoints(32, 3, 32, 17)
head = unpack_filters(torch.randn(schema.total_weights), schema)
print("\nunpacked default head (weight, bias) shapes:", [(tuple(w.shape), tuple(b.shape)) for w, b in head.layers])

# five instances whose filters were generated at different grid locations
g = torch.Generator().manual_seed(0)
features = torch.randn(32, 16, 16, generator=g)
generators = torch.tensor([[2.0, 3.0], [8.0, 8.0], [12.0, 1.0], [5.0, 14.0], [15.0, 15.0]])
relmaps = rel_coord_maps((16, 16), generators, 32.0)
flat = torch.randn(5, schema.total_weights, generator=g) * 0.2

batched = run_dynamic_heads(features, relmaps, flat, schema)
looped = torch.stack([apply_keypoint_head(features, relmaps[i], unpack_filters(flat[i], schema))
                      for i in range(5)])
print(f"\nheatmaps {tuple(batched.shape)}; batched vs looped max difference "
      f"{float((batched - looped).abs().max()):.2e}")
