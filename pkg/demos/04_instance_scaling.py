"""Decode time as the number of people grows.

The batched path evaluates all instance heads in one matrix product; the loop
path runs them one by one. Both are timed on the same network outputs with a
pinned number of confident locations.
"""
from dynapose.bench import bench_instance_scaling, flatness
from dynapose.config import RunConfig
from dynapose.model import build_model

model = build_model(RunConfig().model, seed=0)
for batched in (True, False):
    rows = bench_instance_scaling(model, counts=(1, 5, 10, 20), image_size=(256, 256), trials=10, warmup=3,
                                  batched=batched)
    print("batched" if batched else "loop")
    for r in rows:
        print(f"  {r.instance_count:2d} people: decode {r.mean_ms:6.2f} +- {r.std_ms:4.2f} ms, "
              f"with forward pass {r.e2e_mean_ms:6.2f} ms")
    print(f"  max/min decode time {flatness(rows):.2f}, with forward pass {flatness(rows, 'e2e_mean_ms'):.2f}")
