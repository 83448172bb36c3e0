import statistics

import numpy as np
import pytest
import torch

from dynapose.bench import (ABLATION_COLUMNS, ablation_grid, bench_instance_scaling, controller_weights, flatness,
                            force_instances, plot_timing, read_timing_csv, write_timing_csv, TimingRow)
from dynapose.config import RunConfig, apply_overrides
from dynapose.inference import decode_outputs
from dynapose.model import build_model

TINY = {"model.backbone_widths": [8, 8, 8, 8], "model.fpn_channels": 8, "model.feat_channels": 8,
        "model.head_width": 8, "model.tower_depth": 1, "model.kpt_tower_depth": 1,
        "train.iterations": 3, "train.lr_decay_steps": [1, 2], "train.warmup_iters": 1,
        "data.num_train": 3, "data.num_val": 2, "data.image_size": [64, 64]}


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(apply_overrides(RunConfig(), TINY).model, 0).eval()


@pytest.mark.parametrize("n", [0, 1, 7, 20])
def test_force_instances_pins_detection_count(tiny_model, n):
    with torch.no_grad():
        out = tiny_model(torch.rand(1, 3, 128, 128))
        dets = decode_outputs(tiny_model, force_instances(out, n), 0, max_detections=50)
    assert len(dets) == n
    # the network outputs themselves are untouched
    assert out.dense.cls_logits[0].max() < 10.0


def test_force_instances_rejects_too_many(tiny_model):
    with torch.no_grad():
        out = tiny_model(torch.rand(1, 3, 64, 64))
    with pytest.raises(ValueError):
        force_instances(out, 20)


def test_single_count_single_row(tiny_model):
    rows = bench_instance_scaling(tiny_model, counts=[1], image_size=(64, 64), trials=5, warmup=1)
    assert len(rows) == 1 and rows[0].instance_count == 1 and rows[0].trials == 5
    assert rows[0].mean_ms > 0 and rows[0].e2e_mean_ms >= rows[0].mean_ms


def test_needs_five_trials(tiny_model):
    with pytest.raises(ValueError):
        bench_instance_scaling(tiny_model, counts=[1], trials=4)


def test_std_is_sample_standard_deviation(tiny_model, monkeypatch):
    import dynapose.bench as bench
    warmup, spans = 2, [0.004, 0.001, 0.002, 0.007, 0.003]
    reads = []
    for t, d in enumerate([0.5] * warmup + spans):
        base = 10.0 * t                      # t0, t1 (forward), t2, t3 (decode)
        reads += [base, base + 1.0, base + 2.0, base + 2.0 + d]
    clock = iter(reads)
    monkeypatch.setattr(bench.time, "perf_counter", lambda: next(clock))
    (row,) = bench_instance_scaling(tiny_model, counts=[1], image_size=(64, 64), trials=5, warmup=warmup)
    ms = [d * 1e3 for d in spans]
    assert row.mean_ms == pytest.approx(statistics.fmean(ms))
    assert row.std_ms == pytest.approx(statistics.stdev(ms))
    assert row.e2e_mean_ms == pytest.approx(1e3 + statistics.fmean(ms))


def test_flatness_and_csv_roundtrip(tmp_path):
    rows = [TimingRow(1, 5, 2.0, 0.1, (256, 256), 10.0, 0.5), TimingRow(20, 5, 3.0, 0.2, (256, 256), 12.0, 0.4),
            TimingRow(20, 5, 30.0, 1.0, (256, 256), 40.0, 2.0, "loop")]
    assert flatness(rows[:2]) == pytest.approx(1.5)
    assert flatness(rows[:2], "e2e_mean_ms") == pytest.approx(1.2)
    write_timing_csv(rows, tmp_path / "t.csv")
    assert read_timing_csv(tmp_path / "t.csv") == rows
    plot_timing(rows, tmp_path / "t.png")
    assert (tmp_path / "t.png").stat().st_size > 0


def test_width_axis_reports_schema_counts():
    base = RunConfig()
    counts = [controller_weights(apply_overrides(base, {"model.head_width": w})) for w in (16, 32, 64)]
    assert counts == [1121, 2737, 7505]


def test_single_value_axis_matches_base_run(tmp_path):
    from dynapose.bench import evaluate_model
    from dynapose.training import build_datasets, train
    base = apply_overrides(RunConfig(), TINY)
    (row,) = ablation_grid(base, "head_width", [8], out_dir=tmp_path)
    assert (tmp_path / "ablation_head_width.csv").exists()
    tr, va = build_datasets(base)
    ev = evaluate_model(train(base, tr).model, va, base)
    np.testing.assert_equal([row["ap"], row["mean_error_px"], row["num_detections"]],
                            [ev["ap"], ev["mean_error_px"], ev["num_detections"]])
    assert set(ABLATION_COLUMNS) <= set(row)


def test_unknown_axis():
    with pytest.raises(ValueError):
        ablation_grid(RunConfig(), "depthwise", [1])
