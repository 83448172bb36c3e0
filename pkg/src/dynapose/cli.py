"""``dynapose`` command line: generate, train, eval, infer, bench, ablate, plot.

Configuration precedence is defaults < ``--config`` file < ``--set key=value``.
Every command writes into its own run directory (``<runs>/<cmd>_<time>_<hash>``
unless ``--run-dir`` is given) and dumps the effective config there.
Failures print one line ``dynapose: error: <category>: <detail>`` to stderr
and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .data import (CocoFormatError, load_coco_keypoints, make_manifest, random_manifest, read_manifest,
                   save_scene_image, scenes_from_manifest, scenes_to_coco, write_manifest)
from .evaluation import OksParams, UndefinedMetricError, average_precision, mean_keypoint_error

log = logging.getLogger("dynapose")

METRIC_COLUMNS = ("ap", "ap50", "ap75", "mean_error_px", "num_detections", "num_gt")


class CommandError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


# --------------------------------------------------------------------------- helpers

def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CommandError("bad-override", f"expected KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def _resolve_config(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    cfg = load_config(args.config, overrides)
    src = f"file {args.config}" if args.config else "no file"
    print(f"config precedence: defaults < {src} < {len(overrides)} command-line override(s)")
    for k, v in overrides.items():
        print(f"  override {k} = {v}")
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(args.runs) / f"{args.command}_{stamp}_{cfg.digest()}"
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.json")
    print(f"run directory: {d}")
    return d


def _load_model(path):
    from .model import load_checkpoint
    if path is None:
        raise CommandError("checkpoint-not-found", "no --checkpoint given")
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CommandError("checkpoint-not-found", str(exc)) from exc
    model.eval()
    return model


def _load_scenes(path, cfg: RunConfig, split: str):
    """Scenes from a manifest or COCO document; the config's split when ``path`` is None."""
    if path is None:
        from .training import build_datasets
        train_scenes, val_scenes = build_datasets(cfg)
        return train_scenes if split == "train" else val_scenes
    path = Path(path)
    if not path.exists():
        raise CommandError("file-not-found", f"dataset not found: {path}")
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "scenes" in doc:
        return scenes_from_manifest(read_manifest(path))
    return load_coco_keypoints(path, missing="fail")


def _predict(model, scenes, cfg: RunConfig, batch_size: int = 8):
    from .inference import infer
    from .training import images_to_tensor
    ec = cfg.eval
    dets = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        dets.extend(infer(model, images_to_tensor(chunk), score_threshold=ec.score_threshold,
                          pre_nms_topk=ec.pre_nms_topk, max_detections=ec.max_detections, nms_iou=ec.nms_iou))
    return dets


def _read_predictions(path, scenes):
    path = Path(path)
    if not path.exists():
        raise CommandError("file-not-found", f"predictions not found: {path}")
    entries = json.loads(path.read_text())
    by_id = {s.image_id: [] for s in scenes}
    for e in entries:
        if e["image_id"] not in by_id:
            raise CommandError("invalid-input", f"prediction for unknown image id {e['image_id']}")
        by_id[e["image_id"]].append((float(e["score"]), np.asarray(e["keypoints"], dtype=np.float64).reshape(-1, 3)))
    return [by_id[s.image_id] for s in scenes]


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------- commands

def cmd_generate(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg)
    d = cfg.data
    size = tuple(args.size) if args.size else d.image_size
    if args.counts:
        counts = [int(c) for c in args.counts]
        seeds = [args.seed + i for i in range(len(counts))]
        manifest = make_manifest(args.split, seeds, counts, size, d.allow_overlap)
    else:
        lo = d.min_instances if args.min_instances is None else args.min_instances
        hi = d.max_instances if args.max_instances is None else args.max_instances
        manifest = random_manifest(args.split, args.num, args.seed, lo, hi, size, d.allow_overlap)
    write_manifest(manifest, out / "manifest.json")
    print(f"wrote manifest with {len(manifest['scenes'])} scenes")
    if args.images:
        scenes = scenes_from_manifest(manifest)
        (out / "images").mkdir(exist_ok=True)
        for s in scenes:
            save_scene_image(s, out / "images" / s.file_name)
        (out / "images" / "annotations.json").write_text(json.dumps(scenes_to_coco(scenes)))
        print(f"wrote {len(scenes)} images and COCO annotations")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import train
    scenes = _load_scenes(args.data, cfg, "train")
    out = _run_dir(args, cfg)
    res = train(cfg, scenes, out, progress=True)
    last = res.rows[-1] if res.rows else {}
    print(f"trained {len(res.rows)} iterations in {res.seconds:.1f}s; final loss {last.get('l_total', float('nan')):.4f}")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    scenes = _load_scenes(args.data, cfg, "val")
    if args.predictions:
        dets = _read_predictions(args.predictions, scenes)
    else:
        dets = _predict(_load_model(args.checkpoint), scenes, cfg)
    out = _run_dir(args, cfg)
    params = OksParams.coco() if args.coco_sigmas else OksParams.uniform(cfg.model.num_keypoints, cfg.eval.oks_kappa)
    gts = [s.annotations for s in scenes]
    ap = average_precision(dets, gts, params)
    row = {"ap": ap.ap, "ap50": ap.ap50, "ap75": ap.ap75, "mean_error_px": mean_keypoint_error(dets, gts, params),
           "num_detections": ap.num_detections, "num_gt": ap.num_gt}
    _write_rows(out / "metrics.csv", METRIC_COLUMNS, [row])
    (out / "metrics.json").write_text(json.dumps({**row, "per_threshold": ap.per_threshold}, indent=2) + "\n")
    print(f"AP {ap.ap:.4f}  AP50 {ap.ap50:.4f}  AP75 {ap.ap75:.4f}  mean error {row['mean_error_px']:.2f}px "
          f"({ap.num_detections} detections, {ap.num_gt} people)")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    from .inference import to_coco_results
    model = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data, cfg, "val")
    dets = _predict(model, scenes, cfg)
    out = _run_dir(args, cfg)
    results = [r for s, d in zip(scenes, dets) for r in to_coco_results(d, s.image_id)]
    (out / "predictions.json").write_text(json.dumps(results))
    print(f"wrote {len(results)} detections for {len(scenes)} images to {out / 'predictions.json'}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import bench_instance_scaling, flatness, plot_timing, write_timing_csv
    from .model import build_model
    ec = cfg.eval
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        log.warning("no --checkpoint given; timing a freshly initialized model")
        model = build_model(cfg.model, cfg.train.seed)
    out = _run_dir(args, cfg)
    if args.threads:
        torch.set_num_threads(args.threads)
    rows = []
    for batched in ([True, False] if args.loop else [True]):
        part = bench_instance_scaling(model, ec.bench_counts, ec.bench_image_size, ec.bench_trials,
                                      ec.bench_warmup, batched=batched)
        rows.extend(part)
        print(f"{part[0].path}: flatness {flatness(part):.3f} (decode), "
              f"{flatness(part, 'e2e_mean_ms'):.3f} (forward + decode)")
        for r in part:
            print(f"  {r.instance_count:3d} instances  decode {r.mean_ms:7.2f} +- {r.std_ms:5.2f} ms  "
                  f"end-to-end {r.e2e_mean_ms:7.2f} +- {r.e2e_std_ms:5.2f} ms")
    write_timing_csv(rows, out / "timing.csv")
    plot_timing(rows, out / "timing.png")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .bench import ABLATION_COLUMNS, ablation_grid
    out = _run_dir(args, cfg)
    rows = ablation_grid(cfg, args.axis, args.values, seeds=args.seeds, out_dir=out, progress=False)
    print("  ".join(ABLATION_COLUMNS))
    for r in rows:
        print("  ".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in ABLATION_COLUMNS))
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .bench import plot_timing, read_timing_csv
    from .data import COCO_SKELETON

    out = _run_dir(args, cfg)
    made = 0
    if args.timing:
        plot_timing(read_timing_csv(args.timing), out / "timing.png")
        made += 1
    if args.train_log:
        with open(args.train_log) as fh:
            rows = list(csv.DictReader(fh))
        it = [int(r["iteration"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for col in ("l_total", "l_fcos_cls", "l_heatmap", "l_reg"):
            ax.plot(it, [float(r[col]) for r in rows], label=col, lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=120)
        plt.close(fig)
        made += 1
    if args.predictions:
        scenes = _load_scenes(args.data, cfg, "val")[:args.max_images]
        dets = _read_predictions(args.predictions, scenes) if scenes else []
        for s, d in zip(scenes, dets):
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(np.clip(s.image, 0, 1))
            for score, kp in d:
                if score < args.min_score:
                    continue
                for a, b in COCO_SKELETON:
                    ax.plot(kp[[a, b], 0], kp[[a, b], 1], "-", color="white", lw=1)
                ax.scatter(kp[:, 0], kp[:, 1], s=6, c="yellow")
            ax.set_axis_off()
            fig.tight_layout()
            fig.savefig(out / f"pred_{s.image_id}.png", dpi=100)
            plt.close(fig)
            made += 1
    if not made:
        raise CommandError("invalid-input", "nothing to plot: pass --timing, --train-log or --predictions")
    print(f"wrote {made} figure(s)")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--set", "-s", action="append", metavar="KEY=VALUE",
                        help="override a config value by dotted key, e.g. model.head_width=16 (repeatable)")
    common.add_argument("--runs", default="runs", help="parent directory for run directories")
    common.add_argument("--run-dir", help="exact output directory (overrides --runs naming)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="dynapose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset manifest")
    g.add_argument("--num", type=int, default=20, help="number of scenes")
    g.add_argument("--seed", type=int, default=0, help="first scene seed")
    g.add_argument("--counts", nargs="*", help="explicit people per scene (overrides --num)")
    g.add_argument("--min-instances", type=int)
    g.add_argument("--max-instances", type=int)
    g.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--split", default="train")
    g.add_argument("--images", action="store_true", help="also render PNGs and COCO annotations")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="manifest or COCO annotation file (default: config train split)")

    e = sub.add_parser("eval", parents=[common], help="OKS AP of a checkpoint or a predictions file")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="COCO-format keypoint results JSON")
    e.add_argument("--data", help="manifest or COCO annotation file (default: config val split)")
    e.add_argument("--coco-sigmas", action="store_true", help="use COCO per-keypoint falloffs")

    i = sub.add_parser("infer", parents=[common], help="write COCO-format predictions")
    i.add_argument("--checkpoint")
    i.add_argument("--data")

    b = sub.add_parser("bench", parents=[common], help="decode time versus number of people")
    b.add_argument("--checkpoint")
    b.add_argument("--loop", action="store_true", help="also time the per-instance loop path")
    b.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 keeps the default)")

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate along one axis")
    a.add_argument("--axis", required=True,
                   choices=["input_channels", "head_depth", "head_width", "refinement_mode", "refinement_sharing"])
    a.add_argument("--values", nargs="+", required=True)
    a.add_argument("--seeds", nargs="+", type=int, default=[0])

    pl = sub.add_parser("plot", parents=[common], help="figures from CSVs or predictions")
    pl.add_argument("--timing", help="timing CSV from bench")
    pl.add_argument("--train-log", help="train_log.csv from train")
    pl.add_argument("--predictions", help="predictions JSON from infer")
    pl.add_argument("--data")
    pl.add_argument("--max-images", type=int, default=8)
    pl.add_argument("--min-score", type=float, default=0.2)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "bench": cmd_bench, "ablate": cmd_ablate, "plot": cmd_plot}


def _category(exc: BaseException) -> str:
    from .training import NonFiniteLossError
    if isinstance(exc, CommandError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config-invalid"
    if isinstance(exc, CocoFormatError):
        return "coco-format"
    if isinstance(exc, NonFiniteLossError):
        return "nonfinite-loss"
    if isinstance(exc, UndefinedMetricError):
        return "metric-undefined"
    if isinstance(exc, FileNotFoundError):
        return "file-not-found"
    if isinstance(exc, (ValueError, json.JSONDecodeError)):
        return "invalid-input"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:          # noqa: BLE001 - every failure becomes one categorized line
        if args.verbose:
            log.exception("command failed")
        detail = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dynapose: error: {_category(exc)}: {detail}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
