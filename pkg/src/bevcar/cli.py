"""Command-line interface.

Subcommands::

    bevcar gen-data --out DIR --num N --seed S [--conditions day,rain,night]
    bevcar train    --config FILE [--deterministic] [--set KEY=VALUE ...]
    bevcar eval     --ckpt FILE --data DIR [--split FILE] [--ranges] [--conditions]
    bevcar predict  --ckpt FILE --data DIR --token T [--render out.png] [--error-map]
    bevcar bench    --ckpt FILE --reps R

Config files are JSON with the run-config schema (see ``config.py``); any
field can be overridden on the command line with ``--set section.key=value``.
The seed falls back to ``$BEVCAR_SEED`` when the config leaves it unset.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .checkpoint import load_model
from .config import RunConfig, apply_overrides, load_config
from .data import list_tokens, load_sample, load_split
from .errors import (CheckpointError, ConfigurationError, DatasetError,
                     GenerationError, TrainingError)
from .geometry import default_rig
from .heads import CLASS_ORDER
from .metrics import measure_runtime
from .model import batch_from_samples, build_geometry_cache
from .report import (render_bev, render_error_map, save_png, write_eval_report,
                     write_loss_curve)
from .synth import SceneParams, generate_dataset, generate_sample
from .train import check_dataset_grid, evaluate_model, predict_masks, run_training

_ERRORS = (ConfigurationError, DatasetError, GenerationError, CheckpointError,
           TrainingError)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    return apply_overrides(cfg, overrides)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    conditions = tuple(c.strip() for c in args.conditions.split(",") if c.strip())
    cfg = _load_run_config(args.config, args.set)
    grid = cfg.grid.build()
    rig = default_rig(cfg.data.image_height, cfg.data.image_width, cfg.data.cameras)
    params = SceneParams(max_vehicles=args.max_vehicles)
    tokens = generate_dataset(args.out, args.num, args.seed, grid=grid, rig=rig,
                              params=params, conditions=conditions,
                              sweeps=cfg.data.sweeps)
    _emit({"out": args.out, "num": len(tokens), "seed": args.seed,
           "conditions": list(conditions)})
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.set)
    result = run_training(cfg, deterministic=args.deterministic, progress=True)
    curve = write_loss_curve(result["log"], os.path.join(cfg.out_dir, "loss_curve.png"))
    _emit({"checkpoint": result["checkpoint"], "log": result["log"],
           "loss_curve": curve, "final_loss": result["last"].get("loss"),
           "overall_percent": {k: v for k, v in
                               result["eval"]["overall"]["percent"].items()
                               if v == v}})
    return 0


def _eval_tokens(data_dir: str, split_path: str | None):
    if split_path:
        split = load_split(split_path)
        return split.all_tokens(), split
    return list_tokens(data_dir), None


def cmd_eval(args) -> int:
    net, ckpt = load_model(args.ckpt)
    check_dataset_grid(ckpt.config, args.data)
    tokens, split = _eval_tokens(args.data, args.split)
    if not tokens:
        raise DatasetError(f"no samples to evaluate under {args.data}")
    samples = []
    for t in tokens:
        s = load_sample(args.data, t)
        if split is not None:
            stated = split.condition_of(t)
            if stated != s.condition:
                raise DatasetError(
                    f"split says {t!r} is {stated!r} but its metadata says "
                    f"{s.condition!r}")
        samples.append(s)
    cache = build_geometry_cache(net.grid, samples[0].rig)
    report = evaluate_model(net, cache, samples,
                            run_seed=ckpt.config.resolved_seed())
    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)),
                                       "eval")
    paths = write_eval_report(report, out_dir, include_conditions=args.conditions,
                              include_ranges=args.ranges)
    with open(paths["txt"]) as fh:
        print(fh.read(), end="")
    _emit({"samples": report["num_samples"], **paths})
    return 0


def cmd_predict(args) -> int:
    net, ckpt = load_model(args.ckpt)
    check_dataset_grid(ckpt.config, args.data)
    sample = load_sample(args.data, args.token)
    cache = build_geometry_cache(net.grid, sample.rig)
    probs, pred = predict_masks(net, cache, sample,
                                run_seed=ckpt.config.resolved_seed())
    record = {"token": sample.token, "condition": sample.condition,
              "predicted_cells": {c: int(pred[i].sum())
                                  for i, c in enumerate(CLASS_ORDER)}}
    if args.render:
        upscale = max(1, 512 // max(pred.shape[1], 1))
        if args.error_map:
            image = render_error_map(pred, sample.gt.stacked(), sample.gt.valid)
        else:
            image = render_bev(pred, valid=sample.gt.valid)
        record["render"] = save_png(image, args.render, upscale=upscale)
        record["mode"] = "error_map" if args.error_map else "masks"
    _emit(record)
    return 0


def cmd_bench(args) -> int:
    net, ckpt = load_model(args.ckpt)
    cfg = ckpt.config
    rig = default_rig(cfg.data.image_height, cfg.data.image_width, cfg.data.cameras)
    sample = generate_sample("bench", seed=cfg.resolved_seed(), grid=net.grid,
                             rig=rig, condition="day", sweeps=cfg.data.sweeps)
    cache = build_geometry_cache(net.grid, rig)
    images, voxels = batch_from_samples([sample], net, cfg.resolved_seed())

    def forward(_):
        with torch.no_grad():
            net(images, voxels, cache)

    result = measure_runtime(forward, None, repetitions=args.reps)
    record = {"ms": round(result.ms, 3), "fps": round(result.fps, 3),
              "reps": args.reps}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({**record, "samples_ms": [round(t, 3) for t in result.samples]},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        record["out"] = args.out
    _emit(record)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevcar",
        description="camera-radar BEV segmentation: data synthesis, training, "
                    "evaluation, prediction, benchmarking")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesise a dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--num", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--conditions", default="day,rain,night",
                   help="comma list of conditions, assigned round-robin")
    g.add_argument("--config", default=None,
                   help="run config supplying grid and image geometry")
    g.add_argument("--max-vehicles", type=int, default=4)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (e.g. grid.x_cells=100)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--deterministic", action="store_true",
                   help="force deterministic kernels (runs are seeded either way)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default=None, help="split file restricting tokens")
    e.add_argument("--ranges", action="store_true",
                   help="add the three distance-band rows to tables")
    e.add_argument("--conditions", action="store_true",
                   help="add day/rain/night rows to tables")
    e.add_argument("--out", default=None, help="report directory")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run one sample and optionally render it")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory holding the token")
    p.add_argument("--token", required=True)
    p.add_argument("--render", default=None, metavar="OUT.PNG")
    p.add_argument("--error-map", action="store_true",
                   help="render prediction/truth agreement instead of masks")
    p.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="median forward latency on a synthetic sample")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--reps", type=int, required=True)
    b.add_argument("--out", default=None, help="write timings to this JSON file")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
