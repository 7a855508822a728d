"""Training, evaluation and prediction drivers.

The training loop is deterministic given (config, seed): parameter init draws
from the globally seeded torch rng, batch order from a dedicated numpy rng,
and radar voxel capacity sampling from per-sample seeds.  Log lines carry no
timestamps, so two runs with the same seed write byte-identical logs, and
checkpoints of equal state are byte-identical archives.

A non-finite loss aborts immediately with the offending batch tokens, rather
than silently poisoning later steps.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import RunConfig, save_config
from .data import Sample, list_tokens, load_dataset_info, prefetch_samples
from .errors import ConfigurationError, DatasetError, TrainingError
from .heads import CLASS_ORDER, LossConfig, bce_loss, focal_loss, total_loss
from .metrics import (CONDITIONS, DEFAULT_RANGE_BANDS, IoUAccumulator, range_masks,
                      summarize)
from .model import BevCarNet, GeometryCache, batch_from_samples, build_geometry_cache


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    """Seed torch globally; return the numpy rng that drives batch order."""
    torch.manual_seed(seed)
    if deterministic:
        # single-threaded CPU execution is already serial and repeatable; this
        # guards against any op with a known nondeterministic implementation
        torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(np.random.SeedSequence([seed, 11]))


def check_dataset_grid(config: RunConfig, data_dir: str) -> None:
    """Refuse to train/eval against a dataset built for a different grid."""
    info = load_dataset_info(data_dir)
    if info is None:
        return
    want = dataclasses.asdict(config.grid.build())
    have = info.get("grid")
    if have is not None and {k: have.get(k) for k in want} != want:
        raise ConfigurationError(
            f"dataset at {data_dir} was generated for grid {have}, but the "
            f"config requests {want}")


def load_samples(data_dir: str, tokens: list[str] | None = None,
                 prefetch: int = 2) -> dict[str, Sample]:
    tokens = tokens if tokens is not None else list_tokens(data_dir)
    if not tokens:
        raise DatasetError(f"no samples found under {data_dir}")
    out: dict[str, Sample] = {}
    for sample in prefetch_samples(data_dir, tokens, depth=max(1, prefetch)):
        out[sample.token] = sample
    return out


def _check_shared_rig(samples: dict[str, Sample]) -> None:
    first = next(iter(samples.values()))
    for s in samples.values():
        if s.rig.to_json() != first.rig.to_json():
            raise DatasetError(
                f"samples {first.token!r} and {s.token!r} carry different camera "
                f"calibrations; one geometry cache cannot serve both")


def batch_order(tokens: list[str], batch_size: int, rng: np.random.Generator,
                deterministic_order: bool):
    """Endless stream of token batches; one shuffle per epoch unless pinned."""
    while True:
        epoch = list(tokens)
        if not deterministic_order:
            rng.shuffle(epoch)
        for i in range(0, len(epoch), batch_size):
            yield epoch[i:i + batch_size]


def compute_loss(logits: torch.Tensor, samples: list[Sample],
                 loss_cfg: LossConfig) -> dict[str, torch.Tensor]:
    """Vehicle BCE + map focal loss over one batch, masked by validity."""
    target = torch.from_numpy(np.stack([s.gt.stacked() for s in samples]))
    valid = torch.from_numpy(np.stack([s.gt.valid for s in samples]))
    bce = bce_loss(logits[:, 0], target[:, 0].to(logits.dtype), valid)
    focal = focal_loss(logits[:, 1:], target[:, 1:], valid,
                       alpha=loss_cfg.alpha, gamma=loss_cfg.gamma)
    return {"bce": bce, "focal": focal,
            "total": total_loss(bce, focal, loss_cfg)}


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 towards 0 at total_steps."""
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / max(total_steps, 1)))


class JsonlLogger:
    """Append-only JSONL writer with sorted keys and no timestamps."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_training(config: RunConfig, deterministic: bool = False,
                 progress: bool = False) -> dict:
    """Full training run: returns a summary with checkpoint and log paths."""
    seed = config.resolved_seed()
    rng = seed_everything(seed, deterministic)
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))

    check_dataset_grid(config, config.data.path)
    samples = load_samples(config.data.path, prefetch=config.data.prefetch)
    _check_shared_rig(samples)
    tokens = sorted(samples)
    val_samples = samples
    if config.data.val_path:
        check_dataset_grid(config, config.data.val_path)
        val_samples = load_samples(config.data.val_path,
                                   prefetch=config.data.prefetch)

    net = BevCarNet(config)
    rig = next(iter(samples.values())).rig
    cache = build_geometry_cache(net.grid, rig)
    params = [p for p in net.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.optim.lr,
                                 weight_decay=config.optim.weight_decay)
    logger = JsonlLogger(os.path.join(out_dir, "metrics.jsonl"))
    logger.write({"event": "start", "seed": seed, "num_samples": len(tokens),
                  "parameters": net.parameter_count()})

    batches = batch_order(tokens, config.optim.batch_size, rng,
                          config.data.deterministic_order)
    last = {}
    net.train()
    for step in range(1, config.optim.steps + 1):
        if config.optim.cosine_decay:
            lr = cosine_lr(config.optim.lr, step - 1, config.optim.steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
        else:
            lr = config.optim.lr
        batch_tokens = next(batches)
        batch = [samples[t] for t in batch_tokens]
        images, voxels = batch_from_samples(batch, net, seed)
        logits = net(images, voxels, cache)
        losses = compute_loss(logits, batch, config.loss.build())
        loss = losses["total"]
        if not torch.isfinite(loss):
            logger.close()
            raise TrainingError(
                f"non-finite loss {loss.item()!r} at step {step} on batch "
                f"{batch_tokens}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, config.optim.grad_clip)
        optimizer.step()

        last = {"step": step, "loss": round(loss.item(), 8),
                "bce": round(losses["bce"].item(), 8),
                "focal": round(losses["focal"].item(), 8),
                "lr": round(lr, 10)}
        if step == 1 or step == config.optim.steps or step % config.log_every == 0:
            logger.write(last)
            if progress:
                print(json.dumps(last, sort_keys=True), flush=True)
        if config.eval_every > 0 and step % config.eval_every == 0 \
                and step != config.optim.steps:
            net.eval()
            report = evaluate_model(net, cache, list(val_samples.values()),
                                    run_seed=seed)
            net.train()
            logger.write({"step": step, "eval": _scalar_eval(report)})

    net.eval()
    final_eval = evaluate_model(net, cache, list(val_samples.values()), run_seed=seed)
    logger.write({"step": config.optim.steps, "eval": _scalar_eval(final_eval)})
    ckpt_path = os.path.join(out_dir, "checkpoint.zip")
    save_checkpoint(ckpt_path, net.state_dict(), config, config.optim.steps,
                    extra={"final_eval": _scalar_eval(final_eval)})
    logger.write({"event": "finish", "checkpoint": "checkpoint.zip"})
    logger.close()
    return {"checkpoint": ckpt_path, "log": logger.path, "last": last,
            "eval": final_eval, "net": net, "cache": cache}


def _scalar_eval(report: dict) -> dict:
    """Compact eval scalars for log lines (percent table of the overall split)."""
    return {k: (None if v != v else v)
            for k, v in report["overall"]["percent"].items()}


# ---------------------------------------------------------------------------
# Evaluation / prediction
# ---------------------------------------------------------------------------

def predict_logits(net: BevCarNet, cache: GeometryCache, sample: Sample,
                   run_seed: int = 0) -> torch.Tensor:
    """(NUM_CLASSES, X, Y) logits for one sample, no grad."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            images, voxels = batch_from_samples([sample], net, run_seed)
            return net(images, voxels, cache)[0]
    finally:
        net.train(was_training)


def predict_masks(net: BevCarNet, cache: GeometryCache, sample: Sample,
                  run_seed: int = 0, threshold: float = 0.5):
    """Per-class probabilities and thresholded masks, both (C, X, Y) numpy."""
    logits = predict_logits(net, cache, sample, run_seed)
    probs = torch.sigmoid(logits).numpy()
    return probs, probs >= threshold


def evaluate_model(net: BevCarNet, cache: GeometryCache, samples: list[Sample],
                   bands: tuple[tuple[float, float], ...] = DEFAULT_RANGE_BANDS,
                   run_seed: int = 0, threshold: float = 0.5) -> dict:
    """IoU report over samples: overall, per condition, per range band.

    All three breakdowns share the per-sample forward pass; the integer
    accumulators make the overall numbers exactly the merge of the per
    condition ones.
    """
    if not samples:
        raise ConfigurationError("cannot evaluate over zero samples")
    overall = IoUAccumulator()
    by_condition = {c: IoUAccumulator() for c in CONDITIONS}
    by_band = [IoUAccumulator() for _ in bands]
    masks = range_masks(net.grid, bands)
    condition_counts = {c: 0 for c in CONDITIONS}
    for sample in samples:
        if sample.condition not in by_condition:
            raise ConfigurationError(
                f"sample {sample.token!r} has unknown condition {sample.condition!r}")
        _, pred = predict_masks(net, cache, sample, run_seed, threshold)
        gt = sample.gt.stacked()
        valid = sample.gt.valid
        condition_counts[sample.condition] += 1
        for ci, cname in enumerate(CLASS_ORDER):
            overall.update(cname, pred[ci], gt[ci], region=valid)
            by_condition[sample.condition].update(cname, pred[ci], gt[ci], region=valid)
            for bi in range(len(bands)):
                by_band[bi].update(cname, pred[ci], gt[ci], region=valid & masks[bi])
    return {
        "num_samples": len(samples),
        "condition_counts": condition_counts,
        "overall": summarize(overall),
        "conditions": {c: summarize(by_condition[c]) for c in CONDITIONS
                       if condition_counts[c] > 0},
        "ranges": {f"{lo:g}-{hi:g}m": summarize(by_band[i])
                   for i, (lo, hi) in enumerate(bands)},
    }
