"""Rendering and report files: BEV images, error maps, tables, figures.

Evaluation artifacts per run: ``metrics.json`` (full report, NaN -> null),
``metrics.csv`` (long-form delimited scores) and ``metrics.txt`` (aligned
table), plus matplotlib figures rendered to PNG next to them.  Prediction
renders are plain PIL images at native grid resolution.

Rendered BEV images put the forward direction at the top and the vehicle's
left on the image's left (rows run opposite to +x, columns opposite to +y).
"""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .errors import ConfigurationError
from .heads import CLASS_ORDER, MAP_CLASSES, NUM_CLASSES, VEHICLE_CLASS

CLASS_COLORS = {
    "vehicle": (255, 140, 0),
    "drivable_area": (90, 90, 100),
    "carpark_area": (140, 110, 170),
    "pedestrian_crossing": (235, 235, 225),
    "walkway": (110, 160, 95),
    "stop_line": (215, 180, 80),
    "road_divider": (230, 220, 60),
    "lane_divider": (200, 200, 200),
}
BACKGROUND_COLOR = (30, 32, 35)
INVALID_COLOR = (10, 10, 10)
NEUTRAL_COLOR = (128, 128, 128)       # error map: prediction matches truth
FALSE_POS_COLOR = (214, 64, 48)       # predicted but not true
FALSE_NEG_COLOR = (52, 94, 214)       # true but missed
BOTH_WRONG_COLOR = (168, 52, 168)     # fp on one class, fn on another

# painter order, bottom to top
_PAINT_ORDER = ("drivable_area", "carpark_area", "walkway", "pedestrian_crossing",
                "stop_line", "road_divider", "lane_divider", "vehicle")


def _grid_to_image(cells: np.ndarray) -> np.ndarray:
    """(X, Y, 3) cell colors -> image array with forward up, left on the left."""
    return cells[::-1, ::-1].copy()


def render_bev(masks: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Compose class masks into an RGB image.

    Args:
        masks: (NUM_CLASSES, X, Y) bool in CLASS_ORDER.
        valid: optional (X, Y) bool; invalid cells render near-black.
    Returns:
        (X, Y, 3) uint8.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3 or masks.shape[0] != NUM_CLASSES:
        raise ConfigurationError(
            f"expected ({NUM_CLASSES}, X, Y) masks, got {masks.shape}")
    cells = np.empty(masks.shape[1:] + (3,), dtype=np.uint8)
    cells[:] = BACKGROUND_COLOR
    for name in _PAINT_ORDER:
        m = masks[CLASS_ORDER.index(name)]
        cells[m] = CLASS_COLORS[name]
    if valid is not None:
        cells[~np.asarray(valid, dtype=bool)] = INVALID_COLOR
    return _grid_to_image(cells)


def render_error_map(pred: np.ndarray, gt: np.ndarray,
                     valid: np.ndarray | None = None) -> np.ndarray:
    """Agreement image over all classes at once.

    Neutral grey where every class channel agrees (so a perfect prediction is
    an entirely neutral image), red for false positives, blue for false
    negatives, purple where a cell has both kinds of error across channels.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ConfigurationError(f"pred {pred.shape} vs gt {gt.shape}")
    fp = (pred & ~gt).any(axis=0)
    fn = (~pred & gt).any(axis=0)
    cells = np.empty(pred.shape[1:] + (3,), dtype=np.uint8)
    cells[:] = NEUTRAL_COLOR
    cells[fp & ~fn] = FALSE_POS_COLOR
    cells[fn & ~fp] = FALSE_NEG_COLOR
    cells[fp & fn] = BOTH_WRONG_COLOR
    if valid is not None:
        cells[~np.asarray(valid, dtype=bool)] = NEUTRAL_COLOR
    return _grid_to_image(cells)


def save_png(image: np.ndarray, path: str, upscale: int = 1) -> str:
    arr = np.asarray(image, dtype=np.uint8)
    if upscale > 1:
        arr = np.kron(arr, np.ones((upscale, upscale, 1), dtype=np.uint8))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)
    return path


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _sanitize(node):
    """NaN -> None recursively so the JSON stays standard-conformant."""
    if isinstance(node, dict):
        return {k: _sanitize(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_sanitize(v) for v in node]
    if isinstance(node, float) and math.isnan(node):
        return None
    return node


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.1f}"


def _split_rows(report: dict, include_conditions: bool,
                include_ranges: bool) -> list[tuple[str, dict]]:
    rows = [("overall", report["overall"])]
    if include_conditions:
        rows += [(f"cond:{c}", s) for c, s in report.get("conditions", {}).items()]
    if include_ranges:
        rows += [(f"range:{r}", s) for r, s in report.get("ranges", {}).items()]
    return rows


def format_table(report: dict, include_conditions: bool = True,
                 include_ranges: bool = True) -> str:
    """Aligned text table: one row per split, IoU percentages per class."""
    columns = [VEHICLE_CLASS, *MAP_CLASSES, "map", "miou"]
    rows = _split_rows(report, include_conditions, include_ranges)
    header = ["split"] + columns
    body = [[name] + [_fmt(summary["percent"].get(c)) for c in columns]
            for name, summary in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(str(v).rjust(widths[i]) if i else str(v).ljust(widths[0])
                               for i, v in enumerate(row)))
    return "\n".join(lines) + "\n"


def write_eval_report(report: dict, out_dir: str, include_conditions: bool = True,
                      include_ranges: bool = True, figures: bool = True) -> dict:
    """Write metrics.{json,csv,txt} and figures; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["json"] = os.path.join(out_dir, "metrics.json")
    with open(paths["json"], "w") as fh:
        json.dump(_sanitize(report), fh, indent=2, sort_keys=True)
        fh.write("\n")

    paths["csv"] = os.path.join(out_dir, "metrics.csv")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "class", "iou_percent"])
        for name, summary in _split_rows(report, include_conditions, include_ranges):
            for c in [*CLASS_ORDER, "map", "miou"]:
                v = summary["percent"].get(c)
                writer.writerow([name, c, "" if v is None or v != v else v])

    paths["txt"] = os.path.join(out_dir, "metrics.txt")
    with open(paths["txt"], "w") as fh:
        fh.write(format_table(report, include_conditions, include_ranges))

    if figures:
        paths["fig_overall"] = figure_class_iou(report, os.path.join(out_dir, "iou_overall.png"))
        breakdown = figure_breakdown(report, os.path.join(out_dir, "iou_breakdown.png"),
                                     include_conditions, include_ranges)
        if breakdown:
            paths["fig_breakdown"] = breakdown
    return paths


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def figure_class_iou(report: dict, path: str) -> str:
    """Bar chart of overall per-class IoU (plus map / mIoU markers)."""
    percent = report["overall"]["percent"]
    names = list(CLASS_ORDER)
    values = [0.0 if percent.get(c) is None or percent.get(c) != percent.get(c)
              else percent[c] for c in names]
    colors = [tuple(v / 255 for v in CLASS_COLORS[c]) for c in names]
    fig, ax = plt.subplots(figsize=(7, 3.2), dpi=120)
    ax.bar(range(len(names)), values, color=colors, edgecolor="black", linewidth=0.4)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([n.replace("_", "\n") for n in names], fontsize=7)
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    for key, style in (("map", ":"), ("miou", "--")):
        v = percent.get(key)
        if v is not None and v == v:
            ax.axhline(v, linestyle=style, color="dimgray", linewidth=1)
            ax.text(len(names) - 0.4, v + 1, key, fontsize=7, color="dimgray")
    ax.set_title("per-class IoU")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def figure_breakdown(report: dict, path: str, include_conditions: bool = True,
                     include_ranges: bool = True) -> str | None:
    """Grouped bars: vehicle / map / mIoU per condition and per range band."""
    groups = []
    if include_conditions:
        groups += list(report.get("conditions", {}).items())
    if include_ranges:
        groups += list(report.get("ranges", {}).items())
    if not groups:
        return None
    keys = [VEHICLE_CLASS, "map", "miou"]
    fig, ax = plt.subplots(figsize=(1.4 + 1.3 * len(groups), 3.2), dpi=120)
    width = 0.26
    for k, key in enumerate(keys):
        vals = [0.0 if g[1]["percent"].get(key) is None
                or g[1]["percent"].get(key) != g[1]["percent"].get(key)
                else g[1]["percent"][key] for g in groups]
        ax.bar([i + (k - 1) * width for i in range(len(groups))], vals,
               width=width, label=key)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([g[0] for g in groups], fontsize=7, rotation=20)
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    ax.set_title("IoU by split")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def write_loss_curve(log_path: str, out_path: str) -> str | None:
    """Plot the training loss curve from a metrics.jsonl file."""
    steps, losses = [], []
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "loss" in rec and "step" in rec:
                steps.append(rec["step"])
                losses.append(rec["loss"])
    if not steps:
        return None
    fig, ax = plt.subplots(figsize=(5, 3), dpi=120)
    ax.plot(steps, losses, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
