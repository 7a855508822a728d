"""Dataset serialization: samples, splits, dataset metadata, prefetching.

On-disk layout (everything inspectable with standard tools):

    dataset/
      dataset.json                  grid / image-size / camera metadata
      split.json                    {"day": [tokens], "rain": [...], "night": [...]}
      <token>/
        cam_<name>.png              one 8-bit RGB PNG per camera
        radar.csv                   header x,y,z,vx,vy,rcs; one row per point
        calib.json                  list of {name, K, R, t, H, W}
        gt_vehicle.png              1-bit mask, rows = grid x, cols = grid y
        gt_map_<class>.png          1-bit mask per map class
        gt_valid.png                optional 1-bit validity mask (absent = all valid)
        meta.json                   token, condition, seed, sweep count

Masks store grid cell (i, j) at pixel (row i, col j).  Floats in text files
are written with 17 significant digits, so save -> load round-trips exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
import queue
import threading
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DatasetError
from .geometry import BevGrid, CameraRig, load_rig, save_rig
from .heads import MAP_CLASSES
from .metrics import ConditionSplit
from .radar import RadarPointCloud, load_radar_csv, save_radar_csv


@dataclass
class BevGroundTruth:
    """Boolean BEV rasters: vehicle (X, Y), maps (M, X, Y), valid (X, Y)."""

    vehicle: np.ndarray
    maps: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.vehicle = np.asarray(self.vehicle, dtype=bool)
        self.maps = np.asarray(self.maps, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.maps.shape != (len(MAP_CLASSES),) + self.vehicle.shape:
            raise ConfigurationError(
                f"expected {len(MAP_CLASSES)} map rasters of {self.vehicle.shape}, "
                f"got {self.maps.shape}")
        if self.valid.shape != self.vehicle.shape:
            raise ConfigurationError("valid mask shape mismatch")

    def stacked(self) -> np.ndarray:
        """(1 + M, X, Y) in canonical class order (vehicle first)."""
        return np.concatenate([self.vehicle[None], self.maps], axis=0)


@dataclass
class Sample:
    token: str
    images: np.ndarray              # (N, 3, H, W) uint8
    rig: CameraRig
    radar: RadarPointCloud
    gt: BevGroundTruth
    condition: str = "day"
    seed: int = 0

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ConfigurationError(f"images must be (N, 3, H, W) uint8, "
                                     f"got {self.images.shape}")
        if self.images.shape[0] != len(self.rig):
            raise ConfigurationError(
                f"{self.images.shape[0]} images for {len(self.rig)} cameras")


def _save_mask(mask: np.ndarray, path: str) -> None:
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, "L")
    img.point(lambda v: v > 127, mode="1").save(path)


def _load_mask(path: str) -> np.ndarray:
    return np.array(Image.open(path), dtype=bool)


def save_sample(sample: Sample, root: str) -> str:
    out = os.path.join(root, sample.token)
    os.makedirs(out, exist_ok=True)
    for n, cam in enumerate(sample.rig):
        Image.fromarray(sample.images[n].transpose(1, 2, 0), "RGB").save(
            os.path.join(out, f"cam_{cam.name}.png"))
    save_radar_csv(sample.radar, os.path.join(out, "radar.csv"))
    save_rig(sample.rig, os.path.join(out, "calib.json"))
    _save_mask(sample.gt.vehicle, os.path.join(out, "gt_vehicle.png"))
    for m, cls in enumerate(MAP_CLASSES):
        _save_mask(sample.gt.maps[m], os.path.join(out, f"gt_map_{cls}.png"))
    if not sample.gt.valid.all():
        _save_mask(sample.gt.valid, os.path.join(out, "gt_valid.png"))
    meta = {"token": sample.token, "condition": sample.condition,
            "seed": int(sample.seed), "sweep_count": int(sample.radar.sweep_count)}
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return out


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DatasetError(f"missing {os.path.basename(path)}: {path}")
    return path


def load_sample(root: str, token: str) -> Sample:
    d = os.path.join(root, token)
    if not os.path.isdir(d):
        raise DatasetError(f"no sample directory for token {token!r}: {d}")
    with open(_require(os.path.join(d, "meta.json"))) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"meta.json for {token!r} is not valid JSON: {exc}") from exc
    rig = load_rig(_require(os.path.join(d, "calib.json")))
    radar = load_radar_csv(_require(os.path.join(d, "radar.csv")),
                           sweep_count=int(meta.get("sweep_count", 5)))
    images = []
    for cam in rig:
        img = Image.open(_require(os.path.join(d, f"cam_{cam.name}.png")))
        arr = np.array(img.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{token}/cam_{cam.name}.png is {arr.shape[1]}x{arr.shape[0]}, "
                               f"calibration says {cam.width}x{cam.height}")
        images.append(arr.transpose(2, 0, 1))
    vehicle = _load_mask(_require(os.path.join(d, "gt_vehicle.png")))
    maps = np.stack([_load_mask(_require(os.path.join(d, f"gt_map_{cls}.png")))
                     for cls in MAP_CLASSES])
    valid_path = os.path.join(d, "gt_valid.png")
    valid = _load_mask(valid_path) if os.path.exists(valid_path) \
        else np.ones_like(vehicle, dtype=bool)
    return Sample(token=token, images=np.stack(images), rig=rig, radar=radar,
                  gt=BevGroundTruth(vehicle=vehicle, maps=maps, valid=valid),
                  condition=str(meta.get("condition", "day")),
                  seed=int(meta.get("seed", 0)))


def list_tokens(root: str) -> list[str]:
    if not os.path.isdir(root):
        raise DatasetError(f"dataset directory not found: {root}")
    toks = [t for t in sorted(os.listdir(root))
            if os.path.isfile(os.path.join(root, t, "meta.json"))]
    return toks


# ---------------------------------------------------------------------------
# Splits and dataset metadata
# ---------------------------------------------------------------------------

def save_split(split: ConditionSplit, path: str) -> None:
    with open(path, "w") as fh:
        json.dump({c: list(t) for c, t in split.tokens.items()}, fh, indent=2)
        fh.write("\n")


def load_split(path: str) -> ConditionSplit:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"split file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"split file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"split file {path} must map conditions to token lists")
    try:
        return ConditionSplit(tokens={c: tuple(v) for c, v in data.items()})
    except ConfigurationError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def save_dataset_info(root: str, grid: BevGrid, image_height: int, image_width: int,
                      cameras: int, seed: int, num: int) -> None:
    info = {"grid": dataclasses.asdict(grid), "image_height": image_height,
            "image_width": image_width, "cameras": cameras, "seed": seed, "num": num}
    with open(os.path.join(root, "dataset.json"), "w") as fh:
        json.dump(info, fh, indent=2)
        fh.write("\n")


def load_dataset_info(root: str) -> dict | None:
    path = os.path.join(root, "dataset.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Prefetching
# ---------------------------------------------------------------------------

def prefetch_samples(root: str, tokens, depth: int = 2):
    """Load samples on a worker thread through a bounded queue.

    Delivery order always matches `tokens` (the single worker feeds a FIFO
    queue), which is what the --deterministic-order flag promises; the flag
    additionally pins the token order upstream.
    """
    if depth < 1:
        raise ConfigurationError(f"prefetch depth must be >= 1, got {depth}")
    q: queue.Queue = queue.Queue(maxsize=depth)
    sentinel = object()
    failure: list[Exception] = []

    def worker():
        try:
            for t in tokens:
                q.put(load_sample(root, t))
        except Exception as exc:               # re-raised on the consumer side
            failure.append(exc)
        finally:
            q.put(sentinel)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is sentinel:
            if failure:
                raise failure[0]
            return
        yield item
