"""Segmentation head and training losses.

The head emits M + 1 = 8 channels of independent logits over the BEV plane:
channel 0 is the vehicle class, channels 1..M the map classes in the fixed
order below.  Classes are not mutually exclusive (a crossing lies on drivable
area), so evaluation thresholds each channel's sigmoid at 0.5 independently.

Losses: plain binary cross-entropy for the vehicle channel and an
alpha-balanced focal loss summed over the map channels, each averaged over
the cells marked valid.  Both operate in logit space for numerical stability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

# Canonical channel order; everything (GT rasters, logits, reports) uses it.
VEHICLE_CLASS = "vehicle"
MAP_CLASSES = (
    "drivable_area",
    "carpark_area",
    "pedestrian_crossing",
    "walkway",
    "stop_line",
    "road_divider",
    "lane_divider",
)
CLASS_ORDER = (VEHICLE_CLASS,) + MAP_CLASSES
NUM_CLASSES = len(CLASS_ORDER)


def class_channel(name: str) -> int:
    try:
        return CLASS_ORDER.index(name)
    except ValueError:
        raise ConfigurationError(f"unknown class {name!r}; known: {CLASS_ORDER}") from None


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25       # focal weight on positive cells
    gamma: float = 3.0        # focal focusing exponent
    w_bce: float = 1.0        # weight of the vehicle BCE term
    w_focal: float = 1.0      # weight of the map focal term

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.w_bce < 0.0 or self.w_focal < 0.0:
            raise ConfigurationError("loss weights must be non-negative")


class SegmentationHead(nn.Module):
    """Two 3x3 conv + ReLU stages and a 1x1 projection to per-class logits."""

    def __init__(self, in_width: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_width, in_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_width, in_width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_width, num_classes, 1),
        )
        self.num_classes = num_classes

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        """(B, F, X, Y) -> (B, num_classes, X, Y) logits."""
        return self.net(bev)


def _masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    count = valid.sum()
    if count == 0:
        warnings.warn("loss computed over zero valid cells; returning 0", stacklevel=3)
        return values.sum() * 0.0
    return (values * valid.to(values.dtype)).sum() / count.to(values.dtype)


def bce_loss(logits: torch.Tensor, target: torch.Tensor,
             valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over valid cells for one channel.

    Args:
        logits: (..., X, Y) raw scores.
        target: same shape, bool or {0,1}.
        valid:  same shape bool mask; None means all valid.
    """
    if logits.shape != target.shape:
        raise ConfigurationError(f"logits {tuple(logits.shape)} vs target "
                                 f"{tuple(target.shape)}")
    if valid is None:
        valid = torch.ones_like(logits, dtype=torch.bool)
    elementwise = F.binary_cross_entropy_with_logits(
        logits, target.to(logits.dtype), reduction="none")
    return _masked_mean(elementwise, valid)


def focal_loss(logits: torch.Tensor, target: torch.Tensor,
               valid: torch.Tensor | None = None,
               alpha: float = 0.25, gamma: float = 3.0) -> torch.Tensor:
    """Alpha-balanced focal loss summed over class channels.

    Per cell and class:  -alpha_t * (1 - p_t)^gamma * log(p_t)  with
    p_t = p for positives and 1 - p otherwise, alpha_t likewise.  Each class
    channel is averaged over valid cells, then channels are summed, so with
    gamma = 0 and alpha = 0.5 the result is exactly half the sum of the
    per-class BCE means.

    Args:
        logits: (B, C, X, Y) or (C, X, Y).
        target: same shape, bool or {0,1}.
        valid:  (B, X, Y) / (X, Y) bool mask shared across channels.
    """
    if logits.shape != target.shape:
        raise ConfigurationError(f"logits {tuple(logits.shape)} vs target "
                                 f"{tuple(target.shape)}")
    squeeze = logits.ndim == 3
    if squeeze:
        logits, target = logits[None], target[None]
        valid = valid[None] if valid is not None else None
    B, C = logits.shape[:2]
    if valid is None:
        valid = torch.ones_like(logits[:, 0], dtype=torch.bool)
    y = target.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    p_t = torch.where(target.bool(), p, 1.0 - p)
    alpha_t = torch.where(target.bool(),
                          torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    elementwise = alpha_t * (1.0 - p_t).pow(gamma) * ce
    total = logits.sum() * 0.0
    for c in range(C):
        total = total + _masked_mean(elementwise[:, c], valid)
    return total


def total_loss(bce: torch.Tensor, focal: torch.Tensor,
               config: LossConfig) -> torch.Tensor:
    """Weighted sum of the two branch losses."""
    return config.w_bce * bce + config.w_focal * focal
