"""Image backbone producing multi-scale feature pyramids.

The downstream attention consumes four maps at strides 4, 8, 16 and 32, all
with the same channel width F.  Backbones are pluggable through a registry so
a different trunk can be swapped in without touching the lifting code; the
default is a compact residual CNN.

Normalisation is GroupNorm rather than BatchNorm on purpose: cameras are
stacked along the batch axis, and batch statistics would leak content between
cameras, breaking the guarantee that each camera's pyramid depends only on
its own image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Four feature maps for one camera at strides 4/8/16/32, each (F, h, w)."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != len(PYRAMID_STRIDES):
            raise ConfigurationError(f"pyramid needs {len(PYRAMID_STRIDES)} levels")

    @property
    def feature_width(self) -> int:
        return self.levels[0].shape[-3]


def _gn(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _gn(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class _Down(nn.Module):
    """3x3 stride-2 conv + GN + ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm = _gn(cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualBackbone(nn.Module):
    """Compact residual trunk emitting a 4-level pyramid at width F.

    Expects images as float tensors in [0, 1] with spatial size divisible
    by 32.  The stride-4 level is kept deliberately thin (no residual block)
    since it dominates the compute at full resolution.
    """

    def __init__(self, feature_width: int = 64):
        super().__init__()
        if feature_width < 8:
            raise ConfigurationError("feature_width must be at least 8")
        F = feature_width
        c = (F // 2, 3 * F // 4, F, 3 * F // 2, 2 * F)   # stem, s4, s8, s16, s32
        self.stem = _Down(3, c[0])
        self.down1 = _Down(c[0], c[1])
        self.down2 = _Down(c[1], c[2])
        self.block2 = ResidualBlock(c[2])
        self.down3 = _Down(c[2], c[3])
        self.block3 = ResidualBlock(c[3])
        self.down4 = _Down(c[3], c[4])
        self.block4 = ResidualBlock(c[4])
        self.lateral1 = nn.Conv2d(c[1], F, 1)
        self.lateral2 = nn.Identity()
        self.lateral3 = nn.Conv2d(c[3], F, 1)
        self.lateral4 = nn.Conv2d(c[4], F, 1)
        self.feature_width = F

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """(B, 3, H, W) in [0, 1] -> [maps at strides 4, 8, 16, 32], each (B, F, ...)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % 32 or W % 32:
            raise ConfigurationError(f"image size {H}x{W} not divisible by 32")
        x1 = self.down1(self.stem(images))          # 1/4
        x2 = self.block2(self.down2(x1))            # 1/8
        x3 = self.block3(self.down3(x2))            # 1/16
        x4 = self.block4(self.down4(x3))            # 1/32
        return [self.lateral1(x1), self.lateral2(x2), self.lateral3(x3), self.lateral4(x4)]


_BACKBONES: dict[str, type[nn.Module]] = {}


def register_backbone(name: str):
    def deco(cls):
        _BACKBONES[name] = cls
        return cls
    return deco


register_backbone("residual")(ResidualBackbone)


def build_backbone(name: str, feature_width: int, frozen: bool = False) -> nn.Module:
    if name not in _BACKBONES:
        raise ConfigurationError(f"unknown backbone {name!r}; available: {sorted(_BACKBONES)}")
    net = _BACKBONES[name](feature_width)
    if frozen:
        for p in net.parameters():
            p.requires_grad_(False)
    return net


def encode_images(backbone: nn.Module, images: torch.Tensor) -> list[FeaturePyramid]:
    """Run the backbone on a stack of per-camera images.

    Args:
        images: (N, 3, H, W) float in [0, 1].
    Returns:
        one FeaturePyramid per camera.
    """
    maps = backbone(images)
    return [FeaturePyramid(levels=tuple(m[n] for m in maps)) for n in range(images.shape[0])]
