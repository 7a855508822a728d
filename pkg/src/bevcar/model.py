"""End-to-end camera-radar BEV segmentation network.

Dataflow for one batch::

    images (B, N, 3, H, W)
      └─ backbone ─► 4-level pyramids (B, N, F, h_l, w_l)
            ├─ 1/8 level ─ ray splat ─► voxel volume (B, F, X, Y, Z)
            │                              └─ query init (+ radar occupancy)
            └────────────── view lifting (deformable) ─► f_img_bev (B, F, X, Y)
    radar voxels ─ point MLP + max-pool + height compress ─► f_rad (B, F, X, Y)
    f_rad + f_img_bev ─ BEV fusion (deformable) ─► fused
    fused ─ residual BEV encoder ─► head ─► logits (B, 8, X, Y)

Everything that depends only on calibration (voxel-to-camera assignment and
the normalised projections of every cell's voxel column) is precomputed once
per rig in a :class:`GeometryCache` and passed to ``forward``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import PYRAMID_STRIDES, build_backbone
from .config import RunConfig
from .data import Sample
from .errors import ConfigurationError
from .fusion import BevEncoder, BevFusion
from .geometry import (BevGrid, CameraRig, VoxelCameraAssignment, assign_cameras,
                       splat_image_features)
from .heads import NUM_CLASSES, SegmentationHead
from .lifting import ViewLifting
from .radar import RadarEncoder, VoxelizedRadar, voxelize_radar


@dataclass
class GeometryCache:
    """Projection tables for a fixed (grid, rig) pair.

    refs:  (1, X*Y, N, Z, 2) normalised image locations of every cell's voxel
           column centre in every camera (x = u / W, y = v / H).
    valid: (1, X*Y, N, Z) bool; True iff the voxel is assigned to the camera
           after the two-camera cap.
    """

    grid: BevGrid
    rig: CameraRig
    assignment: VoxelCameraAssignment
    refs: torch.Tensor
    valid: torch.Tensor


def build_geometry_cache(grid: BevGrid, rig: CameraRig) -> GeometryCache:
    assignment = assign_cameras(grid, rig)
    X, Y, Z, N = grid.x_cells, grid.y_cells, grid.z_cells, len(rig)
    scale = np.array([[cam.width, cam.height] for cam in rig], dtype=np.float64)
    norm_uv = assignment.uv / scale[None, :, :]                     # (V, N, 2)
    # flat voxel index is (i*Y + j)*Z + k, cell token is i*Y + j
    refs = torch.from_numpy(norm_uv.reshape(X * Y, Z, N, 2).transpose(0, 2, 1, 3).copy())
    valid = torch.from_numpy(assignment.valid.reshape(X * Y, Z, N).transpose(0, 2, 1).copy())
    return GeometryCache(grid=grid, rig=rig, assignment=assignment,
                         refs=refs.unsqueeze(0), valid=valid.unsqueeze(0))


def voxelize_seed(run_seed: int, token: str) -> int:
    """Per-sample seed for radar voxel capacity sampling (stable across runs)."""
    return zlib.crc32(f"{run_seed}:{token}".encode())


class BevCarNet(nn.Module):
    """Camera-radar fusion network for multi-label BEV segmentation."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.grid = config.grid.build()
        Fw = config.model.feature_width
        heads = config.attention.heads
        points = config.attention.points_per_ref
        self.use_radar = config.model.use_radar
        self.backbone = build_backbone(config.backbone.name, Fw,
                                       frozen=config.backbone.frozen)
        if self.use_radar:
            self.radar_encoder = RadarEncoder(Fw, self.grid)
        else:
            self.radar_encoder = None
        self.lifting = ViewLifting(Fw, self.grid, heads=heads, points_per_ref=points,
                                   num_blocks=config.model.lift_blocks,
                                   ffn_expansion=config.model.ffn_expansion)
        self.fusion = BevFusion(Fw, self.grid, heads=heads, points_per_ref=points,
                                num_blocks=config.model.fusion_blocks,
                                ffn_expansion=config.model.ffn_expansion)
        self.bev_encoder = BevEncoder(Fw)
        self.head = SegmentationHead(Fw, NUM_CLASSES)

    # ------------------------------------------------------------------
    # pieces, exposed for inspection and tests
    # ------------------------------------------------------------------

    def pyramids(self, images: torch.Tensor) -> list[torch.Tensor]:
        """(B, N, 3, H, W) float in [0, 1] -> per level (B, N, F, h_l, w_l)."""
        if images.ndim != 5 or images.shape[2] != 3:
            raise ConfigurationError(
                f"images must be (B, N, 3, H, W), got {tuple(images.shape)}")
        B, N = images.shape[:2]
        maps = self.backbone(images.reshape(B * N, *images.shape[2:]))
        return [m.view(B, N, *m.shape[1:]) for m in maps]

    def occupancy_map(self, voxels: list[VoxelizedRadar] | None,
                      batch: int) -> torch.Tensor:
        """(B, X, Y) bool radar occupancy; all-False without radar."""
        g = self.grid
        occ = torch.zeros(batch, g.x_cells, g.y_cells, dtype=torch.bool)
        if self.use_radar:
            if voxels is None or len(voxels) != batch:
                raise ConfigurationError("radar is enabled but voxel buffers are "
                                         "missing or batch-size mismatched")
            for b, vox in enumerate(voxels):
                occ[b] = torch.from_numpy(vox.occupancy_bev)
        return occ

    def radar_features(self, voxels: list[VoxelizedRadar] | None,
                       batch: int, like: torch.Tensor) -> torch.Tensor:
        """f_rad (B, F, X, Y); zeros in camera-only mode."""
        if self.use_radar:
            assert voxels is not None
            return self.radar_encoder(voxels)
        g = self.grid
        return like.new_zeros(batch, self.config.model.feature_width,
                              g.x_cells, g.y_cells)

    # ------------------------------------------------------------------

    def forward(self, images: torch.Tensor, voxels: list[VoxelizedRadar] | None,
                cache: GeometryCache) -> torch.Tensor:
        """
        Args:
            images: (B, N, 3, H, W) float in [0, 1].
            voxels: per-sample radar voxel buffers (None in camera-only mode).
            cache: geometry for the rig that captured `images`.
        Returns:
            logits: (B, NUM_CLASSES, X, Y)
        """
        if cache.grid != self.grid:
            raise ConfigurationError("geometry cache was built for a different grid")
        B, N = images.shape[:2]
        if len(cache.rig) != N:
            raise ConfigurationError(
                f"{N} camera images but cache rig has {len(cache.rig)}")
        pyramids = self.pyramids(images)
        splat = splat_image_features(pyramids[PYRAMID_STRIDES.index(8)], self.grid,
                                     cache.rig, cache.assignment, feature_stride=8)
        occupancy = self.occupancy_map(voxels, B).to(images.device)
        refs = cache.refs.expand(B, -1, -1, -1, -1)
        valid = cache.valid.expand(B, -1, -1, -1)
        f_img_bev = self.lifting(splat, occupancy, pyramids, refs, valid)
        f_rad = self.radar_features(voxels, B, like=f_img_bev)
        fused = self.fusion(f_rad, f_img_bev)
        return self.head(self.bev_encoder(fused))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def images_to_tensor(samples: list[Sample]) -> torch.Tensor:
    """Stack sample images into (B, N, 3, H, W) float32 in [0, 1]."""
    if not samples:
        raise ConfigurationError("empty batch")
    arr = np.stack([s.images for s in samples])
    return torch.from_numpy(arr).float() / 255.0


def voxelize_batch(samples: list[Sample], grid: BevGrid, max_points: int,
                   run_seed: int) -> list[VoxelizedRadar]:
    return [voxelize_radar(s.radar, grid, max_points=max_points,
                           seed=voxelize_seed(run_seed, s.token))
            for s in samples]


def batch_from_samples(samples: list[Sample], net: BevCarNet,
                       run_seed: int) -> tuple[torch.Tensor, list[VoxelizedRadar] | None]:
    """Images + voxel buffers for a batch, honouring camera-only mode."""
    images = images_to_tensor(samples)
    voxels = None
    if net.use_radar:
        voxels = voxelize_batch(samples, net.grid,
                                net.config.model.radar_max_points, run_seed)
    return images, voxels
