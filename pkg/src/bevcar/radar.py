"""Radar point-cloud handling and the point-voxel radar encoder.

The encoder follows the point-pillar recipe extended to a full voxel lattice:
points are binned into voxels, each point runs through a small shared MLP,
per-voxel features are max-pooled, scattered into a dense (F, X, Y, Z) volume,
and a light CNN collapses the height axis into a BEV feature map f_rad.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DatasetError
from .geometry import BevGrid

# Per-point attribute layout; also the required CSV header.
RADAR_ATTRS = ("x", "y", "z", "vx", "vy", "rcs")
RADAR_DIM = len(RADAR_ATTRS)
DEFAULT_SWEEPS = 5


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass
class RadarPointCloud:
    """Aggregated radar returns: (P, 6) rows of x, y, z, vx, vy, rcs.

    Positions are metres in the reference frame, velocities m/s in the ground
    plane, RCS in dB.  `sweep_count` records how many sweeps were merged.
    """

    points: np.ndarray
    sweep_count: int = DEFAULT_SWEEPS

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, RADAR_DIM)
        if pts.ndim != 2 or pts.shape[1] != RADAR_DIM:
            raise ConfigurationError(f"radar points must be (P, {RADAR_DIM}), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ConfigurationError("radar points contain non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


def save_radar_csv(cloud: RadarPointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(RADAR_ATTRS) + "\n")
        for row in cloud.points:
            fh.write(",".join("%.17g" % x for x in row) + "\n")


def load_radar_csv(path, sweep_count: int = DEFAULT_SWEEPS) -> RadarPointCloud:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError as exc:
        raise DatasetError(f"radar file not found: {path}") from exc
    if not lines or lines[0] != ",".join(RADAR_ATTRS):
        got = lines[0] if lines else "<empty file>"
        raise DatasetError(f"{path}: bad radar CSV header {got!r}, "
                           f"expected {','.join(RADAR_ATTRS)!r}")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        fields = ln.split(",")
        if len(fields) != RADAR_DIM:
            raise DatasetError(f"{path}:{i}: expected {RADAR_DIM} fields, got {len(fields)}")
        try:
            rows.append([float(x) for x in fields])
        except ValueError as exc:
            raise DatasetError(f"{path}:{i}: non-numeric field") from exc
    pts = np.array(rows, dtype=np.float64).reshape(-1, RADAR_DIM)
    return RadarPointCloud(points=pts, sweep_count=sweep_count)


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

@dataclass
class VoxelizedRadar:
    """Sparse voxel buffers plus a dense occupancy volume.

    indices:   (K, 3) int64 voxel coordinates (ix, iy, iz) of occupied voxels,
               sorted by flat voxel index.
    buffer:    (K, P, 6) float64 per-voxel point buffers, zero padded.
    counts:    (K,) int64 number of real points per buffer (1..P).
    occupancy: (X, Y, Z) bool dense occupancy.
    dropped:   number of points discarded for lying outside the grid
               (capacity-sampled points are not counted here).
    """

    indices: np.ndarray
    buffer: np.ndarray
    counts: np.ndarray
    occupancy: np.ndarray
    dropped: int

    @property
    def occupancy_bev(self) -> np.ndarray:
        """(X, Y) bool: any occupied height bin."""
        return self.occupancy.any(axis=2)

    def flat_indices(self, grid: BevGrid) -> np.ndarray:
        ix, iy, iz = self.indices.T
        return (ix * grid.y_cells + iy) * grid.z_cells + iz


def voxelize_radar(cloud: RadarPointCloud, grid: BevGrid, max_points: int = 10,
                   seed: int = 0) -> VoxelizedRadar:
    """Bin radar points into voxels with a per-voxel capacity.

    Cells are half-open [lo, hi): a point exactly on a boundary belongs to the
    cell that starts there, and points at or beyond the outer upper boundary
    are dropped.  When a voxel exceeds `max_points`, a uniform subset is kept;
    the draw is a pure function of `seed`, so re-voxelizing is reproducible.
    """
    if max_points <= 0:
        raise ConfigurationError(f"max_points must be positive, got {max_points}")
    pts = cloud.points
    X, Y, Z = grid.x_cells, grid.y_cells, grid.z_cells
    occupancy = np.zeros((X, Y, Z), dtype=bool)
    if len(pts) == 0:
        return VoxelizedRadar(indices=np.zeros((0, 3), dtype=np.int64),
                              buffer=np.zeros((0, max_points, RADAR_DIM)),
                              counts=np.zeros(0, dtype=np.int64),
                              occupancy=occupancy, dropped=0)

    sizes = np.array([grid.x_size, grid.y_size, grid.z_size])
    cell = np.floor((pts[:, :3] - grid.lo) / sizes).astype(np.int64)
    inb = ((cell >= 0).all(axis=1)
           & (cell[:, 0] < X) & (cell[:, 1] < Y) & (cell[:, 2] < Z))
    dropped = int((~inb).sum())
    cell = cell[inb]
    kept = pts[inb]
    if kept.shape[0] == 0:
        return VoxelizedRadar(indices=np.zeros((0, 3), dtype=np.int64),
                              buffer=np.zeros((0, max_points, RADAR_DIM)),
                              counts=np.zeros(0, dtype=np.int64),
                              occupancy=occupancy, dropped=dropped)

    flat = (cell[:, 0] * Y + cell[:, 1]) * Z + cell[:, 2]
    uniq, inverse = np.unique(flat, return_inverse=True)
    K = uniq.shape[0]
    buffer = np.zeros((K, max_points, RADAR_DIM), dtype=np.float64)
    counts = np.zeros(K, dtype=np.int64)
    rng = np.random.default_rng(seed)
    # iterate voxels in flat-index order so the rng stream is reproducible
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(K + 1))
    for k in range(K):
        members = order[bounds[k]:bounds[k + 1]]
        if members.size > max_points:
            pick = rng.choice(members.size, size=max_points, replace=False)
            members = members[np.sort(pick)]
        counts[k] = members.size
        buffer[k, :members.size] = kept[members]

    iz = uniq % Z
    iy = (uniq // Z) % Y
    ix = uniq // (Y * Z)
    indices = np.stack([ix, iy, iz], axis=1)
    occupancy[ix, iy, iz] = True
    return VoxelizedRadar(indices=indices, buffer=buffer, counts=counts,
                          occupancy=occupancy, dropped=dropped)


# ---------------------------------------------------------------------------
# Encoder modules
# ---------------------------------------------------------------------------

class PointEncoder(nn.Module):
    """Shared per-point MLP: Linear -> LayerNorm -> SiLU per layer."""

    def __init__(self, feature_width: int, hidden: tuple[int, ...] | None = None,
                 norm: bool = True, in_dim: int = RADAR_DIM):
        super().__init__()
        if feature_width <= 0:
            raise ConfigurationError("feature_width must be positive")
        widths = tuple(hidden) if hidden is not None else (max(feature_width // 2, 4),)
        dims = (in_dim,) + widths + (feature_width,)
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers.append(nn.Linear(a, b))
            if norm:
                layers.append(nn.LayerNorm(b))
            layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        self.feature_width = feature_width

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """(..., 6) -> (..., F)."""
        if points.shape[-1] != self.net[0].in_features:
            raise ConfigurationError(
                f"point encoder expects {self.net[0].in_features} attributes, "
                f"got {points.shape[-1]}")
        return self.net(points)


def pool_voxels(point_features: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Elementwise max over the real points of each buffer.

    Args:
        point_features: (K, P, F)
        counts: (K,) number of valid leading entries per buffer.
    Returns:
        (K, F); buffers with count 0 map to the zero vector.
    """
    if point_features.ndim != 3:
        raise ConfigurationError(f"expected (K, P, F), got {tuple(point_features.shape)}")
    K, P, _ = point_features.shape
    mask = torch.arange(P, device=point_features.device)[None, :] < counts[:, None]
    neg = torch.finfo(point_features.dtype).min
    masked = point_features.masked_fill(~mask[:, :, None], neg)
    pooled = masked.amax(dim=1)
    return torch.where((counts > 0)[:, None], pooled, torch.zeros_like(pooled))


class HeightCompressor(nn.Module):
    """Collapse the height axis: (B, F, X, Y, Z) -> (B, F, X, Y).

    Treats the Z * F channels jointly with a 3x3 convolution over the ground
    plane, then mixes channels with a 1x1 convolution.  Both stages are linear
    (no activation in between) so the module is exactly translation-equivariant.
    """

    def __init__(self, feature_width: int, z_cells: int):
        super().__init__()
        self.conv = nn.Conv2d(z_cells * feature_width, feature_width, 3, padding=1)
        self.mix = nn.Conv2d(feature_width, feature_width, 1)
        self.z_cells = z_cells
        self.feature_width = feature_width

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        if volume.ndim != 5:
            raise ConfigurationError(f"expected (B, F, X, Y, Z), got {tuple(volume.shape)}")
        B, F, X, Y, Z = volume.shape
        if Z != self.z_cells or F != self.feature_width:
            raise ConfigurationError(
                f"compressor built for F={self.feature_width}, Z={self.z_cells}; "
                f"got F={F}, Z={Z}")
        stacked = volume.permute(0, 4, 1, 2, 3).reshape(B, Z * F, X, Y)
        return self.mix(self.conv(stacked))


class RadarEncoder(nn.Module):
    """Full radar branch: voxel buffers -> BEV features f_rad (B, F, X, Y)."""

    def __init__(self, feature_width: int, grid: BevGrid,
                 hidden: tuple[int, ...] | None = None):
        super().__init__()
        self.point_encoder = PointEncoder(feature_width, hidden=hidden)
        self.compressor = HeightCompressor(feature_width, grid.z_cells)
        self.grid = grid
        self.feature_width = feature_width

    def encode_volume(self, voxels: list[VoxelizedRadar]) -> torch.Tensor:
        """Encode and scatter buffers into a dense (B, F, X, Y, Z) volume."""
        p = next(self.parameters())
        g = self.grid
        B = len(voxels)
        dense = p.new_zeros(B, self.feature_width, g.num_voxels)
        for b, vox in enumerate(voxels):
            if vox.indices.shape[0] == 0:
                continue
            buf = torch.as_tensor(vox.buffer, dtype=p.dtype, device=p.device)
            counts = torch.as_tensor(vox.counts, device=p.device)
            feats = pool_voxels(self.point_encoder(buf), counts)      # (K, F)
            flat = torch.as_tensor(vox.flat_indices(g), device=p.device)
            dense[b].index_add_(1, flat, feats.T)
        return dense.view(B, self.feature_width, g.x_cells, g.y_cells, g.z_cells)

    def forward(self, voxels: list[VoxelizedRadar]) -> torch.Tensor:
        return self.compressor(self.encode_volume(voxels))
