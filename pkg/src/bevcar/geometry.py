"""BEV voxel lattice, pinhole cameras, and image-to-voxel feature splatting.

Conventions used throughout the package:

* Reference frame: x forward, y left, z up.  The origin sits on the ground
  directly below the forward camera, so the BEV grid is centred on the ego
  vehicle with the forward camera above (0, 0, 0).
* Camera frame: x right, y down, z forward (optical axis).  Extrinsics map
  reference points into the camera frame via  p_cam = R @ p_ref + t.
* Image coordinates (u, v) are continuous and measured from the top-left
  image *edge* in pixels: pixel (row r, col c) covers [c, c+1) x [r, r+1)
  and has its centre at (c + 0.5, r + 0.5).  A point is inside the image
  iff 0 <= u < W and 0 <= v < H.  Normalised coordinates are u / W, v / H.
  This matches `torch.nn.functional.grid_sample(..., align_corners=False)`
  after mapping [0, 1] -> [-1, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DatasetError

# Minimum forward depth (metres) for a projection to count as "in front of"
# a camera; guards the division by z.
DEPTH_EPS = 1e-3

# At most this many cameras contribute features to a single voxel.
MAX_CAMERAS_PER_VOXEL = 2


# ---------------------------------------------------------------------------
# BEV grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BevGrid:
    """Axis-aligned voxel lattice around the ego vehicle.

    Defaults: 200 x 200 cells over 100 m x 100 m, 8 height bins covering
    z in [0, 10] m, i.e. 0.5 m x 0.5 m x 1.25 m voxels.
    """

    x_cells: int = 200
    y_cells: int = 200
    z_cells: int = 8
    x_extent: float = 100.0
    y_extent: float = 100.0
    z_min: float = 0.0
    z_max: float = 10.0

    def __post_init__(self) -> None:
        if self.x_cells <= 0 or self.y_cells <= 0 or self.z_cells <= 0:
            raise ConfigurationError(f"grid cell counts must be positive, got "
                                     f"({self.x_cells}, {self.y_cells}, {self.z_cells})")
        if self.x_extent <= 0 or self.y_extent <= 0:
            raise ConfigurationError("grid extents must be positive")
        if self.z_max <= self.z_min:
            raise ConfigurationError(f"z range empty: [{self.z_min}, {self.z_max}]")

    # cell sizes in metres
    @property
    def x_size(self) -> float:
        return self.x_extent / self.x_cells

    @property
    def y_size(self) -> float:
        return self.y_extent / self.y_cells

    @property
    def z_size(self) -> float:
        return (self.z_max - self.z_min) / self.z_cells

    @property
    def lo(self) -> np.ndarray:
        """Lower corner (x, y, z) of the lattice."""
        return np.array([-0.5 * self.x_extent, -0.5 * self.y_extent, self.z_min])

    @property
    def num_voxels(self) -> int:
        return self.x_cells * self.y_cells * self.z_cells

    @property
    def num_cells(self) -> int:
        return self.x_cells * self.y_cells


def voxel_centers(grid: BevGrid) -> np.ndarray:
    """Centres of all voxels, shape (x_cells * y_cells * z_cells, 3), float64.

    Row-major ordering in (x, y, z): the flat index of voxel (i, j, k) is
    (i * y_cells + j) * z_cells + k, so z varies fastest.
    """
    xs = grid.lo[0] + (np.arange(grid.x_cells, dtype=np.float64) + 0.5) * grid.x_size
    ys = grid.lo[1] + (np.arange(grid.y_cells, dtype=np.float64) + 0.5) * grid.y_size
    zs = grid.lo[2] + (np.arange(grid.z_cells, dtype=np.float64) + 0.5) * grid.z_size
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def cell_centers_2d(grid: BevGrid) -> np.ndarray:
    """Ground-plane cell centres (x, y), shape (x_cells, y_cells, 2), float64."""
    xs = grid.lo[0] + (np.arange(grid.x_cells, dtype=np.float64) + 0.5) * grid.x_size
    ys = grid.lo[1] + (np.arange(grid.y_cells, dtype=np.float64) + 0.5) * grid.y_size
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def _as_matrix(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(shape)
    if not np.isfinite(arr).all():
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics K, extrinsics (R, t), image size H x W."""

    name: str
    intrinsics: np.ndarray          # (3, 3)
    rotation: np.ndarray            # (3, 3), reference -> camera
    translation: np.ndarray         # (3,)
    height: int
    width: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "intrinsics", _as_matrix(self.intrinsics, (3, 3), "K"))
        object.__setattr__(self, "rotation", _as_matrix(self.rotation, (3, 3), "R"))
        object.__setattr__(self, "translation", _as_matrix(self.translation, (3,), "t"))
        if self.height <= 0 or self.width <= 0:
            raise ConfigurationError(f"camera {self.name}: bad image size "
                                     f"{self.height}x{self.width}")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ConfigurationError(f"camera {self.name}: R is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ConfigurationError(f"camera {self.name}: R flips orientation (det < 0)")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"camera {self.name}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(f"camera {self.name}: principal point outside image")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the reference frame: C = -R^T t."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": [float(x) for x in self.intrinsics.reshape(-1)],
            "R": [float(x) for x in self.rotation.reshape(-1)],
            "t": [float(x) for x in self.translation.reshape(-1)],
            "H": int(self.height),
            "W": int(self.width),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        try:
            return cls(
                name=str(data["name"]),
                intrinsics=_as_matrix(data["K"], (3, 3), "K"),
                rotation=_as_matrix(data["R"], (3, 3), "R"),
                translation=_as_matrix(data["t"], (3,), "t"),
                height=int(data["H"]),
                width=int(data["W"]),
            )
        except KeyError as exc:
            raise DatasetError(f"calibration entry missing field {exc}") from exc


@dataclass(frozen=True)
class CameraRig:
    """An ordered collection of cameras; index 0 is the forward camera."""

    cameras: tuple[CameraModel, ...]

    def __post_init__(self) -> None:
        if len(self.cameras) == 0:
            raise ConfigurationError("rig needs at least one camera")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate camera names in rig: {names}")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, idx: int) -> CameraModel:
        return self.cameras[idx]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.cameras)

    def to_json(self) -> str:
        return json.dumps([c.to_dict() for c in self.cameras], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CameraRig":
        try:
            entries = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"calibration is not valid JSON: {exc}") from exc
        if not isinstance(entries, list):
            raise DatasetError("calibration JSON must be a list of camera entries")
        return cls(cameras=tuple(CameraModel.from_dict(e) for e in entries))


def save_rig(rig: CameraRig, path) -> None:
    with open(path, "w") as fh:
        fh.write(rig.to_json())


def load_rig(path) -> CameraRig:
    try:
        with open(path) as fh:
            return CameraRig.from_json(fh.read())
    except FileNotFoundError as exc:
        raise DatasetError(f"calibration file not found: {path}") from exc


def _rotation_for_yaw(yaw: float) -> np.ndarray:
    """Reference->camera rotation for a level camera whose optical axis points
    along (cos yaw, sin yaw, 0) in the reference frame."""
    forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])   # x_cam
    down = np.array([0.0, 0.0, -1.0])                    # y_cam
    return np.stack([right, down, forward], axis=0)


def make_camera(name: str, yaw_deg: float, *, height: int, width: int,
                position: np.ndarray | None = None, hfov_deg: float = 70.0) -> CameraModel:
    """Build a level pinhole camera at `position` (default: 1.6 m above origin)."""
    yaw = np.deg2rad(yaw_deg)
    C = np.array([0.0, 0.0, 1.6]) if position is None else np.asarray(position, dtype=np.float64)
    R = _rotation_for_yaw(yaw)
    t = -R @ C
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(hfov_deg))
    K = np.array([[fx, 0.0, width / 2.0],
                  [0.0, fx, height / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraModel(name=name, intrinsics=K, rotation=R, translation=t,
                       height=height, width=width)


def default_rig(height: int = 448, width: int = 896, num_cameras: int = 6) -> CameraRig:
    """Surround rig: forward camera first, then alternating side/rear views."""
    yaws = [0.0, 60.0, -60.0, 120.0, -120.0, 180.0][:num_cameras]
    if num_cameras > 6:
        raise ConfigurationError("default rig supports at most 6 cameras")
    names = ["front", "front_left", "front_right", "back_left", "back_right", "back"]
    cams = [make_camera(names[i], yaws[i], height=height, width=width)
            for i in range(num_cameras)]
    return CameraRig(cameras=tuple(cams))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_points(points: np.ndarray, camera: CameraModel):
    """Project reference-frame points into a camera.

    Args:
        points: (N, 3) float array in the reference frame.
    Returns:
        uv:    (N, 2) float64 edge-based pixel coordinates (junk where depth <= eps)
        depth: (N,) float64 forward depth in the camera frame
        valid: (N,) bool, True iff depth > DEPTH_EPS and (u, v) inside the image
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ConfigurationError(f"points must be (N, 3), got {pts.shape}")
    cam = pts @ camera.rotation.T + camera.translation
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * (cam[:, 0] / depth) + camera.cx
        v = camera.fy * (cam[:, 1] / depth) + camera.cy
    uv = np.stack([u, v], axis=1)
    valid = (depth > DEPTH_EPS) \
        & (uv[:, 0] >= 0.0) & (uv[:, 0] < camera.width) \
        & (uv[:, 1] >= 0.0) & (uv[:, 1] < camera.height)
    return uv, depth, valid


# ---------------------------------------------------------------------------
# Voxel-to-camera assignment
# ---------------------------------------------------------------------------

@dataclass
class VoxelCameraAssignment:
    """Which cameras see which voxels, with cached projections.

    valid[v, n] is True iff voxel v draws features from camera n after the
    two-camera cap.  uv[v, n] holds the projected pixel location (edge-based,
    full resolution); it is only meaningful where the raw projection landed
    in front of the camera.
    """

    valid: np.ndarray       # (V, N) bool
    uv: np.ndarray          # (V, N, 2) float64
    counts: np.ndarray      # (V,) int64

    def camera_indices(self, flat_voxel: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.nonzero(self.valid[flat_voxel])[0])


def assign_cameras(grid: BevGrid, rig: CameraRig) -> VoxelCameraAssignment:
    """Assign each voxel to the cameras whose frustum contains its centre.

    Voxels seen by more than two cameras keep the two whose projection lands
    closest to the image centre (ties broken by camera index).  The result
    depends only on grid and calibration, so callers should compute it once
    per rig and reuse it.
    """
    centers = voxel_centers(grid)
    V, N = centers.shape[0], len(rig)
    valid = np.zeros((V, N), dtype=bool)
    uv = np.zeros((V, N, 2), dtype=np.float64)
    center_dist2 = np.full((V, N), np.inf, dtype=np.float64)
    for n, cam in enumerate(rig):
        uv_n, _, ok = project_points(centers, cam)
        valid[:, n] = ok
        uv[:, n] = uv_n
        du = uv_n[:, 0] - cam.width / 2.0
        dv = uv_n[:, 1] - cam.height / 2.0
        center_dist2[ok, n] = (du * du + dv * dv)[ok]

    counts = valid.sum(axis=1)
    over = np.nonzero(counts > MAX_CAMERAS_PER_VOXEL)[0]
    if over.size:
        # keep the MAX_CAMERAS_PER_VOXEL cameras with smallest centre distance
        order = np.argsort(center_dist2[over], axis=1, kind="stable")
        keep = order[:, :MAX_CAMERAS_PER_VOXEL]
        capped = np.zeros((over.size, N), dtype=bool)
        rows = np.arange(over.size)[:, None]
        capped[rows, keep] = True
        valid[over] = capped & valid[over]
        counts = valid.sum(axis=1)
    return VoxelCameraAssignment(valid=valid, uv=uv, counts=counts.astype(np.int64))


# ---------------------------------------------------------------------------
# Ray splatting
# ---------------------------------------------------------------------------

def splat_image_features(features: torch.Tensor, grid: BevGrid, rig: CameraRig,
                         assignment: VoxelCameraAssignment,
                         feature_stride: int = 8) -> torch.Tensor:
    """Scatter image features along camera rays into the voxel lattice.

    Every voxel samples the feature map of each assigned camera bilinearly at
    its centre's projected location scaled by `feature_stride`; voxels seen by
    two cameras average, unseen voxels stay zero.

    Args:
        features: (B, N, F, H/stride, W/stride) feature maps, one per camera.
        feature_stride: downsampling factor between the calibrated image size
            and `features` (the pipeline uses the 1/8-scale maps).
    Returns:
        (B, F, x_cells, y_cells, z_cells) splatted volume.
    """
    if features.ndim != 5:
        raise ConfigurationError(f"features must be (B, N, F, h, w), got {tuple(features.shape)}")
    B, N, Fch, fh, fw = features.shape
    if N != len(rig):
        raise ConfigurationError(f"feature maps for {N} cameras but rig has {len(rig)}")
    for cam in rig:
        if cam.height != rig[0].height or cam.width != rig[0].width:
            raise ConfigurationError("splat expects all cameras at the same resolution")
    H, W = rig[0].height, rig[0].width
    if fh * feature_stride != H or fw * feature_stride != W:
        raise ConfigurationError(
            f"feature maps {fh}x{fw} do not match image {H}x{W} at stride {feature_stride}")

    V = grid.num_voxels
    out = features.new_zeros(B, Fch, V)
    for n in range(len(rig)):
        idx_np = np.nonzero(assignment.valid[:, n])[0]
        if idx_np.size == 0:
            continue
        # edge-based pixels -> [0,1] -> grid_sample's [-1,1]; the stride cancels
        # because u / stride / (W / stride) == u / W.
        loc01 = assignment.uv[idx_np, n] / np.array([W, H], dtype=np.float64)
        sample_grid = torch.as_tensor(2.0 * loc01 - 1.0, dtype=features.dtype,
                                      device=features.device)
        sample_grid = sample_grid.view(1, -1, 1, 2).expand(B, -1, -1, -1)
        sampled = F.grid_sample(features[:, n], sample_grid, mode="bilinear",
                                padding_mode="zeros", align_corners=False)
        idx = torch.as_tensor(idx_np, device=features.device)
        out.index_add_(2, idx, sampled[:, :, :, 0])
    denom = torch.as_tensor(np.maximum(assignment.counts, 1), dtype=features.dtype,
                            device=features.device)
    out = out / denom
    return out.view(B, Fch, grid.x_cells, grid.y_cells, grid.z_cells)
