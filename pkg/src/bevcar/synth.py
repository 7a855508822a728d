"""Synthetic driving scenes: geometry, radar simulation, flat-shaded rendering.

A scene is a straight multi-lane road crossing the grid at a random heading,
with map furniture (crossings, stop line, walkways, a carpark, dividers) laid
out as convex polygons and a handful of vehicles placed on the lanes.  Radar
returns are sampled on the vehicle faces that face the sensor, with truncated
Gaussian position noise so every point provably stays near its vehicle.
Cameras render the same geometry with the package's own pinhole models, so
image evidence and BEV ground truth are consistent by construction.

Conditions only touch the rendered images (rain dims and adds noise, night is
near-black); radar is generated before the condition is applied and is
therefore condition-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .data import BevGroundTruth, Sample
from .errors import ConfigurationError, GenerationError
from .geometry import BevGrid, CameraRig, cell_centers_2d, default_rig
from .heads import MAP_CLASSES
from .metrics import CONDITIONS
from .radar import RadarPointCloud

VEHICLE_HEIGHT = 1.6          # metres; boxes are 2D in the scene description
RADAR_ORIGIN = np.array([0.0, 0.0, 0.5])
RADAR_SIGMA = 0.3             # position noise std dev, truncated at 3 sigma
NOISE_CLIP = 3.0 * RADAR_SIGMA

# flat-shading colors for rendering (RGB)
_SKY = (134, 156, 178)
_GROUND = (62, 64, 60)
_MAP_COLORS = {
    "drivable_area": (84, 88, 94),
    "carpark_area": (104, 96, 120),
    "pedestrian_crossing": (182, 182, 176),
    "walkway": (120, 128, 116),
    "stop_line": (168, 150, 120),
    "road_divider": (190, 178, 90),
    "lane_divider": (170, 170, 170),
}


@dataclass(frozen=True)
class VehicleBox:
    """Ground-plane box: centre (m), size (m), heading (rad), speed (m/s)."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    speed: float

    def corners(self) -> np.ndarray:
        """(4, 2) corner coordinates, counter-clockwise."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.array([[c, -s], [s, c]])
        half = 0.5 * np.array([[self.length, self.width],
                               [-self.length, self.width],
                               [-self.length, -self.width],
                               [self.length, -self.width]])
        return half @ R.T + np.array([self.cx, self.cy])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask: is each (…, 2) point inside the box (boundary counts)."""
        d = np.asarray(points, dtype=np.float64) - np.array([self.cx, self.cy])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local_x = d[..., 0] * c + d[..., 1] * s
        local_y = -d[..., 0] * s + d[..., 1] * c
        return (np.abs(local_x) <= 0.5 * self.length) & (np.abs(local_y) <= 0.5 * self.width)


@dataclass(frozen=True)
class SceneParams:
    """Difficulty knobs for scene synthesis."""

    min_vehicles: int = 1
    max_vehicles: int = 4
    speed_range: tuple[float, float] = (3.0, 14.0)
    stationary_prob: float = 0.3
    road_width_range: tuple[float, float] = (12.0, 18.0)
    max_heading: float = 0.35          # radians; road rotation around +x
    placement_retries: int = 100

    def __post_init__(self) -> None:
        if self.min_vehicles < 0 or self.max_vehicles < self.min_vehicles:
            raise ConfigurationError("bad vehicle count range")


@dataclass
class SyntheticScene:
    vehicles: tuple[VehicleBox, ...]
    map_polygons: dict[str, tuple[np.ndarray, ...]]   # class -> convex CCW polys
    rig: CameraRig
    condition: str
    seed: int

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise ConfigurationError(f"unknown condition {self.condition!r}")
        for cls, polys in self.map_polygons.items():
            if cls not in MAP_CLASSES:
                raise ConfigurationError(f"unknown map class {cls!r}")
            for poly in polys:
                if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
                    raise ConfigurationError(f"bad polygon for {cls}: {poly.shape}")


def _rect(cx: float, cy: float, length: float, width: float, ang: float) -> np.ndarray:
    """Axis rectangle rotated by ang, CCW corner order, shape (4, 2)."""
    c, s = np.cos(ang), np.sin(ang)
    R = np.array([[c, -s], [s, c]])
    half = 0.5 * np.array([[length, -width], [length, width],
                           [-length, width], [-length, -width]])
    return half @ R.T + np.array([cx, cy])


def convex_contains(poly: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Point-in-convex-polygon for CCW polygons, boundary inclusive."""
    pts = np.asarray(points, dtype=np.float64)
    inside = np.ones(pts.shape[:-1], dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (pts[..., 1] - a[1]) - (b[1] - a[1]) * (pts[..., 0] - a[0])
        inside &= cross >= -1e-9
    return inside


def _boxes_too_close(a: VehicleBox, b: VehicleBox, margin: float = 0.5) -> bool:
    # conservative circle test: guarantees disjoint boxes when it passes
    ra = 0.5 * np.hypot(a.length, a.width)
    rb = 0.5 * np.hypot(b.length, b.width)
    return np.hypot(a.cx - b.cx, a.cy - b.cy) < ra + rb + margin


def generate_scene(seed: int, params: SceneParams | None = None,
                   grid: BevGrid | None = None, rig: CameraRig | None = None,
                   condition: str = "day") -> SyntheticScene:
    """Deterministically synthesise a scene for the given seed."""
    params = params or SceneParams()
    grid = grid or BevGrid()
    rig = rig or default_rig()
    rng = np.random.default_rng(np.random.SeedSequence([max(seed, 0), 0]))

    heading = rng.uniform(-params.max_heading, params.max_heading)
    road_w = rng.uniform(*params.road_width_range)
    road_len = 1.2 * max(grid.x_extent, grid.y_extent)
    lane = road_w / 4.0                       # 4 lanes, two per direction

    def on_road(cx_along: float, cy_off: float, length: float, width: float,
                ang_extra: float = 0.0) -> np.ndarray:
        c, s = np.cos(heading), np.sin(heading)
        return _rect(cx_along * c - cy_off * s, cx_along * s + cy_off * c,
                     length, width, heading + ang_extra)

    polys: dict[str, list[np.ndarray]] = {cls: [] for cls in MAP_CLASSES}
    polys["drivable_area"].append(on_road(0.0, 0.0, road_len, road_w))
    polys["road_divider"].append(on_road(0.0, 0.0, road_len, 0.4))
    for off in (-2 * lane + lane, 2 * lane - lane):       # between lane pairs
        polys["lane_divider"].append(on_road(0.0, off, road_len, 0.3))
    for side in (-1.0, 1.0):
        polys["walkway"].append(on_road(0.0, side * (road_w / 2 + 2.0), road_len, 3.0))
    cross_x = rng.uniform(-0.25, 0.25) * grid.x_extent
    polys["pedestrian_crossing"].append(on_road(cross_x, 0.0, 3.0, road_w))
    polys["stop_line"].append(on_road(cross_x - 2.4, -road_w / 4, 0.8, road_w / 2))
    park_x = rng.uniform(-0.3, 0.3) * grid.x_extent
    park_side = rng.choice([-1.0, 1.0])
    polys["carpark_area"].append(
        on_road(park_x, park_side * (road_w / 2 + 6.5), 14.0, 6.0))

    n_target = int(rng.integers(params.min_vehicles, params.max_vehicles + 1))
    # the ego occupies the origin; keep vehicles (and the radar origin) apart
    ego = VehicleBox(cx=0.0, cy=0.0, length=4.5, width=2.0, yaw=heading, speed=0.0)
    vehicles: list[VehicleBox] = []
    x_lim = 0.5 * grid.x_extent - 4.0
    y_lim = 0.5 * grid.y_extent - 4.0
    for _ in range(n_target):
        placed = False
        for _attempt in range(params.placement_retries):
            along = rng.uniform(-0.44, 0.44) * road_len
            lane_center = rng.choice([-3.0, -1.0, 1.0, 3.0]) * lane / 2.0
            direction = 0.0 if lane_center > 0 else np.pi
            c, s = np.cos(heading), np.sin(heading)
            cx = along * c - lane_center * s
            cy = along * s + lane_center * c
            if abs(cx) > x_lim or abs(cy) > y_lim:
                continue
            speed = 0.0 if rng.uniform() < params.stationary_prob \
                else float(rng.uniform(*params.speed_range))
            box = VehicleBox(cx=float(cx), cy=float(cy),
                             length=float(rng.uniform(3.8, 5.2)),
                             width=float(rng.uniform(1.7, 2.1)),
                             yaw=float(heading + direction + rng.uniform(-0.05, 0.05)),
                             speed=speed)
            if any(_boxes_too_close(box, other) for other in vehicles + [ego]):
                continue
            vehicles.append(box)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place vehicle {len(vehicles) + 1}/{n_target} after "
                f"{params.placement_retries} retries (seed {seed})")

    return SyntheticScene(vehicles=tuple(vehicles),
                          map_polygons={c: tuple(p) for c, p in polys.items()},
                          rig=rig, condition=condition, seed=seed)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def rasterize_gt(scene: SyntheticScene, grid: BevGrid) -> BevGroundTruth:
    """Cell-centre point tests against boxes and polygons."""
    centers = cell_centers_2d(grid)                       # (X, Y, 2)
    vehicle = np.zeros(centers.shape[:2], dtype=bool)
    for box in scene.vehicles:
        vehicle |= box.contains(centers)
    maps = np.zeros((len(MAP_CLASSES),) + centers.shape[:2], dtype=bool)
    for m, cls in enumerate(MAP_CLASSES):
        for poly in scene.map_polygons.get(cls, ()):
            maps[m] |= convex_contains(poly, centers)
    return BevGroundTruth(vehicle=vehicle, maps=maps,
                          valid=np.ones(centers.shape[:2], dtype=bool))


# ---------------------------------------------------------------------------
# Radar simulation
# ---------------------------------------------------------------------------

def make_radar(scene: SyntheticScene, rng: np.random.Generator,
               sweeps: int = 5) -> RadarPointCloud:
    """Sample radar returns on the vehicle faces that face the sensor.

    Position noise is a Gaussian (sigma 0.3 m) truncated at 3 sigma, so every
    generated point stays within 0.9 m of its vehicle's surface.
    """
    rows = []
    for box in scene.vehicles:
        rcs = float(rng.uniform(-5.0, 15.0))              # one RCS per vehicle
        corners = box.corners()
        edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
        visible = []
        for a, b in edges:
            mid = 0.5 * (a + b)
            edge = b - a
            normal = np.array([edge[1], -edge[0]])
            normal /= np.linalg.norm(normal)
            center_out = mid - np.array([box.cx, box.cy])
            if np.dot(normal, center_out) < 0:            # orient outward
                normal = -normal
            if np.dot(normal, RADAR_ORIGIN[:2] - mid) > 1e-9:
                visible.append((a, b))
        if not visible:                                    # origin inside box;
            visible = edges                                # placement forbids it
        n_pts = int(sum(rng.integers(1, 7) for _ in range(sweeps)))
        vel = box.speed * np.array([np.cos(box.yaw), np.sin(box.yaw)])
        for _ in range(n_pts):
            a, b = visible[int(rng.integers(len(visible)))]
            u = rng.uniform()
            xy = a + u * (b - a)
            z = rng.uniform(0.2, VEHICLE_HEIGHT - 0.2)
            noise = np.clip(rng.normal(0.0, RADAR_SIGMA, size=3),
                            -NOISE_CLIP, NOISE_CLIP)
            v_noise = rng.normal(0.0, 0.1, size=2)
            rows.append([xy[0] + noise[0], xy[1] + noise[1], z + noise[2],
                         vel[0] + v_noise[0], vel[1] + v_noise[1], rcs])
    pts = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return RadarPointCloud(points=pts, sweep_count=sweeps)


# ---------------------------------------------------------------------------
# Camera rendering
# ---------------------------------------------------------------------------

def _clip_near(verts_cam: np.ndarray, near: float = 0.2) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against the z >= near half-space."""
    out = []
    n = verts_cam.shape[0]
    for i in range(n):
        a, b = verts_cam[i], verts_cam[(i + 1) % n]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out).reshape(-1, 3)


def _draw_world_polygon(draw: ImageDraw.ImageDraw, cam, verts3d: np.ndarray,
                        color: tuple[int, int, int]) -> None:
    cam_pts = verts3d @ cam.rotation.T + cam.translation
    clipped = _clip_near(cam_pts)
    if clipped.shape[0] < 3:
        return
    u = cam.fx * (clipped[:, 0] / clipped[:, 2]) + cam.cx
    v = cam.fy * (clipped[:, 1] / clipped[:, 2]) + cam.cy
    if (u < 0).all() or (u >= cam.width).all() or (v < 0).all() or (v >= cam.height).all():
        return
    draw.polygon(list(zip(u.tolist(), v.tolist())), fill=color)


def _vehicle_faces(box: VehicleBox) -> list[np.ndarray]:
    base = box.corners()
    low = np.concatenate([base, np.zeros((4, 1))], axis=1)
    high = np.concatenate([base, np.full((4, 1), VEHICLE_HEIGHT)], axis=1)
    faces = [high[::-1]]                                   # roof
    for i in range(4):
        j = (i + 1) % 4
        faces.append(np.array([low[i], low[j], high[j], high[i]]))
    return faces


def render_images(scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    """Flat-shaded per-camera renders, (N, 3, H, W) uint8, before conditions."""
    vehicle_colors = [tuple(int(v) for v in rng.integers(90, 230, size=3))
                      for _ in scene.vehicles]
    out = []
    for cam in scene.rig:
        img = Image.new("RGB", (cam.width, cam.height))
        draw = ImageDraw.Draw(img)
        horizon = int(np.clip(round(cam.cy), 0, cam.height))
        draw.rectangle([0, 0, cam.width, horizon], fill=_SKY)
        draw.rectangle([0, horizon, cam.width, cam.height], fill=_GROUND)
        for cls in MAP_CLASSES:                            # painter order
            for poly in scene.map_polygons.get(cls, ()):
                verts3d = np.concatenate([poly, np.zeros((poly.shape[0], 1))], axis=1)
                _draw_world_polygon(draw, cam, verts3d, _MAP_COLORS[cls])
        cam_center = cam.center
        order = sorted(range(len(scene.vehicles)),
                       key=lambda i: -np.hypot(scene.vehicles[i].cx - cam_center[0],
                                               scene.vehicles[i].cy - cam_center[1]))
        for i in order:
            box, color = scene.vehicles[i], vehicle_colors[i]
            faces = _vehicle_faces(box)
            depths = [np.mean((f @ cam.rotation.T + cam.translation)[:, 2]) for f in faces]
            shade = [1.15] + [0.85, 0.7, 0.85, 0.7]        # roof brighter
            for k in np.argsort(depths)[::-1]:
                c = tuple(int(np.clip(ch * shade[k], 0, 255)) for ch in color)
                _draw_world_polygon(draw, cam, faces[k], c)
        out.append(np.array(img, dtype=np.uint8).transpose(2, 0, 1))
    return np.stack(out)


def apply_condition(images: np.ndarray, condition: str,
                    rng: np.random.Generator) -> np.ndarray:
    """Darken / perturb rendered images; 'day' is the identity."""
    if condition == "day":
        return images
    x = images.astype(np.float64)
    if condition == "rain":
        x = 0.62 * x + rng.normal(0.0, 7.0, size=x.shape)
    elif condition == "night":
        x = 0.045 * x + rng.normal(0.0, 2.0, size=x.shape)
    else:
        raise ConfigurationError(f"unknown condition {condition!r}")
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def render_sample(scene: SyntheticScene, grid: BevGrid, token: str,
                  sweeps: int = 5) -> Sample:
    """Scene -> Sample: radar, images, condition post-processing, GT rasters.

    The rng stream is derived from the scene seed and consumed in a fixed
    order (radar, then image colors, then condition noise), keeping the whole
    pipeline bit-reproducible and the radar independent of the condition.
    """
    rng = np.random.default_rng(np.random.SeedSequence([max(scene.seed, 0), 1]))
    radar = make_radar(scene, rng, sweeps=sweeps)
    images = render_images(scene, rng)
    images = apply_condition(images, scene.condition, rng)
    return Sample(token=token, images=images, rig=scene.rig, radar=radar,
                  gt=rasterize_gt(scene, grid), condition=scene.condition,
                  seed=scene.seed)


def generate_sample(token: str, seed: int, grid: BevGrid | None = None,
                    rig: CameraRig | None = None, params: SceneParams | None = None,
                    condition: str = "day", sweeps: int = 5) -> Sample:
    grid = grid or BevGrid()
    scene = generate_scene(seed, params=params, grid=grid, rig=rig, condition=condition)
    return render_sample(scene, grid, token, sweeps=sweeps)


def generate_dataset(root: str, num: int, seed: int,
                     grid: BevGrid | None = None, rig: CameraRig | None = None,
                     params: SceneParams | None = None,
                     conditions: tuple[str, ...] = CONDITIONS,
                     sweeps: int = 5) -> list[str]:
    """Write `num` samples plus split.json and dataset.json under `root`.

    Conditions are assigned round-robin, so requesting N samples over
    ("day", "rain", "night") yields near-equal subsets.  Sample i is built
    from a child seed of (seed, i); tokens are zero padded so directory
    listings sort in generation order.
    """
    import os

    from .data import save_dataset_info, save_sample, save_split
    from .metrics import ConditionSplit

    if num <= 0:
        raise ConfigurationError(f"need a positive sample count, got {num}")
    for cond in conditions:
        if cond not in CONDITIONS:
            raise ConfigurationError(f"unknown condition {cond!r}")
    grid = grid or BevGrid()
    rig = rig or default_rig()
    os.makedirs(root, exist_ok=True)
    width = max(4, len(str(num - 1)))
    tokens: list[str] = []
    by_condition: dict[str, list[str]] = {c: [] for c in CONDITIONS}
    seeds = np.random.SeedSequence([max(seed, 0), 7]).generate_state(num)
    for i in range(num):
        token = f"sample_{i:0{width}d}"
        condition = conditions[i % len(conditions)]
        sample = generate_sample(token, int(seeds[i]), grid=grid, rig=rig,
                                 params=params, condition=condition, sweeps=sweeps)
        save_sample(sample, root)
        tokens.append(token)
        by_condition[condition].append(token)
    save_split(ConditionSplit(tokens={c: tuple(t) for c, t in by_condition.items()}),
               os.path.join(root, "split.json"))
    save_dataset_info(root, grid, rig[0].height, rig[0].width, len(rig),
                      seed=seed, num=num)
    return tokens
