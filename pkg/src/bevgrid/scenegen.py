"""Deterministic synthetic driving scenes and the geometric depth oracle.

Scenes are laid out on square ground tiles aligned with the occupancy voxels. Each tile carries
one ground class (road, sidewalk, terrain, ...) or a static vertical class (manmade, vegetation),
and at most one object. Vehicles sit on road tiles, pedestrians and bicycles on sidewalk tiles.
Object points live strictly above the ground layer, so every occupied voxel holds a single label.

Randomness comes only from ``numpy.random.Generator(PCG64(seed)).random()`` (uniform doubles);
integer choices are ``floor(u * n)``. This keeps seeds reproducible across numpy versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import DETECTION_CLASSES, BoxSet, make_row
from .geometry import (
    Camera,
    CameraIntrinsics,
    CameraRig,
    RigidTransform,
    camera_looking_at_yaw,
    compose,
    invert,
    project,
    rot_z,
    transform_points,
    translate,
)
from .view_transform import DepthBins, DepthDistribution
from .voxelizer import SEMANTIC_CLASSES, LabeledPointCloud, VoxelGridSpec

SE = {name: i for i, name in enumerate(SEMANTIC_CLASSES)}
DET = {name: i for i, name in enumerate(DETECTION_CLASSES)}

ATTRIBUTES = (
    "none",
    "cycle.with_rider",
    "cycle.without_rider",
    "pedestrian.moving",
    "pedestrian.standing",
    "pedestrian.sitting_lying_down",
    "vehicle.moving",
    "vehicle.parked",
    "vehicle.stopped",
)

# (width, length, height) in meters, nominal
_SIZE_PRIOR = {
    "car": (1.9, 4.6, 1.7),
    "truck": (2.5, 6.9, 2.9),
    "construction_vehicle": (2.8, 6.4, 3.2),
    "bus": (2.9, 11.0, 3.5),
    "trailer": (2.9, 12.3, 3.9),
    "barrier": (2.5, 0.5, 1.0),
    "motorcycle": (0.8, 2.1, 1.5),
    "bicycle": (0.6, 1.7, 1.3),
    "pedestrian": (0.7, 0.7, 1.8),
    "traffic_cone": (0.4, 0.4, 1.1),
}
_ON_ROAD = ("car", "truck", "construction_vehicle", "bus", "trailer", "motorcycle", "barrier", "traffic_cone")
_ON_SIDEWALK = ("pedestrian", "bicycle")
_MAX_SPEED = {"car": 10.0, "truck": 8.0, "bus": 8.0, "trailer": 6.0, "construction_vehicle": 3.0,
              "motorcycle": 10.0, "bicycle": 5.0, "pedestrian": 1.5, "barrier": 0.0, "traffic_cone": 0.0}

NUSCENES_CAMERAS = ("CAM_FRONT", "CAM_FRONT_RIGHT", "CAM_FRONT_LEFT", "CAM_BACK", "CAM_BACK_LEFT", "CAM_BACK_RIGHT")
_CAMERA_YAW_DEG = (0.0, -55.0, 55.0, 180.0, 110.0, -110.0)


@dataclass(frozen=True)
class SceneConfig:
    grid: VoxelGridSpec = field(
        default_factory=lambda: VoxelGridSpec(-51.2, 51.2, -51.2, 51.2, -5.0, 3.0, 0.8, 0.8, 0.5)
    )
    tile_cells: int = 8
    ground_layer: int = 6
    num_objects: int = 12
    ground_points_per_tile: int = 24
    static_points_per_tile: int = 48
    points_per_object: int = 64
    num_cameras: int = 6
    image_height: int = 256
    image_width: int = 704
    horizontal_fov_deg: float = 70.0
    frame_dt: float = 0.5
    keep_out_radius: float = 6.0

    def __post_init__(self):
        nx, ny, nz = self.grid.dims
        if self.tile_cells < 1 or nx % self.tile_cells or ny % self.tile_cells:
            raise ValueError("tile_cells must divide the grid's x and y cell counts")
        if not 0 <= self.ground_layer < nz - 1:
            raise ValueError("ground_layer must leave at least one layer above it")
        for name in ("num_objects", "ground_points_per_tile", "static_points_per_tile", "points_per_object"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ground_points_per_tile < 1:
            raise ValueError("ground_points_per_tile must be positive")
        if not 1 <= self.num_cameras <= len(_CAMERA_YAW_DEG):
            raise ValueError(f"num_cameras must be in [1, {len(_CAMERA_YAW_DEG)}]")
        if self.image_height < 1 or self.image_width < 1 or not 0 < self.horizontal_fov_deg < 180:
            raise ValueError("bad camera geometry")

    @property
    def tile_size(self) -> float:
        return self.tile_cells * self.grid.r_x

    @property
    def ground_top(self) -> float:
        return self.grid.z_min + (self.ground_layer + 1) * self.grid.r_z

    @property
    def ground_z(self) -> float:
        return self.grid.z_min + (self.ground_layer + 0.5) * self.grid.r_z

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "grid"}
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        kw = dict(d)
        if "grid" in kw:
            kw["grid"] = VoxelGridSpec.from_dict(kw["grid"])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class Scene:
    rig: CameraRig
    cloud: LabeledPointCloud
    boxes: BoxSet
    ego_curr: RigidTransform
    ego_adj: RigidTransform
    seed: int = 0

    @property
    def ego_motion(self) -> RigidTransform:
        """Maps current-frame points into the adjacent frame."""
        return compose(invert(self.ego_adj), self.ego_curr)

    def adjacent_cloud(self) -> LabeledPointCloud:
        """The (static) cloud as seen from the adjacent timestamp's ego frame."""
        return LabeledPointCloud(transform_points(self.ego_motion, self.cloud.points), self.cloud.labels)


def default_rig(cfg: SceneConfig = SceneConfig()) -> CameraRig:
    w, h = cfg.image_width, cfg.image_height
    f = 0.5 * w / math.tan(math.radians(cfg.horizontal_fov_deg) / 2)
    k = CameraIntrinsics(f, f, w / 2.0, h / 2.0)
    cams = tuple(
        Camera(k, camera_looking_at_yaw(math.radians(_CAMERA_YAW_DEG[i]))) for i in range(cfg.num_cameras)
    )
    return CameraRig(cams, h, w, NUSCENES_CAMERAS[: cfg.num_cameras])


class _Uniform:
    """Uniform-double stream; the only RNG primitive the generator uses."""

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def u(self, size=None):
        return self._gen.random(size)

    def between(self, lo, hi, size=None):
        return lo + (hi - lo) * self.u(size)

    def index(self, n: int) -> int:
        return min(int(math.floor(self.u() * n)), n - 1)


def _tile_layout(cfg: SceneConfig, rng: _Uniform) -> np.ndarray:
    """Semantic class per ground tile: a road cross through the origin lined with sidewalks."""
    nx, ny, _ = cfg.grid.dims
    tx, ty = nx // cfg.tile_cells, ny // cfg.tile_cells
    cx, cy = (tx - 1) / 2.0, (ty - 1) / 2.0
    layout = np.zeros((tx, ty), dtype=np.int64)
    other = (SE["terrain"], SE["other_flat"], SE["manmade"], SE["vegetation"])
    for i in range(tx):
        for j in range(ty):
            di, dj = abs(i - cx), abs(j - cy)
            if min(di, dj) <= 0.5:
                layout[i, j] = SE["driveable_surface"]
            elif min(di, dj) <= 1.5:
                layout[i, j] = SE["sidewalk"]
            else:
                layout[i, j] = other[rng.index(len(other))]
    return layout


def _fit_size(size, max_half_diag: float):
    w, l, h = size
    half_diag = 0.5 * math.hypot(w, l)
    if half_diag > max_half_diag:
        s = max_half_diag / half_diag
        w, l = w * s, l * s
    return w, l, h


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Build a labeled scene; identical ``(seed, cfg)`` always gives an identical scene."""
    seed = int(seed)
    rng = _Uniform(seed)
    grid = cfg.grid
    ts = cfg.tile_size
    layout = _tile_layout(cfg, rng)
    tx, ty = layout.shape
    margin = 0.02 * ts

    def tile_origin(i, j):
        return grid.x_min + i * ts, grid.y_min + j * ts

    def tile_center(i, j):
        x0, y0 = tile_origin(i, j)
        return x0 + ts / 2, y0 + ts / 2

    # Candidate tiles per surface, excluding the ego's surroundings.
    free = {}
    for surface in ("driveable_surface", "sidewalk"):
        cells = [
            (i, j)
            for i in range(tx)
            for j in range(ty)
            if layout[i, j] == SE[surface] and math.hypot(*tile_center(i, j)) > cfg.keep_out_radius + ts / 2
        ]
        free[surface] = cells
    n_road, n_walk = len(free["driveable_surface"]), len(free["sidewalk"])
    if cfg.num_objects > n_road + n_walk:
        raise ValueError(f"cannot place {cfg.num_objects} objects on {n_road + n_walk} placeable tiles")

    occupied = {}
    rows, classes = [], []
    for _ in range(cfg.num_objects):
        want_walk = rng.u() < 0.3
        surface = "sidewalk" if want_walk else "driveable_surface"
        if not free[surface]:
            surface = "driveable_surface" if want_walk else "sidewalk"
        pool = _ON_SIDEWALK if surface == "sidewalk" else _ON_ROAD
        name = pool[rng.index(len(pool))]
        i, j = free[surface].pop(rng.index(len(free[surface])))
        w, l, h = (s * rng.between(0.9, 1.1) for s in _SIZE_PRIOR[name])
        w, l, h = _fit_size((w, l, h), ts / 2 - 2 * margin)
        cx, cy = tile_center(i, j)
        yaw = rng.between(-math.pi, math.pi)
        speed = rng.u() * _MAX_SPEED[name]
        vel = (speed * math.cos(yaw), speed * math.sin(yaw))
        if name in ("barrier", "traffic_cone"):
            attr = ATTRIBUTES.index("none")
        elif name == "pedestrian":
            attr = ATTRIBUTES.index("pedestrian.moving" if speed > 0.3 else "pedestrian.standing")
        elif name in ("bicycle", "motorcycle"):
            attr = ATTRIBUTES.index("cycle.with_rider" if speed > 0.3 else "cycle.without_rider")
        else:
            attr = ATTRIBUTES.index("vehicle.moving" if speed > 0.3 else "vehicle.parked")
        cz = cfg.ground_top + h / 2
        rows.append(make_row((cx, cy, cz), (w, l, h), yaw, vel, attr))
        classes.append(DET[name])
        occupied[(i, j)] = (name, cx, cy, yaw, w, l, h)

    pts, labels = [], []
    z_top = grid.z_max - 0.5 * grid.r_z
    for i in range(tx):
        for j in range(ty):
            x0, y0 = tile_origin(i, j)
            cls = int(layout[i, j])
            n = cfg.ground_points_per_tile
            gx = rng.between(x0 + margin, x0 + ts - margin, n)
            gy = rng.between(y0 + margin, y0 + ts - margin, n)
            pts.append(np.stack([gx, gy, np.full(n, cfg.ground_z)], axis=1))
            labels.append(np.full(n, cls))
            if cls in (SE["manmade"], SE["vegetation"]) and cfg.static_points_per_tile:
                n = cfg.static_points_per_tile
                height = rng.between(2.0, z_top - cfg.ground_top)
                sx = rng.between(x0 + margin, x0 + ts - margin, n)
                sy = rng.between(y0 + margin, y0 + ts - margin, n)
                sz = cfg.ground_top + (0.01 + 0.98 * rng.u(n)) * height
                pts.append(np.stack([sx, sy, sz], axis=1))
                labels.append(np.full(n, cls))
            if (i, j) in occupied and cfg.points_per_object:
                name, cx, cy, yaw, w, l, h = occupied[(i, j)]
                n = cfg.points_per_object
                # local box frame: x along length, y along width
                lx = (rng.u(n) - 0.5) * l
                ly = (rng.u(n) - 0.5) * w
                lz = (0.01 + 0.98 * rng.u(n)) * h
                c, s = math.cos(yaw), math.sin(yaw)
                ox = cx + c * lx - s * ly
                oy = cy + s * lx + c * ly
                pts.append(np.stack([ox, oy, cfg.ground_top + lz], axis=1))
                labels.append(np.full(n, SE[name]))

    cloud = LabeledPointCloud(np.concatenate(pts), np.concatenate(labels))
    boxes = BoxSet(np.array(rows).reshape(-1, 11), np.array(classes, dtype=np.int64))

    ego_yaw = rng.between(-math.pi, math.pi)
    ego_curr = compose(translate(rng.between(-500, 500), rng.between(-500, 500), 0.0), rot_z(ego_yaw))
    speed = rng.between(0.0, 10.0)
    step = compose(translate(speed * cfg.frame_dt, 0.0, 0.0), rot_z(rng.between(-0.05, 0.05)))
    ego_adj = compose(ego_curr, invert(step))
    return Scene(default_rig(cfg), cloud, boxes, ego_curr, ego_adj, seed)


def render_camera(
    points,
    labels,
    camera: Camera,
    image_size: tuple[int, int],
    feature_hw: tuple[int, int],
    bins: DepthBins,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point depth one-hot (D x H x W) and label map (H x W, 0 = nothing) for one camera.

    A point falls in feature cell ``(row, col)`` when its projected pixel lies in that cell's
    footprint. The nearest point per cell wins (ties: lower point index); if its depth lies outside
    the bins the cell stays empty.
    """
    h, w = feature_hw
    img_h, img_w = image_size
    dist = np.zeros((bins.num_bins, h, w))
    label_map = np.zeros((h, w), dtype=np.int64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return dist, label_map
    cam_pts = transform_points(invert(camera.cam_to_lidar), pts)
    front = cam_pts[:, 2] > 0
    u, v, z = project(camera.intrinsics, cam_pts[front])
    ids = np.flatnonzero(front)
    inside = (u >= 0) & (u < img_w) & (v >= 0) & (v < img_h)
    u, v, z, ids = u[inside], v[inside], z[inside], ids[inside]
    if len(z) == 0:
        return dist, label_map
    col = np.minimum(np.floor(u / (img_w / w)), w - 1).astype(np.int64)
    row = np.minimum(np.floor(v / (img_h / h)), h - 1).astype(np.int64)
    cell = row * w + col
    order = np.lexsort((ids, z, cell))
    cell, z, ids = cell[order], z[order], ids[order]
    first = np.ones(len(cell), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    cell, z, ids = cell[first], z[first], ids[first]
    b = bins.bin_index(z)
    ok = b >= 0
    r, c = np.divmod(cell[ok], w)
    dist[b[ok], r, c] = 1.0
    label_map[r, c] = np.asarray(labels).reshape(-1)[ids[ok]]
    return dist, label_map


def oracle_depth(
    scene: Scene,
    camera_index: int,
    feature_hw: tuple[int, int] = (16, 44),
    bins: DepthBins = DepthBins(),
    cloud: LabeledPointCloud | None = None,
) -> DepthDistribution:
    """One-hot depth at the bin of the nearest scene point per feature cell (1 x D x H x W)."""
    if not 0 <= camera_index < len(scene.rig):
        raise IndexError(f"camera {camera_index} not in rig of {len(scene.rig)}")
    cloud = scene.cloud if cloud is None else cloud
    d, _ = render_camera(
        cloud.points,
        cloud.labels,
        scene.rig.cameras[camera_index],
        (scene.rig.image_height, scene.rig.image_width),
        feature_hw,
        bins,
    )
    return DepthDistribution(d[None], bins)
