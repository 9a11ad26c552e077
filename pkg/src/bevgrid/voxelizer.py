"""Binary (BO) and semantic (SE) occupancy labels from point clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EMPTY = 0

# Stable ids published in docs/formats.md. Id 0 is "empty".
SEMANTIC_CLASSES = (
    "empty",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
)
NUM_SE_CLASSES = len(SEMANTIC_CLASSES)  # 17
NUM_BO_CLASSES = 2


def _exact_dim(lo: float, hi: float, res: float, axis: str) -> int:
    q = (hi - lo) / res
    n = round(q)
    if n < 1 or abs(q - n) > 1e-9 * max(1.0, abs(q)):
        raise ValueError(f"{axis} extent {hi - lo} is not a positive integer multiple of resolution {res}")
    return int(n)


@dataclass(frozen=True)
class VoxelGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    r_x: float
    r_y: float
    r_z: float

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        for axis in "xyz":
            lo, hi, r = self.lower[axis], self.upper[axis], self.res[axis]
            if not hi > lo:
                raise ValueError(f"{axis}_max must exceed {axis}_min")
            if not r > 0:
                raise ValueError(f"r_{axis} must be positive")
        object.__setattr__(
            self,
            "_dims",
            tuple(_exact_dim(self.lower[a], self.upper[a], self.res[a], a) for a in "xyz"),
        )

    @property
    def lower(self) -> dict:
        return {"x": self.x_min, "y": self.y_min, "z": self.z_min}

    @property
    def upper(self) -> dict:
        return {"x": self.x_max, "y": self.y_max, "z": self.z_max}

    @property
    def res(self) -> dict:
        return {"x": self.r_x, "y": self.r_y, "z": self.r_z}

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def resolution(self) -> np.ndarray:
        return np.array([self.r_x, self.r_y, self.r_z])

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> VoxelGridSpec:
        return cls(**{name: d[name] for name in cls.__dataclass_fields__})

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny, _ = self.dims
        xs = self.x_min + (np.arange(nx) + 0.5) * self.r_x
        ys = self.y_min + (np.arange(ny) + 0.5) * self.r_y
        return xs, ys


@dataclass(frozen=True, eq=False)
class BinaryVoxelGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError("binary grid must be 3-D")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("binary grid cells must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def dims(self):
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, BinaryVoxelGrid) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    class_ids: np.ndarray
    labeled_mask: np.ndarray
    num_classes: int = NUM_SE_CLASSES

    def __post_init__(self):
        c = np.asarray(self.class_ids)
        m = np.asarray(self.labeled_mask)
        if c.ndim != 3 or c.shape != m.shape:
            raise ValueError("class_ids and labeled_mask must be equal-shape 3-D grids")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("class_ids must be integers")
        c = c.astype(np.int64)
        if c.size and (c.min() < 0 or c.max() >= self.num_classes):
            raise ValueError(f"class_ids must lie in [0, {self.num_classes - 1}]")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("labeled_mask must be 0/1")
        m = m.astype(bool)
        if np.any((c != EMPTY) & ~m):
            raise ValueError("every non-empty voxel must be labeled")
        object.__setattr__(self, "class_ids", c)
        object.__setattr__(self, "labeled_mask", m)

    @property
    def dims(self):
        return self.class_ids.shape

    def __eq__(self, other):
        return (
            isinstance(other, SemanticVoxelGrid)
            and self.num_classes == other.num_classes
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.labeled_mask, other.labeled_mask)
        )

    @classmethod
    def from_binary(cls, grid: BinaryVoxelGrid) -> SemanticVoxelGrid:
        """BO labels as a fully supervised 2-class grid."""
        return cls(grid.values.astype(np.int64), np.ones(grid.dims, dtype=bool), NUM_BO_CLASSES)


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.asarray(self.labels).reshape(-1)
        if len(p) != len(lab):
            raise ValueError(f"{len(p)} points but {len(lab)} labels")
        if lab.size and not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "labels", lab.astype(np.int64))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> LabeledPointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


def point_to_index(spec: VoxelGridSpec, p) -> tuple[int, int, int] | None:
    """Voxel index of a single point, or ``None`` when it lies outside the bounds."""
    idx, ok = points_to_indices(spec, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        return None
    return tuple(int(i) for i in idx[0])


def points_to_indices(spec: VoxelGridSpec, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``point_to_index``: ``(indices (K, 3) int64, in_bounds (K,) bool)``.

    Rows of ``indices`` where ``in_bounds`` is false are meaningless.
    """
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    lo, hi, res = spec.mins, spec.maxs, spec.resolution
    ok = np.all((p >= lo) & (p <= hi), axis=1)
    idx = np.floor((p - lo) / res)
    # p == max lands one past the end; clamp it onto the last voxel.
    idx = np.minimum(idx, np.array(spec.dims) - 1)
    idx = np.where(ok[:, None], idx, 0).astype(np.int64)
    return idx, ok


def _linear(spec: VoxelGridSpec, idx: np.ndarray) -> np.ndarray:
    return np.ravel_multi_index(idx.T, spec.dims)


def binary_occupancy(spec: VoxelGridSpec, pts) -> BinaryVoxelGrid:
    idx, ok = points_to_indices(spec, pts)
    flat = np.zeros(int(np.prod(spec.dims)), dtype=np.uint8)
    flat[_linear(spec, idx[ok])] = 1
    return BinaryVoxelGrid(flat.reshape(spec.dims))


def semantic_occupancy(
    spec: VoxelGridSpec, cloud: LabeledPointCloud, num_classes: int = NUM_SE_CLASSES
) -> SemanticVoxelGrid:
    """Majority-vote semantic labels; ties go to the lowest class id.

    Voxels without points are class 0 and unlabeled (masked out of supervision).
    """
    labels = cloud.labels
    if labels.size and (labels.min() < 1 or labels.max() > num_classes - 1):
        bad = labels[(labels < 1) | (labels > num_classes - 1)][0]
        raise ValueError(f"point label {bad} outside [1, {num_classes - 1}]")
    idx, ok = points_to_indices(spec, cloud.points)
    n_cells = int(np.prod(spec.dims))
    class_ids = np.zeros(n_cells, dtype=np.int64)
    mask = np.zeros(n_cells, dtype=bool)
    if np.any(ok):
        lin = _linear(spec, idx[ok])
        pairs, counts = np.unique(lin * num_classes + labels[ok], return_counts=True)
        cell, lab = np.divmod(pairs, num_classes)
        # Within each cell: highest count first, then lowest label.
        order = np.lexsort((lab, -counts, cell))
        cell, lab = cell[order], lab[order]
        first = np.ones(len(cell), dtype=bool)
        first[1:] = cell[1:] != cell[:-1]
        class_ids[cell[first]] = lab[first]
        mask[cell[first]] = True
    return SemanticVoxelGrid(class_ids.reshape(spec.dims), mask.reshape(spec.dims), num_classes)
