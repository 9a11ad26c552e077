"""Rigid transforms, pinhole intrinsics and camera rigs.

Everything here is float64. Camera frames follow the usual pinhole convention
(x right, y down, z forward); the lidar/ego frame is x forward, y left, z up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A 4x4 homogeneous SE(3) matrix, validated once at construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"RigidTransform needs a 4x4 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("RigidTransform matrix has non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"bottom row must be (0,0,0,1), got {m[3]}")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation block must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> RigidTransform:
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform({self.matrix.tolist()!r})"


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform.from_rt(np.eye(3), [x, y, z])


def rot_z(angle: float) -> RigidTransform:
    """Rotation about +z by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    return RigidTransform.from_rt([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [0.0, 0.0, 0.0])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform that applies ``b`` first, then ``a``."""
    return RigidTransform.from_rt(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    r_t = t.rotation.T
    return RigidTransform.from_rt(r_t, -r_t @ t.translation)


def transform_points(t: RigidTransform, pts) -> np.ndarray:
    """Apply ``t`` to an (..., 3) array of points."""
    p = np.asarray(pts, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {p.shape}")
    return p @ t.rotation.T + t.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def unproject(k: CameraIntrinsics, u, v, d) -> np.ndarray:
    """Lift pixel(s) ``(u, v)`` at depth ``d`` to camera-frame points.

    Broadcasts over array inputs; returns shape ``broadcast(u, v, d).shape + (3,)``.
    """
    u, v, d = np.broadcast_arrays(
        np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), np.asarray(d, dtype=np.float64)
    )
    if np.any(~(d > 0)):
        raise ValueError("depth must be strictly positive")
    return np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=-1)


def project(k: CameraIntrinsics, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame points; returns ``(u, v, depth)``.

    Points with non-positive depth yield non-finite or meaningless pixels; callers filter on depth.
    """
    p = np.asarray(pts, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p[..., 0] / z + k.cx
        v = k.fy * p[..., 1] / z + k.cy
    return u, v, z


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    cam_to_lidar: RigidTransform


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    image_height: int
    image_width: int
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 1:
            raise ValueError("a camera rig needs at least one camera")
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "image_height", int(self.image_height))
        object.__setattr__(self, "image_width", int(self.image_width))
        names = tuple(self.names) or tuple(f"cam{i}" for i in range(len(cams)))
        if len(names) != len(cams):
            raise ValueError("one name per camera required")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.cameras)


# Camera optical frame (x right, y down, z forward) expressed in a lidar frame
# (x forward, y left, z up) for a camera looking straight down lidar +x.
CAM_TO_LIDAR_FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_looking_at_yaw(yaw: float, position=(0.0, 0.0, 0.0)) -> RigidTransform:
    """cam->lidar transform of a level camera whose optical axis has heading ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    r_yaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform.from_rt(r_yaw @ CAM_TO_LIDAR_FORWARD, position)
