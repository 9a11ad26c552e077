"""Depth-weighted lift-splat into the BEV plane and temporal BEV concatenation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .geometry import CameraIntrinsics, CameraRig, RigidTransform, transform_points, unproject
from .voxelizer import VoxelGridSpec

DEFAULT_C_BEV = 128
_SNAP = 1e-9


@dataclass(frozen=True)
class DepthBins:
    """Uniform depth bins; bin ``d`` is centred at ``d_min + (d + 0.5) * pitch``."""

    d_min: float = 1.0
    d_max: float = 60.0
    num_bins: int = 59

    def __post_init__(self):
        if not (self.d_max > self.d_min > 0):
            raise ValueError("need 0 < d_min < d_max")
        if int(self.num_bins) < 1:
            raise ValueError("need at least one depth bin")
        object.__setattr__(self, "num_bins", int(self.num_bins))

    @property
    def pitch(self) -> float:
        return (self.d_max - self.d_min) / self.num_bins

    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.num_bins) + 0.5) * self.pitch

    def bin_index(self, depth):
        """Bin containing ``depth``; -1 outside ``[d_min, d_max]`` (d_max goes to the last bin)."""
        depth = np.asarray(depth, dtype=np.float64)
        ok = (depth >= self.d_min) & (depth <= self.d_max)
        idx = np.minimum(np.floor((depth - self.d_min) / self.pitch), self.num_bins - 1)
        return np.where(ok, idx, -1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    """N x D x H x W per-pixel depth weights; non-negative, each pixel sums to at most 1."""

    values: np.ndarray
    bins: DepthBins

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"depth distribution must be N x D x H x W, got {v.shape}")
        if v.shape[1] != self.bins.num_bins:
            raise ValueError(f"depth axis has {v.shape[1]} entries but bins define {self.bins.num_bins}")
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError("depth weights must be finite and non-negative")
        if np.any(v.sum(axis=1) > 1 + 1e-6):
            raise ValueError("per-pixel depth weights must sum to at most 1")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class BevFeature:
    values: np.ndarray  # C x X x Y
    grid: VoxelGridSpec

    def __post_init__(self):
        v = np.asarray(self.values)
        nx, ny, _ = self.grid.dims
        if v.ndim != 3 or v.shape[1:] != (nx, ny):
            raise ValueError(f"BEV feature shape {v.shape} does not match grid {nx}x{ny}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def build_frustum(h: int, w: int, bins: DepthBins, k: CameraIntrinsics, image_size=None) -> np.ndarray:
    """Camera-frame points for every (depth bin, feature row, feature column): D x H x W x 3.

    Feature cell ``(row, col)`` sits at image pixel ``((col + 0.5) * sx, (row + 0.5) * sy)`` with
    ``sx = image_width / W``; ``image_size`` defaults to ``(h, w)``.
    """
    if h < 1 or w < 1:
        raise ValueError("feature map must be at least 1x1")
    img_h, img_w = image_size if image_size is not None else (h, w)
    u = (np.arange(w) + 0.5) * (img_w / w)
    v = (np.arange(h) + 0.5) * (img_h / h)
    depth = bins.centers()
    return unproject(k, u[None, None, :], v[None, :, None], depth[:, None, None])


def _camera_splat_matrix(
    frustum_lidar: np.ndarray, weights: np.ndarray, grid: VoxelGridSpec
) -> sparse.csr_matrix:
    """(X*Y) x (H*W) matrix whose entry sums depth weights of the pixel's points in that cell."""
    nx, ny, _ = grid.dims
    d, h, w = weights.shape
    x = frustum_lidar[..., 0]
    y = frustum_lidar[..., 1]
    ok = (x >= grid.x_min) & (x <= grid.x_max) & (y >= grid.y_min) & (y <= grid.y_max) & (weights != 0)
    ix = np.minimum(np.floor((x[ok] - grid.x_min) / grid.r_x), nx - 1).astype(np.int64)
    iy = np.minimum(np.floor((y[ok] - grid.y_min) / grid.r_y), ny - 1).astype(np.int64)
    pix = np.broadcast_to(np.arange(h * w).reshape(1, h, w), (d, h, w))[ok]
    # csr construction sums duplicates in a fixed order, so the result is deterministic.
    return sparse.csr_matrix((weights[ok], (ix * ny + iy, pix)), shape=(nx * ny, h * w))


def lift_splat(
    f,
    depth: DepthDistribution,
    rig: CameraRig,
    grid: VoxelGridSpec,
    threads: int = 1,
) -> BevFeature:
    """Lift per-pixel features along depth bins and sum them into BEV cells.

    Each frustum point contributes ``f[n, :, h, w] * depth[n, bin, h, w]`` to the cell holding its
    lidar-frame (x, y); z is not binned. Output has the input channel count.
    Per-camera partial sums may run on ``threads`` workers; they are always added in camera order.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4:
        raise ValueError(f"image features must be N x C x H x W, got {f.shape}")
    n, c, h, w = f.shape
    dv = depth.values
    if dv.shape[0] != n or dv.shape[2:] != (h, w):
        raise ValueError(f"features {f.shape} and depth {dv.shape} disagree on N, H or W")
    if len(rig) != n:
        raise ValueError(f"rig has {len(rig)} cameras but features have N={n}")
    nx, ny, _ = grid.dims

    def one_camera(i: int) -> np.ndarray:
        cam = rig.cameras[i]
        frustum = build_frustum(h, w, depth.bins, cam.intrinsics, (rig.image_height, rig.image_width))
        pts = transform_points(cam.cam_to_lidar, frustum)
        s = _camera_splat_matrix(pts, dv[i], grid)
        return np.asarray(s @ f[i].reshape(c, h * w).T)

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one_camera, range(n)))
    else:
        parts = [one_camera(i) for i in range(n)]
    out = np.zeros((nx * ny, c))
    for part in parts:
        out += part
    return BevFeature(out.T.reshape(c, nx, ny), grid)


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < _SNAP, r, x)


def bilinear_sample(plane: np.ndarray, fi: np.ndarray, fj: np.ndarray) -> np.ndarray:
    """Sample a C x X x Y plane at fractional cell indices; taps outside the plane read 0."""
    c, nx, ny = plane.shape
    fi, fj = _snap(fi), _snap(fj)
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    ti, tj = fi - i0, fj - j0
    out = np.zeros((c,) + fi.shape)
    for di, wi in ((0, 1.0 - ti), (1, ti)):
        for dj, wj in ((0, 1.0 - tj), (1, tj)):
            ii, jj = i0 + di, j0 + dj
            wgt = wi * wj
            ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny) & (wgt != 0)
            vals = np.zeros((c,) + fi.shape)
            vals[:, ok] = plane[:, ii[ok], jj[ok]] * wgt[ok]
            out += vals
    return out


def warp_bev(adj: BevFeature, ego_motion: RigidTransform) -> BevFeature:
    """Resample ``adj`` onto the current grid; ``ego_motion`` maps current-frame points to adj-frame points."""
    grid = adj.grid
    xs, ys = grid.cell_centers_xy()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    q = transform_points(ego_motion, pts)
    fi = (q[..., 0] - grid.x_min) / grid.r_x - 0.5
    fj = (q[..., 1] - grid.y_min) / grid.r_y - 0.5
    return BevFeature(bilinear_sample(np.asarray(adj.values, dtype=np.float64), fi, fj), grid)


def temporal_concat(curr: BevFeature, adj: BevFeature, ego_motion: RigidTransform) -> BevFeature:
    """Align ``adj`` into the current ego frame and stack it after ``curr`` along channels."""
    if curr.grid != adj.grid:
        raise ValueError("current and adjacent BEV features use different grids")
    if curr.channels != adj.channels:
        raise ValueError(f"channel mismatch: {curr.channels} vs {adj.channels}")
    warped = warp_bev(adj, ego_motion)
    return BevFeature(np.concatenate([curr.values, warped.values], axis=0), curr.grid)
