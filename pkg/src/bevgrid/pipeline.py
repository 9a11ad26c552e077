"""Forward orchestration: scene -> depth -> lift-splat -> temporal concat -> two-branch task stage.

Learned parts (image backbone, task-stage convolutions, heads) are replaced by fixed linear
stand-ins whose weights come from a seeded uniform stream. The point is checking stage contracts
and fusion behaviour, not accuracy.

Stage table for the default config (N=6 cameras, 16x44 feature maps, D=59, 128x128x16 grid):

    image_features      6 x 128 x 16 x 44
    depth               6 x 59 x 16 x 44
    bev_curr            128 x 128 x 128
    bev_adj             128 x 128 x 128
    bev_temporal        256 x 128 x 128
    od_level_1/2        32 x 64 x 64     (od_level_1/4: 32 x 32 x 32, od_level_1/8: 32 x 16 x 16)
    oc_level_1/2 ...    same as the OD levels
    f_od, f_oc          32 x 128 x 128
    heatmap             10 x 128 x 128
    regression          11 x 128 x 128
    occupancy_logits    O x 128 x 128 x 16   (O = 17 for SE, 2 for BO)
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .boxes import BOX_DIM, NUM_DETECTION_CLASSES, BoxSet
from .fusion import FusionConfig, PyramidFeatures, identity_adapters, load_adapters, pyramid_fuse
from .losses import LossConfig
from .scenegen import Scene, render_camera
from .view_transform import DEFAULT_C_BEV, BevFeature, DepthBins, DepthDistribution, lift_splat, temporal_concat
from .voxelizer import (
    NUM_BO_CLASSES,
    NUM_SE_CLASSES,
    LabeledPointCloud,
    SemanticVoxelGrid,
    VoxelGridSpec,
    binary_occupancy,
    semantic_occupancy,
)


EMPTY_BIAS = 0.1
LEVEL_NAMES = ("level_1/2", "level_1/4", "level_1/8")


class StageError(RuntimeError):
    """A stage produced or received data violating its contract."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}': {message}")


@dataclass(frozen=True)
class PipelineConfig:
    grid: VoxelGridSpec = field(
        default_factory=lambda: VoxelGridSpec(-51.2, 51.2, -51.2, 51.2, -5.0, 3.0, 0.8, 0.8, 0.5)
    )
    bins: DepthBins = field(default_factory=DepthBins)
    feature_hw: tuple = (16, 44)
    c_bev: int = DEFAULT_C_BEV
    c_task: int = 32
    lam: float = 0.9
    adapters_path: str | None = None
    variant: str = "se"
    head_seed: int = 0
    max_detections: int = 100
    score_min: float = 0.05
    threads: int = 1

    def __post_init__(self):
        if self.variant not in ("se", "bo"):
            raise ValueError("variant must be 'se' or 'bo'")
        nx, ny, _ = self.grid.dims
        if nx % 8 or ny % 8:
            raise ValueError("grid x/y cell counts must be divisible by 8 for the 3-level pyramid")
        if self.c_bev < 1 or self.c_task < 1 or len(self.feature_hw) != 2 or min(self.feature_hw) < 1:
            raise ValueError("channel counts and feature size must be positive")
        FusionConfig(self.lam)
        object.__setattr__(self, "feature_hw", tuple(int(v) for v in self.feature_hw))

    @property
    def num_occ_classes(self) -> int:
        return NUM_SE_CLASSES if self.variant == "se" else NUM_BO_CLASSES

    @property
    def loss(self) -> LossConfig:
        return LossConfig.for_variant(self.variant)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("grid", "bins")}
        d["feature_hw"] = list(self.feature_hw)
        d["grid"] = self.grid.to_dict()
        d["bins"] = {"d_min": self.bins.d_min, "d_max": self.bins.d_max, "num_bins": self.bins.num_bins}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        kw = dict(d)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "grid" in kw:
            kw["grid"] = VoxelGridSpec.from_dict(kw["grid"])
        if "bins" in kw:
            kw["bins"] = DepthBins(**kw["bins"])
        if "feature_hw" in kw:
            kw["feature_hw"] = tuple(kw["feature_hw"])
        return cls(**kw)


# --------------------------------------------------------------------------- seeded weights


def seeded_weight(seed: int, stream: int, shape) -> np.ndarray:
    """Uniform(-1, 1) / sqrt(fan_in) weights from PCG64 stream ``(seed, stream)``."""
    gen = np.random.Generator(np.random.PCG64([seed, stream]))
    fan_in = shape[-1] if len(shape) > 1 else 1
    return (2.0 * gen.random(shape) - 1.0) / math.sqrt(fan_in)


_STREAMS = {"backbone": 1, "od_in": 10, "od_l2": 11, "od_l3": 12, "oc_in": 20, "oc_l2": 21, "oc_l3": 22,
            "heat": 30, "reg": 31, "occ": 40}


def _mix(w: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.einsum("oc,c...->o...", w, f)


def _avgpool2(f: np.ndarray) -> np.ndarray:
    c, x, y = f.shape
    return f.reshape(c, x // 2, 2, y // 2, 2).mean(axis=(2, 4))


def task_pyramid(bev: np.ndarray, seed: int, branch: str, c_task: int) -> PyramidFeatures:
    """Three-level stand-in for the task-stage ResNet: channel mix, ReLU and 2x average pooling."""
    w_in = seeded_weight(seed, _STREAMS[f"{branch}_in"], (c_task, bev.shape[0]))
    l1 = np.maximum(_avgpool2(_mix(w_in, bev)), 0.0)
    l2 = np.maximum(_avgpool2(_mix(seeded_weight(seed, _STREAMS[f"{branch}_l2"], (c_task, c_task)), l1)), 0.0)
    l3 = np.maximum(_avgpool2(_mix(seeded_weight(seed, _STREAMS[f"{branch}_l3"], (c_task, c_task)), l2)), 0.0)
    return PyramidFeatures((l1, l2, l3))


# --------------------------------------------------------------------------- heads / decode


def heatmap_head(f_od: np.ndarray, seed: int) -> np.ndarray:
    """10 x X x Y scores in [0, 1); zero features give a zero heatmap."""
    z = _mix(seeded_weight(seed, _STREAMS["heat"], (NUM_DETECTION_CLASSES, f_od.shape[0])), f_od)
    return -np.expm1(-np.maximum(z, 0.0))


def regression_head(f_od: np.ndarray, seed: int, grid: VoxelGridSpec) -> np.ndarray:
    """11 x X x Y planes: (dx, dy) cell offsets, z (m), size (m), (sin, cos), velocity, attribute."""
    raw = _mix(seeded_weight(seed, _STREAMS["reg"], (BOX_DIM, f_od.shape[0])), f_od)
    out = np.empty_like(raw)
    out[0:2] = 0.5 * np.tanh(raw[0:2])
    out[2] = grid.z_min + 0.5 * (grid.z_max - grid.z_min) + raw[2]
    out[3:6] = np.exp(np.clip(raw[3:6], -3.0, 3.0))
    norm = np.hypot(raw[6], raw[7])
    safe = np.where(norm > 0, norm, 1.0)
    out[6] = np.where(norm > 0, raw[6] / safe, 0.0)
    out[7] = np.where(norm > 0, raw[7] / safe, 1.0)
    out[8:10] = raw[8:10]
    out[10] = np.clip(np.round(np.abs(raw[10])), 0, 8)
    return out


def occupancy_head(f_oc: np.ndarray, seed: int, num_classes: int, nz: int) -> np.ndarray:
    """O x X x Y x Z logits; the empty class carries a small positive bias so zero features predict empty."""
    w = seeded_weight(seed, _STREAMS["occ"], (num_classes * nz, f_oc.shape[0]))
    logits = _mix(w, f_oc).reshape(num_classes, nz, *f_oc.shape[1:]).transpose(0, 2, 3, 1)
    logits[0] += EMPTY_BIAS
    return logits


def _local_peaks(h: np.ndarray) -> np.ndarray:
    """3x3 local maxima per class plane; in a plateau only the first cell in row-major order counts."""
    c, nx, ny = h.shape
    pad = np.full((c, nx + 2, ny + 2), -np.inf)
    pad[:, 1:-1, 1:-1] = h
    peak = np.ones(h.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[:, 1 + di : 1 + di + nx, 1 + dj : 1 + dj + ny]
            earlier = di < 0 or (di == 0 and dj < 0)
            peak &= (h > nb) if earlier else (h >= nb)
    return peak


def decode_heatmap(h, reg, k: int, score_min: float, grid: VoxelGridSpec) -> BoxSet:
    """Top-k local maxima above ``score_min`` turned into scored boxes.

    Regression rows are copied verbatim except the first two entries, which are sub-cell offsets
    converted to meters: ``x = x_min + (i + 0.5 + dx) * r_x`` (same for y).
    Equal scores are ordered by (class, row, column).
    """
    h = np.asarray(h, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if reg.shape != (BOX_DIM,) + h.shape[1:]:
        raise ValueError(f"regression planes {reg.shape} do not match heatmap {h.shape}")
    peak = _local_peaks(h) & (h > score_min)
    cls, ii, jj = np.nonzero(peak)
    if len(cls) == 0 or k <= 0:
        return BoxSet.empty(with_scores=True)
    scores = h[cls, ii, jj]
    order = np.lexsort((jj, ii, cls, -scores))[:k]
    cls, ii, jj, scores = cls[order], ii[order], jj[order], scores[order]
    rows = reg[:, ii, jj].T.copy()
    rows[:, 0] = grid.x_min + (ii + 0.5 + rows[:, 0]) * grid.r_x
    rows[:, 1] = grid.y_min + (jj + 0.5 + rows[:, 1]) * grid.r_y
    return BoxSet(rows, cls, scores)


# --------------------------------------------------------------------------- forward pass


@dataclass
class ForwardResult:
    heatmap: np.ndarray
    regression: np.ndarray
    boxes: BoxSet
    occupancy: SemanticVoxelGrid | None
    occupancy_logits: np.ndarray | None
    intermediates: dict
    trace: list  # (stage, shape) pairs


def _check(stage: str, arr, shape) -> None:
    got = tuple(np.shape(arr))
    if got != tuple(shape):
        raise StageError(stage, f"expected shape {tuple(shape)}, got {got}")
    if not np.all(np.isfinite(arr)):
        raise StageError(stage, "non-finite values")


def _backbone(label_maps: np.ndarray, seed: int, c: int) -> np.ndarray:
    """Image-feature stand-in: one-hot semantic label per feature cell, linearly embedded (empty -> 0)."""
    w = seeded_weight(seed, _STREAMS["backbone"], (c, NUM_SE_CLASSES))
    w[:, 0] = 0.0
    return np.moveaxis(w[:, label_maps], 0, 1)  # N x C x H x W


def frame_features(scene: Scene, cloud: LabeledPointCloud, cfg: PipelineConfig):
    rig = scene.rig
    img = (rig.image_height, rig.image_width)

    def one(i):
        return render_camera(cloud.points, cloud.labels, rig.cameras[i], img, cfg.feature_hw, cfg.bins)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(one, range(len(rig))))
    else:
        parts = [one(i) for i in range(len(rig))]
    depth = DepthDistribution(np.stack([p[0] for p in parts]), cfg.bins)
    feats = _backbone(np.stack([p[1] for p in parts]), cfg.head_seed, cfg.c_bev)
    return feats, depth


def run_forward(scene: Scene, cfg: PipelineConfig = PipelineConfig(), oc_enabled: bool = True) -> ForwardResult:
    """Run every stage in order, validating each stage's output shape.

    ``oc_enabled=False`` skips the occupancy branch entirely (and with it all fusion).
    """
    grid = cfg.grid
    nx, ny, nz = grid.dims
    n = len(scene.rig)
    h, w = cfg.feature_hw
    trace = []
    inter = {}

    def record(stage, arr, shape):
        _check(stage, arr, shape)
        trace.append((stage, tuple(np.shape(arr))))

    bev = {}
    for tag, cloud in (("curr", scene.cloud), ("adj", scene.adjacent_cloud())):
        feats, depth = frame_features(scene, cloud, cfg)
        if tag == "curr":
            record("image_features", feats, (n, cfg.c_bev, h, w))
            record("depth", depth.values, (n, cfg.bins.num_bins, h, w))
        try:
            bev[tag] = lift_splat(feats, depth, scene.rig, grid, threads=cfg.threads)
        except ValueError as e:
            raise StageError("lift_splat", str(e)) from None
        record(f"bev_{tag}", bev[tag].values, (cfg.c_bev, nx, ny))
        inter[f"bev_{tag}"] = bev[tag]
    fused_bev = temporal_concat(bev["curr"], bev["adj"], scene.ego_motion)
    record("bev_temporal", fused_bev.values, (2 * cfg.c_bev, nx, ny))
    inter["bev_temporal"] = fused_bev

    pyr_od = task_pyramid(fused_bev.values, cfg.head_seed, "od", cfg.c_task)
    level_shapes = [(cfg.c_task, nx // s, ny // s) for s in (2, 4, 8)]
    for lv, shp, name in zip(pyr_od.levels, level_shapes, LEVEL_NAMES):
        record(f"od_{name}", lv, shp)
    fuse_cfg = FusionConfig(cfg.lam)
    adapters = load_adapters(cfg.adapters_path) if cfg.adapters_path else identity_adapters(cfg.c_task, cfg.c_task)
    if oc_enabled:
        pyr_oc = task_pyramid(fused_bev.values, cfg.head_seed, "oc", cfg.c_task)
        for lv, shp, name in zip(pyr_oc.levels, level_shapes, LEVEL_NAMES):
            record(f"oc_{name}", lv, shp)
        try:
            f_od, f_oc = pyramid_fuse(pyr_od, pyr_oc, adapters, fuse_cfg)
        except ValueError as e:
            raise StageError("pyramid_fuse", str(e)) from None
    else:
        f_od, _ = pyramid_fuse(pyr_od, pyr_od, adapters, fuse_cfg, fuse=False)
        f_oc = None
    record("f_od", f_od, (cfg.c_task, nx, ny))
    if f_oc is not None:
        record("f_oc", f_oc, (cfg.c_task, nx, ny))
    inter["f_od"] = f_od
    if f_oc is not None:
        inter["f_oc"] = f_oc

    heat = heatmap_head(f_od, cfg.head_seed)
    record("heatmap", heat, (NUM_DETECTION_CLASSES, nx, ny))
    reg = regression_head(f_od, cfg.head_seed, grid)
    record("regression", reg, (BOX_DIM, nx, ny))
    boxes = decode_heatmap(heat, reg, cfg.max_detections, cfg.score_min, grid)

    occ, logits = None, None
    if f_oc is not None:
        o = cfg.num_occ_classes
        logits = occupancy_head(f_oc, cfg.head_seed, o, nz)
        record("occupancy_logits", logits, (o, nx, ny, nz))
        occ = SemanticVoxelGrid(np.argmax(logits, axis=0), np.ones((nx, ny, nz), dtype=bool), o)
    return ForwardResult(heat, reg, boxes, occ, logits, inter, trace)


def occupancy_target(scene: Scene, cfg: PipelineConfig) -> SemanticVoxelGrid:
    """Ground-truth occupancy for the configured variant."""
    if cfg.variant == "se":
        return semantic_occupancy(cfg.grid, scene.cloud)
    return SemanticVoxelGrid.from_binary(binary_occupancy(cfg.grid, scene.cloud.points))


def format_trace(trace) -> str:
    return "\n".join(f"{stage}: {' x '.join(str(d) for d in shape)}" for stage, shape in trace) + "\n"
