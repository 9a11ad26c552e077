"""Training losses with closed-form gradients.

Detection branch: Gaussian focal loss on class heatmaps plus L1 on matched box rows.
Occupancy branch: class-weighted cross entropy plus Lovasz-softmax.
Every loss returns ``(value, gradient)`` with the gradient shaped like the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxSet, NUM_DETECTION_CLASSES
from .voxelizer import NUM_BO_CLASSES, NUM_SE_CLASSES, BinaryVoxelGrid, SemanticVoxelGrid, VoxelGridSpec

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    gamma: float = 4.0
    mu_od: float = 0.25
    mu_oc: float = 1.0
    omega: float = 10.0
    class_weights: tuple = field(default_factory=lambda: (1.0,) * NUM_SE_CLASSES)

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        for name in ("alpha", "gamma", "mu_od", "mu_oc", "omega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.class_weights or any(not w > 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")

    @classmethod
    def semantic(cls, **kw) -> LossConfig:
        return cls(mu_oc=1.0, class_weights=(1.0,) * NUM_SE_CLASSES, **kw)

    @classmethod
    def binary(cls, **kw) -> LossConfig:
        # empty : occupied = 1 : 2
        return cls(mu_oc=6.0, class_weights=(1.0, 2.0), **kw)

    @classmethod
    def for_variant(cls, variant: str) -> LossConfig:
        if variant.lower() == "se":
            return cls.semantic()
        if variant.lower() == "bo":
            return cls.binary()
        raise ValueError(f"unknown variant {variant!r} (expected 'bo' or 'se')")


def clamp_heatmap(values) -> np.ndarray:
    """Clip raw probabilities into the open interval accepted by the focal loss."""
    return np.clip(np.asarray(values, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


# --------------------------------------------------------------------------- heatmap targets


def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """CenterNet radius so that a box shifted by it keeps ``min_overlap`` IoU (sizes in cells)."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * c1)) / 2
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_kernel(radius: int) -> np.ndarray:
    sigma = (2 * radius + 1) / 6.0
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    k[k < np.finfo(np.float64).eps * k.max()] = 0.0
    return k


def gt_heatmap(
    boxes: BoxSet,
    grid: VoxelGridSpec,
    mode: str = "gaussian",
    min_radius: int = 2,
    min_overlap: float = 0.1,
) -> np.ndarray:
    """Render boxes into a 10 x X x Y target heatmap on the grid's x/y cells.

    ``one_hot`` writes 1.0 at each center cell; ``gaussian`` stamps a CenterPoint-style kernel
    (peak 1.0, radius from the box footprint) and keeps the elementwise max on overlaps.
    Centers outside the grid are skipped.
    """
    if mode not in ("one_hot", "gaussian"):
        raise ValueError(f"unknown heatmap mode {mode!r}")
    nx, ny, _ = grid.dims
    heat = np.zeros((NUM_DETECTION_CLASSES, nx, ny))
    for row, cls in zip(boxes.rows, boxes.classes):
        x, y = row[0], row[1]
        if not (grid.x_min <= x <= grid.x_max and grid.y_min <= y <= grid.y_max):
            continue
        i = min(int(math.floor((x - grid.x_min) / grid.r_x)), nx - 1)
        j = min(int(math.floor((y - grid.y_min) / grid.r_y)), ny - 1)
        if mode == "one_hot":
            heat[cls, i, j] = 1.0
            continue
        width, length = row[3] / grid.r_y, row[4] / grid.r_x
        radius = max(min_radius, int(gaussian_radius(length, width, min_overlap)))
        kern = gaussian_kernel(radius)
        i0, i1 = max(0, i - radius), min(nx, i + radius + 1)
        j0, j1 = max(0, j - radius), min(ny, j + radius + 1)
        patch = kern[i0 - i + radius : i1 - i + radius, j0 - j + radius : j1 - j + radius]
        np.maximum(heat[cls, i0:i1, j0:j1], patch, out=heat[cls, i0:i1, j0:j1])
    return heat


# --------------------------------------------------------------------------- detection losses


def gaussian_focal_loss(h, gt, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Gaussian focal loss, summed and divided by the number of exact-center cells (at least 1)."""
    h = np.asarray(h, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if h.shape != gt.shape:
        raise ValueError(f"heatmap shape {h.shape} != target shape {gt.shape}")
    if np.any(~((h > 0) & (h < 1))):
        raise ValueError("predicted heatmap must lie strictly inside (0, 1); use clamp_heatmap")
    if np.any(~((gt >= 0) & (gt <= 1))):
        raise ValueError("target heatmap must lie in [0, 1]")
    a, g = cfg.alpha, cfg.gamma
    pos = np.floor(gt)
    neg_w = (1.0 - gt) ** g
    log_h, log_1mh = np.log(h), np.log1p(-h)
    loss = -pos * log_h * (1.0 - h) ** a - neg_w * log_1mh * h**a
    norm = max(1.0, float(pos.sum()))
    d_pos = -pos * ((1.0 - h) ** a / h - a * log_h * (1.0 - h) ** (a - 1))
    d_neg = -neg_w * (a * h ** (a - 1) * log_1mh - h**a / (1.0 - h))
    return float(loss.sum() / norm), (d_pos + d_neg) / norm


def _box_rows(b) -> np.ndarray:
    return b.rows if isinstance(b, BoxSet) else np.asarray(b, dtype=np.float64)


def l1_box_loss(b, gt) -> tuple[float, np.ndarray]:
    """Mean over matched pairs of the summed absolute row difference."""
    pr, gr = _box_rows(b), _box_rows(gt)
    if pr.shape != gr.shape:
        raise ValueError(f"box count/shape mismatch: {pr.shape} vs {gr.shape}")
    m = len(pr)
    if m == 0:
        raise ValueError("L1 box loss needs at least one matched pair")
    diff = pr - gr
    return float(np.abs(diff).sum() / m), np.sign(diff) / m


# --------------------------------------------------------------------------- occupancy losses


def _occupancy_targets(labels, mask, n_vox: int):
    """Flatten labels and resolve which voxels are supervised."""
    if isinstance(labels, SemanticVoxelGrid):
        lab = labels.class_ids.reshape(-1)
        m = labels.labeled_mask.reshape(-1) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    elif isinstance(labels, BinaryVoxelGrid):
        lab = labels.values.reshape(-1).astype(np.int64)
        m = np.ones(lab.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    else:
        lab = np.asarray(labels).reshape(-1).astype(np.int64)
        m = np.ones(lab.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if lab.shape[0] != n_vox or m.shape[0] != n_vox:
        raise ValueError(f"labels cover {lab.shape[0]} voxels, predictions cover {n_vox}")
    return lab, m


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def weighted_cross_entropy(logits, labels, cfg: LossConfig = LossConfig(), mask=None) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross entropy, averaged over supervised voxels.

    ``logits`` is O x (voxels...). A SemanticVoxelGrid target supervises only its labeled voxels;
    a BinaryVoxelGrid or plain label array supervises every voxel unless ``mask`` says otherwise.
    """
    z = np.asarray(logits, dtype=np.float64)
    o = z.shape[0]
    flat = z.reshape(o, -1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("logits must be finite")
    lab, m = _occupancy_targets(labels, mask, flat.shape[1])
    if not m.any():
        raise ValueError("no supervised voxels")
    if len(cfg.class_weights) != o:
        raise ValueError(f"{len(cfg.class_weights)} class weights for {o} classes")
    if lab[m].min() < 0 or lab[m].max() >= o:
        raise ValueError("labels out of range for the logits")
    w = np.asarray(cfg.class_weights)
    zs = flat[:, m] - flat[:, m].max(axis=0, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=0))
    y = lab[m]
    cols = np.arange(len(y))
    nll = lse - zs[y, cols]
    count = float(m.sum())
    loss = float((w[y] * nll).sum() / count)
    p = np.exp(zs - lse)
    p[y, cols] -= 1.0
    grad = np.zeros_like(flat)
    grad[:, m] = p * (w[y] / count)
    return loss, grad.reshape(z.shape)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, mask=None, check: bool = True) -> tuple[float, np.ndarray]:
    """Lovasz-softmax over the classes present in the supervised labels.

    ``probs`` is O x (voxels...). Errors are sorted in descending order with ties kept in voxel
    order, which fixes the subgradient. ``check`` validates that each voxel's probabilities sum to 1.
    """
    p = np.asarray(probs, dtype=np.float64)
    o = p.shape[0]
    flat = p.reshape(o, -1)
    lab, m = _occupancy_targets(labels, mask, flat.shape[1])
    if not m.any():
        raise ValueError("all voxels are masked out")
    if check and np.any(np.abs(flat[:, m].sum(axis=0) - 1.0) > 1e-6):
        raise ValueError("per-voxel probabilities must sum to 1")
    vp, vl = flat[:, m], lab[m]
    present = np.unique(vl)
    grad_v = np.zeros_like(vp)
    total = 0.0
    for c in present:
        fg = (vl == c).astype(np.float64)
        err = np.abs(fg - vp[c])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(err[order] @ g)
        # d err_i / d p_i(c) is -1 on the class's own voxels and +1 elsewhere
        grad_v[c, order] = g * np.where(fg[order] > 0, -1.0, 1.0)
    n_present = len(present)
    grad = np.zeros_like(flat)
    grad[:, m] = grad_v / n_present
    return total / n_present, grad.reshape(p.shape)


# --------------------------------------------------------------------------- compositions


def od_loss(l_g: float, l_1: float, cfg: LossConfig = LossConfig()) -> float:
    return l_g + cfg.mu_od * l_1


def oc_loss(l_lova: float, l_ce: float, cfg: LossConfig = LossConfig()) -> float:
    return l_lova + cfg.mu_oc * l_ce


def total_loss(l_od: float, l_oc: float, cfg: LossConfig = LossConfig()) -> float:
    return l_od + cfg.omega * l_oc


def detection_objective(h, gt_h, boxes, gt_boxes, cfg: LossConfig = LossConfig()):
    """Detection-branch loss and gradients ``{"heatmap": ..., "boxes": ...}``."""
    lg, dh = gaussian_focal_loss(h, gt_h, cfg)
    l1, db = l1_box_loss(boxes, gt_boxes)
    return od_loss(lg, l1, cfg), {"heatmap": dh, "boxes": cfg.mu_od * db}


def occupancy_objective(logits, labels, cfg: LossConfig = LossConfig(), mask=None):
    """Occupancy-branch loss on raw logits and its gradient w.r.t. the logits.

    The Lovasz term sees softmax probabilities; its gradient is pulled back through the softmax.
    """
    z = np.asarray(logits, dtype=np.float64)
    o = z.shape[0]
    l_ce, d_ce = weighted_cross_entropy(z, labels, cfg, mask)
    p = _softmax(z.reshape(o, -1))
    l_lv, d_p = lovasz_softmax(p, labels, mask, check=False)
    d_p = d_p.reshape(o, -1)
    d_lv = p * (d_p - (p * d_p).sum(axis=0, keepdims=True))
    return oc_loss(l_lv, l_ce, cfg), d_lv.reshape(z.shape) + cfg.mu_oc * d_ce


def total_objective(h, gt_h, boxes, gt_boxes, logits, labels, cfg: LossConfig = LossConfig(), mask=None):
    l_od, g_od = detection_objective(h, gt_h, boxes, gt_boxes, cfg)
    l_oc, g_oc = occupancy_objective(logits, labels, cfg, mask)
    grads = dict(g_od)
    grads["logits"] = cfg.omega * g_oc
    return total_loss(l_od, l_oc, cfg), grads


def num_classes_for(variant: str) -> int:
    return NUM_SE_CLASSES if variant.lower() == "se" else NUM_BO_CLASSES
