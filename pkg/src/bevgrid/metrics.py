"""Occupancy mIoU and nuScenes-style detection metrics.

The detection side follows the nuScenes devkit conventions: greedy center-distance matching at
{0.5, 1, 2, 4} m, 101-point recall grid with recall < 0.1 and precision < 0.1 clipped, TP errors
measured at 2 m, and NDS = (5 * mAP + sum(1 - min(1, tp_err))) / 10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import ATTR, DETECTION_CLASSES, ORIENT, SCALE, VEL, BoxSet
from .voxelizer import SemanticVoxelGrid

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
RECALL_POINTS = 101
TP_METRICS = ("trans_err", "scale_err", "orient_err", "vel_err", "attr_err")
CONVENTION = (
    "nuscenes-devkit detection (center distance, 101-pt AP, min_recall=0.1, min_precision=0.1; "
    "classes without ground truth are left out of the means)"
)

# TP metrics that are undefined for a class and left out of its mean (devkit convention).
_UNDEFINED_TP = {
    "traffic_cone": ("orient_err", "vel_err", "attr_err"),
    "barrier": ("vel_err", "attr_err"),
}


# --------------------------------------------------------------------------- occupancy


def voxel_miou(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, ignore_index: int | None = None):
    """Per-class IoU over the ground truth's labeled voxels, and their mean.

    Returns ``(iou, miou)`` where ``iou`` maps class id to IoU for classes seen in pred or gt.
    """
    if pred.dims != gt.dims:
        raise ValueError(f"grid dims differ: {pred.dims} vs {gt.dims}")
    m = gt.labeled_mask
    p = pred.class_ids[m]
    g = gt.class_ids[m]
    n = max(pred.num_classes, gt.num_classes)
    inter = np.bincount(g[p == g], minlength=n)
    p_cnt = np.bincount(p, minlength=n)
    g_cnt = np.bincount(g, minlength=n)
    union = p_cnt + g_cnt - inter
    iou = {int(c): float(inter[c] / union[c]) for c in range(n) if union[c] > 0 and c != ignore_index}
    miou = float(np.mean(list(iou.values()))) if iou else float("nan")
    return iou, miou


# --------------------------------------------------------------------------- matching


@dataclass
class MatchResult:
    matches: list  # (pred_index, gt_index, distance), in processing order
    unmatched_pred: list
    unmatched_gt: list


def _score_order(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def match_by_center_distance(pred: BoxSet, gt: BoxSet, threshold: float) -> MatchResult:
    """Greedy matching by descending score to the nearest unmatched same-class GT.

    A match needs BEV center distance strictly below ``threshold``; equal distances go to the
    lower GT index.
    """
    scores = pred.scores if pred.scores is not None else np.ones(len(pred))
    taken = np.zeros(len(gt), dtype=bool)
    matches, unmatched = [], []
    for pi in _score_order(scores):
        cand = np.flatnonzero((gt.classes == pred.classes[pi]) & ~taken)
        if len(cand):
            d = np.hypot(gt.rows[cand, 0] - pred.rows[pi, 0], gt.rows[cand, 1] - pred.rows[pi, 1])
            k = int(np.argmin(d))
            if d[k] < threshold:
                taken[cand[k]] = True
                matches.append((int(pi), int(cand[k]), float(d[k])))
                continue
        unmatched.append(int(pi))
    return MatchResult(matches, unmatched, [int(i) for i in np.flatnonzero(~taken)])


# --------------------------------------------------------------------------- TP error terms


def yaw_diff(a: float, b: float, period: float = 2 * math.pi) -> float:
    """Smallest absolute angle between two yaws, in [0, period / 2]."""
    d = (a - b) % period
    return float(min(d, period - d))


def scale_iou(size_a, size_b) -> float:
    """3D IoU of two boxes sharing center and heading."""
    a, b = np.asarray(size_a, dtype=np.float64), np.asarray(size_b, dtype=np.float64)
    inter = float(np.prod(np.minimum(a, b)))
    return inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def _tp_errors(p_row, g_row, class_name: str) -> dict:
    period = math.pi if class_name == "barrier" else 2 * math.pi
    p_yaw = math.atan2(p_row[ORIENT][0], p_row[ORIENT][1])
    g_yaw = math.atan2(g_row[ORIENT][0], g_row[ORIENT][1])
    return {
        "trans_err": float(math.hypot(p_row[0] - g_row[0], p_row[1] - g_row[1])),
        "scale_err": 1.0 - scale_iou(p_row[SCALE], g_row[SCALE]),
        "orient_err": yaw_diff(p_yaw, g_yaw, period),
        "vel_err": float(np.linalg.norm(p_row[VEL] - g_row[VEL])),
        "attr_err": 0.0 if round(p_row[ATTR]) == round(g_row[ATTR]) else 1.0,
    }


# --------------------------------------------------------------------------- accumulation / AP


@dataclass
class MetricData:
    """Precision, confidence and TP-error curves on the 101-point recall grid."""

    precision: np.ndarray
    recall: np.ndarray
    confidence: np.ndarray
    errors: dict
    npos: int

    @property
    def max_recall_ind(self) -> int:
        nz = np.flatnonzero(self.confidence > 0)
        return int(nz[-1]) if len(nz) else 0

    @classmethod
    def no_predictions(cls, npos: int) -> MetricData:
        grid = np.linspace(0, 1, RECALL_POINTS)
        zeros = np.zeros(RECALL_POINTS)
        return cls(zeros, grid, zeros.copy(), {k: np.ones(RECALL_POINTS) for k in TP_METRICS}, npos)


def accumulate(preds, gts, class_id: int, threshold: float) -> MetricData | None:
    """PR and TP-error curves of one class over a list of scenes; ``None`` if it has no GT."""
    class_name = DETECTION_CLASSES[class_id]
    npos = sum(int(np.sum(g.classes == class_id)) for g in gts)
    if npos == 0:
        return None
    # Score-sorted list of (score, scene, pred index) across scenes; ties keep scene/pred order.
    entries = []
    for s, p in enumerate(preds):
        scores = p.scores if p.scores is not None else np.ones(len(p))
        for i in np.flatnonzero(p.classes == class_id):
            entries.append((float(scores[i]), s, int(i)))
    if not entries:
        return MetricData.no_predictions(npos)
    order = sorted(range(len(entries)), key=lambda k: (-entries[k][0], k))
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp, fp, conf = [], [], []
    errs = {k: [] for k in TP_METRICS}
    match_conf = []
    for k in order:
        score, s, pi = entries[k]
        g = gts[s]
        cand = np.flatnonzero((g.classes == class_id) & ~taken[s])
        best, best_d = -1, math.inf
        if len(cand):
            prow = preds[s].rows[pi]
            d = np.hypot(g.rows[cand, 0] - prow[0], g.rows[cand, 1] - prow[1])
            j = int(np.argmin(d))
            best, best_d = int(cand[j]), float(d[j])
        if best >= 0 and best_d < threshold:
            taken[s][best] = True
            tp.append(1.0)
            fp.append(0.0)
            for name, v in _tp_errors(preds[s].rows[pi], g.rows[best], class_name).items():
                errs[name].append(v)
            match_conf.append(score)
        else:
            tp.append(0.0)
            fp.append(1.0)
        conf.append(score)
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    conf_a = np.array(conf)
    prec = tp_c / (tp_c + fp_c)
    rec = tp_c / npos
    grid = np.linspace(0, 1, RECALL_POINTS)
    prec_i = np.interp(grid, rec, prec, right=0)
    conf_i = np.interp(grid, rec, conf_a, right=0)
    curves = {}
    if not match_conf:
        curves = {k: np.ones(RECALL_POINTS) for k in TP_METRICS}
    else:
        mc = np.array(match_conf)
        for name in TP_METRICS:
            vals = np.array(errs[name])
            cummean = np.cumsum(vals) / np.arange(1, len(vals) + 1)
            # running mean mapped onto the recall grid through confidence
            curves[name] = np.interp(conf_i[::-1], mc[::-1], cummean[::-1])[::-1]
    return MetricData(prec_i, grid, conf_i, curves, npos)


def calc_ap(md: MetricData, min_recall: float = MIN_RECALL, min_precision: float = MIN_PRECISION) -> float:
    prec = md.precision[round(100 * min_recall) + 1 :] - min_precision
    prec = np.clip(prec, 0.0, None)
    # mean(0.9) / 0.9 can round to just above 1
    return min(1.0, float(np.mean(prec)) / (1.0 - min_precision))


def calc_tp(md: MetricData, metric: str, min_recall: float = MIN_RECALL) -> float:
    first = round(100 * min_recall) + 1
    last = md.max_recall_ind
    if last < first:
        return 1.0
    return float(np.mean(md.errors[metric][first : last + 1]))


def average_precision(preds, gts, class_id: int, threshold: float) -> float | None:
    """AP of one class at one distance threshold over a scene list; ``None`` when the class has no GT."""
    md = accumulate(preds, gts, class_id, threshold)
    return None if md is None else calc_ap(md)


# --------------------------------------------------------------------------- summary


@dataclass(frozen=True)
class TpErrors:
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float

    def __post_init__(self):
        for v in self.as_tuple():
            if not (v >= 0):
                raise ValueError("TP errors must be non-negative")

    def as_tuple(self) -> tuple:
        return (self.mATE, self.mASE, self.mAOE, self.mAVE, self.mAAE)


def nds(mean_ap: float, tp: TpErrors) -> float:
    """nuScenes detection score; each TP error is clipped at 1 before scoring."""
    if not all(math.isfinite(v) for v in (mean_ap, *tp.as_tuple())):
        raise ValueError("NDS inputs must be finite")
    return (5.0 * mean_ap + sum(1.0 - min(1.0, e) for e in tp.as_tuple())) / 10.0


@dataclass
class EvalSummary:
    ap_table: dict  # class name -> {threshold: AP}
    mean_ap: float
    tp_errors: TpErrors
    class_tp: dict  # class name -> {metric: value or nan}
    nds: float
    convention: str = CONVENTION
    thresholds: tuple = field(default=DIST_THRESHOLDS)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "convention": self.convention,
            "distance_thresholds_m": list(self.thresholds),
            "tp_threshold_m": TP_THRESHOLD,
            "mAP": self.mean_ap,
            "NDS": self.nds,
            "tp_errors": {
                "mATE": self.tp_errors.mATE,
                "mASE": self.tp_errors.mASE,
                "mAOE": self.tp_errors.mAOE,
                "mAVE": self.tp_errors.mAVE,
                "mAAE": self.tp_errors.mAAE,
            },
            "per_class_ap": {c: {str(t): ap for t, ap in row.items()} for c, row in self.ap_table.items()},
            "per_class_tp": {c: {k: clean(v) for k, v in row.items()} for c, row in self.class_tp.items()},
        }


def evaluate_detections(preds, gts, thresholds=DIST_THRESHOLDS) -> EvalSummary:
    """Full detection evaluation over paired per-scene prediction and GT box sets.

    Classes without any GT are skipped. Empty evaluations score mAP 0 and TP errors 1.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} GT sets")
    ap_table, class_tp = {}, {}
    for cid, name in enumerate(DETECTION_CLASSES):
        row = {}
        for th in thresholds:
            md = accumulate(preds, gts, cid, th)
            if md is None:
                break
            row[th] = calc_ap(md)
            if th == TP_THRESHOLD:
                class_tp[name] = {
                    m: (float("nan") if m in _UNDEFINED_TP.get(name, ()) else calc_tp(md, m)) for m in TP_METRICS
                }
        if row:
            ap_table[name] = row
            if name not in class_tp:
                md = accumulate(preds, gts, cid, TP_THRESHOLD)
                class_tp[name] = {
                    m: (float("nan") if m in _UNDEFINED_TP.get(name, ()) else calc_tp(md, m)) for m in TP_METRICS
                }
    if ap_table:
        mean_ap = float(np.mean([np.mean(list(r.values())) for r in ap_table.values()]))
        means = []
        for m in TP_METRICS:
            vals = [row[m] for row in class_tp.values() if not math.isnan(row[m])]
            means.append(float(np.mean(vals)) if vals else 1.0)
    else:
        mean_ap, means = 0.0, [1.0] * len(TP_METRICS)
    tp = TpErrors(*means)
    return EvalSummary(ap_table, mean_ap, tp, class_tp, nds(mean_ap, tp), thresholds=tuple(thresholds))
