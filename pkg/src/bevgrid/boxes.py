"""Box sets: M x 11 rows of location(3) | scale(3) | orientation(2) | velocity(2) | attribute(1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DETECTION_CLASSES = (
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
)
NUM_DETECTION_CLASSES = len(DETECTION_CLASSES)

BOX_DIM = 11
LOC = slice(0, 3)
SCALE = slice(3, 6)  # width, length, height
ORIENT = slice(6, 8)  # sin(yaw), cos(yaw)
VEL = slice(8, 10)
ATTR = 10


@dataclass(frozen=True, eq=False)
class BoxSet:
    rows: np.ndarray
    classes: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, BOX_DIM)
        m = len(rows)
        if not np.all(np.isfinite(rows)):
            raise ValueError("box rows must be finite")
        if np.any(rows[:, SCALE] <= 0):
            raise ValueError("box scales must be positive")
        norm = rows[:, 6] ** 2 + rows[:, 7] ** 2
        if np.any(np.abs(norm - 1.0) > 1e-3):
            raise ValueError("orientation slot must hold (sin, cos) of a yaw angle")
        classes = np.zeros(m, dtype=np.int64) if self.classes is None else np.asarray(self.classes).reshape(-1)
        if len(classes) != m:
            raise ValueError("one class id per box required")
        if m and (classes.min() < 0 or classes.max() >= NUM_DETECTION_CLASSES):
            raise ValueError(f"class ids must lie in [0, {NUM_DETECTION_CLASSES - 1}]")
        scores = self.scores
        if scores is not None:
            scores = np.asarray(scores, dtype=np.float64).reshape(-1)
            if len(scores) != m:
                raise ValueError("one score per box required")
            if np.any(~((scores >= 0) & (scores <= 1))):
                raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "classes", classes.astype(np.int64))
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, BoxSet):
            return NotImplemented
        same_scores = (self.scores is None and other.scores is None) or (
            self.scores is not None and other.scores is not None and np.array_equal(self.scores, other.scores)
        )
        return np.array_equal(self.rows, other.rows) and np.array_equal(self.classes, other.classes) and same_scores

    @classmethod
    def empty(cls, with_scores: bool = False) -> BoxSet:
        return cls(np.zeros((0, BOX_DIM)), np.zeros(0, dtype=np.int64), np.zeros(0) if with_scores else None)

    @property
    def yaw(self) -> np.ndarray:
        return np.arctan2(self.rows[:, 6], self.rows[:, 7])


def make_row(center, size, yaw, velocity=(0.0, 0.0), attribute=0.0) -> np.ndarray:
    return np.array([*center, *size, np.sin(yaw), np.cos(yaw), *velocity, attribute], dtype=np.float64)
