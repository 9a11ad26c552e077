"""Central finite-difference checks for scalar objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FD_STEP = 1e-6
REL_TOL = 1e-4


def central_difference(fn, x: np.ndarray, index: tuple, step: float = FD_STEP) -> float:
    xp = x.copy()
    xm = x.copy()
    xp[index] += step
    xm[index] -= step
    return (fn(xp) - fn(xm)) / (2.0 * step)


def resolution_floor(loss: float, step: float = FD_STEP, tol: float = REL_TOL) -> float:
    """Gradient magnitude below which central-difference roundoff (~4 eps |loss| / step) exceeds ``tol``."""
    return 4 * np.finfo(np.float64).eps * max(1.0, abs(loss)) / step / tol


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    max_rel_err: float
    samples: int
    step: float
    tol: float
    floor: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def to_dict(self) -> dict:
        return {"max_rel_err": self.max_rel_err, "samples": self.samples, "step": self.step,
                "tol": self.tol,
                "denominator_floor": self.floor, "passed": self.passed}


def check_gradient(fn, x, grad, samples: int = 20, seed: int = 0, step: float = FD_STEP,
                   tol: float = REL_TOL) -> GradCheckReport:
    """Compare ``grad`` with central differences of ``fn`` at up to ``samples`` random coordinates."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} != input shape {x.shape}")
    gen = np.random.Generator(np.random.PCG64(seed))
    flat = np.arange(x.size)
    if x.size > samples:
        flat = np.sort(gen.choice(x.size, size=samples, replace=False))
    floor = resolution_floor(fn(x), step, tol)
    worst = 0.0
    for f in flat:
        idx = np.unravel_index(int(f), x.shape)
        worst = max(worst, relative_error(float(grad[idx]), central_difference(fn, x, idx, step), floor))
    return GradCheckReport(worst, len(flat), step, tol, floor)
