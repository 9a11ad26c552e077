"""Task-stage pyramid decode with cross-branch (OD <-> OC) feature fusion.

Fusion runs before every x2 upsampling step of the decode:

    f_od' = (1 - lam) * G_cd(f_oc) + lam * f_od
    f_oc' = (1 - lam) * G_dc(f_od) + lam * f_oc

Both right-hand sides use the pre-fusion features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NUM_LEVELS = 3
C_TO_D = "C->D"
D_TO_C = "D->C"


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.9

    def __post_init__(self):
        lam = float(self.lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True, eq=False)
class FusionAdapter:
    """Per-cell linear channel map (C_out x C_in)."""

    weight: np.ndarray
    direction: str = C_TO_D

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("adapter weight must be a C_out x C_in matrix")
        if not np.all(np.isfinite(w)):
            raise ValueError("adapter weight has non-finite entries")
        if self.direction not in (C_TO_D, D_TO_C):
            raise ValueError(f"direction must be {C_TO_D!r} or {D_TO_C!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def identity(cls, channels: int, direction: str = C_TO_D) -> FusionAdapter:
        return cls(np.eye(channels), direction)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, f: np.ndarray) -> np.ndarray:
        if f.shape[0] != self.c_in:
            raise ValueError(f"adapter expects {self.c_in} channels, got {f.shape[0]}")
        return np.einsum("oc,c...->o...", self.weight, f)


def upsample_bilinear(f, factor: int) -> np.ndarray:
    """Bilinear upsampling of a (C x) X x Y plane, half-pixel (align_corners=False) convention."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    f = np.asarray(f, dtype=np.float64)
    if factor == 1:
        return f.copy()
    squeeze = f.ndim == 2
    if squeeze:
        f = f[None]
    i0, i1, t = _interp_taps(f.shape[1], factor)
    rows = f[:, i0, :] * (1.0 - t)[None, :, None] + f[:, i1, :] * t[None, :, None]
    j0, j1, s = _interp_taps(f.shape[2], factor)
    out = rows[:, :, j0] * (1.0 - s) + rows[:, :, j1] * s
    return out[0] if squeeze else out


def _interp_taps(n: int, factor: int):
    """Source index pairs and weights for one axis (edge-clamped)."""
    dst = np.arange(n * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, src - i0


def modality_fuse(f_od, f_oc, a_cd: FusionAdapter, a_dc: FusionAdapter, cfg: FusionConfig):
    """Simultaneous lambda-weighted exchange between the OD and OC features."""
    f_od = np.asarray(f_od, dtype=np.float64)
    f_oc = np.asarray(f_oc, dtype=np.float64)
    if f_od.shape[1:] != f_oc.shape[1:]:
        raise ValueError(f"spatial shapes differ: {f_od.shape[1:]} vs {f_oc.shape[1:]}")
    if a_cd.c_in != f_oc.shape[0] or a_cd.c_out != f_od.shape[0]:
        raise ValueError("C->D adapter does not map OC channels to OD channels")
    if a_dc.c_in != f_od.shape[0] or a_dc.c_out != f_oc.shape[0]:
        raise ValueError("D->C adapter does not map OD channels to OC channels")
    lam = cfg.lam
    if lam == 1.0:
        return f_od.copy(), f_oc.copy()
    return (1.0 - lam) * a_cd(f_oc) + lam * f_od, (1.0 - lam) * a_dc(f_od) + lam * f_oc


@dataclass(frozen=True, eq=False)
class PyramidFeatures:
    """Three levels at 1/2, 1/4 and 1/8 of the full BEV resolution (finest first)."""

    levels: tuple

    def __post_init__(self):
        levels = tuple(np.asarray(lv, dtype=np.float64) for lv in self.levels)
        if len(levels) != NUM_LEVELS:
            raise ValueError(f"a pyramid has exactly {NUM_LEVELS} levels, got {len(levels)}")
        for lv in levels:
            if lv.ndim != 3:
                raise ValueError("pyramid levels must be C x X x Y")
        for fine, coarse in zip(levels, levels[1:]):
            if fine.shape[0] != coarse.shape[0]:
                raise ValueError("all pyramid levels must share the channel count")
            if fine.shape[1] != 2 * coarse.shape[1] or fine.shape[2] != 2 * coarse.shape[2]:
                raise ValueError(f"spatial dims must halve level to level: {fine.shape} -> {coarse.shape}")
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    @property
    def full_shape(self) -> tuple[int, int]:
        return 2 * self.levels[0].shape[1], 2 * self.levels[0].shape[2]


def identity_adapters(c_od: int, c_oc: int) -> list[tuple[FusionAdapter, FusionAdapter]]:
    """Identity-initialized adapter pairs, one per fuse step; non-square maps get a padded eye."""
    return [
        (FusionAdapter(np.eye(c_od, c_oc), C_TO_D), FusionAdapter(np.eye(c_oc, c_od), D_TO_C))
        for _ in range(NUM_LEVELS)
    ]


def pyramid_fuse(
    pyr_od: PyramidFeatures,
    pyr_oc: PyramidFeatures,
    adapters,
    cfg: FusionConfig,
    fuse: bool = True,
):
    """Decode both pyramids to full resolution, fusing before each x2 upsample.

    ``adapters[k]`` is the ``(C->D, D->C)`` pair for step k, coarsest first. The 1/4 and 1/2 levels
    are added as skips after the first two upsamples; the last step has no skip.
    ``fuse=False`` gives the independent per-branch decode.
    """
    if len(pyr_od.levels) != len(pyr_oc.levels):
        raise ValueError("pyramids have different level counts")
    for a, b in zip(pyr_od.levels, pyr_oc.levels):
        if a.shape[1:] != b.shape[1:]:
            raise ValueError(f"pyramid level dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    if len(adapters) != NUM_LEVELS:
        raise ValueError(f"need {NUM_LEVELS} adapter pairs, got {len(adapters)}")
    od, oc = pyr_od.levels[-1], pyr_oc.levels[-1]
    for step in range(NUM_LEVELS):
        if fuse:
            a_cd, a_dc = adapters[step]
            od, oc = modality_fuse(od, oc, a_cd, a_dc, cfg)
        od, oc = upsample_bilinear(od, 2), upsample_bilinear(oc, 2)
        skip = NUM_LEVELS - 2 - step
        if skip >= 0:
            od = od + pyr_od.levels[skip]
            oc = oc + pyr_oc.levels[skip]
    return od, oc


def pyramid_decode(pyr: PyramidFeatures) -> np.ndarray:
    """Fusion-free decode of a single branch."""
    out, _ = pyramid_fuse(pyr, pyr, identity_adapters(pyr.channels, pyr.channels), FusionConfig(1.0), fuse=False)
    return out


def save_adapters(path, adapters) -> None:
    doc = {
        "version": 1,
        "steps": [{"c_to_d": a.weight.tolist(), "d_to_c": b.weight.tolist()} for a, b in adapters],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_adapters(path) -> list[tuple[FusionAdapter, FusionAdapter]]:
    doc = json.loads(Path(path).read_text())
    steps = doc.get("steps")
    if not isinstance(steps, list) or len(steps) != NUM_LEVELS:
        raise ValueError(f"{path}: expected {NUM_LEVELS} adapter steps")
    return [(FusionAdapter(s["c_to_d"], C_TO_D), FusionAdapter(s["d_to_c"], D_TO_C)) for s in steps]
