"""Tissue volumes (TBV/TIV) from native-space posteriors under a mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .volume import BinaryMask, TissueMaps, Volume

_GM, _WM, _CSF = 0, 1, 2


@dataclass(frozen=True)
class VolumeReport:
    tbv_ml: float
    tiv_ml: float
    per_class_ml: tuple[float, float, float, float, float, float]
    mask_volume_ml: float


def tissue_volume(p: Volume, mask: BinaryMask) -> float:
    """Probability mass inside the mask times voxel volume, in ml."""
    if not p.grid.same_geometry(mask.grid):
        raise GeometryError("probability map and mask must share a grid")
    return float(p.data[mask.data].sum()) * p.grid.voxel_volume_mm3 / 1000.0


def brain_volumes(t: TissueMaps, mask: BinaryMask) -> VolumeReport:
    """Per-class volumes; TBV = GM+WM, TIV = TBV+CSF (exact identity)."""
    if not t.grid.same_geometry(mask.grid):
        raise GeometryError("tissue maps and mask must share a grid")
    vox_ml = t.grid.voxel_volume_mm3 / 1000.0
    per_class = tuple(
        float(t.data[..., c][mask.data].sum()) * vox_ml for c in range(t.data.shape[-1])
    )
    tbv = per_class[_GM] + per_class[_WM]
    tiv = tbv + per_class[_CSF]
    mask_ml = float(mask.n_foreground) * vox_ml
    return VolumeReport(tbv, tiv, per_class, mask_ml)
