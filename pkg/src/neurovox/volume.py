"""Volumetric data model and grid-level image operations.

Conventions used throughout the package:

* A volume is a 3-D scalar array indexed ``[i, j, k]`` plus a voxel-to-world
  affine; world coordinates are millimetres.
* ``affine`` maps homogeneous voxel indices to world coordinates, i.e.
  ``world = affine @ (i, j, k, 1)``.
* Every interpolating operation returns 0 for samples outside the field of
  view.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError, GeometryError

# Tissue channel order used by every multi-channel structure in the package.
TISSUE_CLASSES = ("gm", "wm", "csf", "bone", "soft", "background")
N_CLASSES = len(TISSUE_CLASSES)

# FWHM = sigma * sqrt(8 ln 2) for a Gaussian.
FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))


class Units(enum.Enum):
    """Physical interpretation of voxel values."""

    HU = "hu"
    MR = "mr"
    PROBABILITY = "probability"
    DIMENSIONLESS = "dimensionless"


@dataclass(frozen=True)
class VoxelGrid:
    """Sampling geometry: array shape, voxel spacing (mm), voxel-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.asarray(self.affine, dtype=float).copy()
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise GeometryError(f"dims must be three positive integers, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise GeometryError(f"spacing must be three positive values, got {spacing}")
        if affine.shape != (4, 4):
            raise GeometryError("affine must be 4x4")
        if not np.allclose(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise GeometryError("affine is singular")
        norms = np.linalg.norm(affine[:3, :3], axis=0)
        if not np.allclose(norms, spacing, atol=1e-6):
            raise GeometryError(
                f"spacing {spacing} inconsistent with affine column norms {tuple(norms)}"
            )
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=None) -> "VoxelGrid":
        """Axis-aligned grid. Default origin centres the grid on world zero."""
        dims = tuple(int(d) for d in dims)
        spacing = tuple(float(s) for s in spacing)
        affine = np.eye(4)
        affine[0, 0], affine[1, 1], affine[2, 2] = spacing
        if origin is None:
            origin = [-(d - 1) * s / 2.0 for d, s in zip(dims, spacing)]
        affine[:3, 3] = origin
        return cls(dims, spacing, affine)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume_mm3(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def same_geometry(self, other: "VoxelGrid", atol: float = 0.0) -> bool:
        return self.dims == other.dims and bool(
            np.allclose(self.affine, other.affine, atol=atol, rtol=0.0)
        )

    def voxel_to_world(self, ijk: np.ndarray) -> np.ndarray:
        """Map voxel indices (..., 3) to world mm coordinates (..., 3)."""
        ijk = np.asarray(ijk, dtype=float)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, xyz: np.ndarray) -> np.ndarray:
        """Map world mm coordinates (..., 3) to fractional voxel indices (..., 3)."""
        xyz = np.asarray(xyz, dtype=float)
        inv = np.linalg.inv(self.affine)
        return xyz @ inv[:3, :3].T + inv[:3, 3]

    def voxel_centres(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape dims + (3,)."""
        idx = np.stack(
            np.meshgrid(*[np.arange(d, dtype=float) for d in self.dims], indexing="ij"),
            axis=-1,
        )
        return self.voxel_to_world(idx)

    @property
    def centre_world(self) -> np.ndarray:
        centre_ijk = (np.asarray(self.dims, dtype=float) - 1.0) / 2.0
        return self.voxel_to_world(centre_ijk)


def _check_data(grid: VoxelGrid, data: np.ndarray, ndim: int = 3) -> np.ndarray:
    data = np.asarray(data)
    if data.shape[:3] != grid.dims or data.ndim != ndim:
        raise GeometryError(f"data shape {data.shape} does not match grid dims {grid.dims}")
    return data


@dataclass
class Volume:
    """A scalar volume on a grid."""

    grid: VoxelGrid
    data: np.ndarray
    units: Units = Units.DIMENSIONLESS

    def __post_init__(self):
        self.data = _check_data(self.grid, self.data).astype(float, copy=False)
        if self.units is Units.PROBABILITY:
            lo, hi = self.data.min(), self.data.max()
            if lo < -1e-9 or hi > 1.0 + 1e-9:
                raise DomainError(f"probability volume outside [0, 1]: [{lo}, {hi}]")

    def with_data(self, data: np.ndarray, units: Units | None = None) -> "Volume":
        return Volume(self.grid, data, self.units if units is None else units)


@dataclass
class BinaryMask:
    """A boolean volume on a grid."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.grid.dims:
            raise GeometryError(f"mask shape {data.shape} does not match grid {self.grid.dims}")
        self.data = data.astype(bool, copy=False)

    @property
    def n_foreground(self) -> int:
        return int(self.data.sum())


@dataclass
class TissueMaps:
    """Per-voxel tissue probabilities, one channel per class in TISSUE_CLASSES order."""

    grid: VoxelGrid
    data: np.ndarray  # dims + (6,)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.grid.dims + (N_CLASSES,):
            raise GeometryError(
                f"tissue maps need shape {self.grid.dims + (N_CLASSES,)}, got {data.shape}"
            )
        if not np.isfinite(data).all():
            raise DomainError("tissue maps contain NaN or Inf")
        if data.min() < -1e-8 or data.max() > 1.0 + 1e-8:
            raise DomainError("tissue probabilities outside [0, 1]")
        total = data.sum(axis=-1)
        err = np.abs(total - 1.0).max()
        if err > 1e-5:
            raise DomainError(f"tissue probabilities sum to 1 +/- {err:.2e} (> 1e-5)")
        self.data = data

    def channel(self, name: str) -> Volume:
        return Volume(self.grid, self.data[..., TISSUE_CLASSES.index(name)], Units.PROBABILITY)

    def argmax_labels(self) -> np.ndarray:
        return self.data.argmax(axis=-1)

    @classmethod
    def from_labels(cls, grid: VoxelGrid, labels: np.ndarray) -> "TissueMaps":
        """One-hot maps from an integer label array (class indices)."""
        labels = np.asarray(labels)
        data = np.zeros(grid.dims + (N_CLASSES,))
        for c in range(N_CLASSES):
            data[..., c] = labels == c
        return cls(grid, data)


def resample(v: Volume, target: VoxelGrid, interp: str = "trilinear", cval: float = 0.0) -> Volume:
    """Resample a volume onto a target grid through world coordinates.

    ``interp`` is "trilinear" or "nearest"; samples outside the source field
    of view take ``cval`` (default 0).
    """
    if interp not in ("trilinear", "nearest"):
        raise DomainError(f"unknown interpolation {interp!r}")
    if target.same_geometry(v.grid):
        return Volume(target, v.data.copy(), v.units)
    # Compose target-voxel -> world -> source-voxel into one affine map.
    m = np.linalg.inv(v.grid.affine) @ target.affine
    idx = np.stack(
        np.meshgrid(*[np.arange(d, dtype=float) for d in target.dims], indexing="ij"),
    ).reshape(3, -1)
    coords = m[:3, :3] @ idx + m[:3, 3:4]
    order = 1 if interp == "trilinear" else 0
    out = ndimage.map_coordinates(
        v.data, coords, order=order, mode="grid-constant", cval=cval, prefilter=False
    )
    return Volume(target, out.reshape(target.dims), v.units)


def sample_at_voxels(data: np.ndarray, vox: np.ndarray, interp: str = "trilinear",
                     cval: float = 0.0) -> np.ndarray:
    """Sample a 3-D array at fractional voxel coordinates vox (..., 3)."""
    order = 1 if interp == "trilinear" else 0
    coords = np.moveaxis(vox, -1, 0).reshape(3, -1)
    out = ndimage.map_coordinates(
        data, coords, order=order, mode="grid-constant", cval=cval, prefilter=False
    )
    return out.reshape(vox.shape[:-1])


def gaussian_smooth(v: Volume, fwhm_mm) -> Volume:
    """Separable Gaussian smoothing with the kernel width given as FWHM in mm.

    The discrete kernel is truncated at 4 sigma per axis; boundaries are
    zero-padded and each voxel is renormalised by the kernel mass that fell
    inside the field of view, so constants pass through unchanged right up to
    the edges while interior behaviour matches plain convolution.
    """
    fwhm = np.broadcast_to(np.asarray(fwhm_mm, dtype=float), (3,))
    if (fwhm < 0).any():
        raise DomainError("fwhm must be non-negative")
    if (fwhm == 0).all():
        return Volume(v.grid, v.data.copy(), v.units)
    sigma_vox = fwhm * FWHM_TO_SIGMA / np.asarray(v.grid.spacing)
    out = ndimage.gaussian_filter(v.data, sigma=sigma_vox, mode="constant", cval=0.0,
                                  truncate=4.0)
    mass = ndimage.gaussian_filter(np.ones(v.data.shape), sigma=sigma_vox,
                                   mode="constant", cval=0.0, truncate=4.0)
    return Volume(v.grid, out / mass, v.units)


def smooth_array(data: np.ndarray, sigma_vox, truncate: float = 4.0) -> np.ndarray:
    """Gaussian smoothing in voxel units with zero padding (internal helper)."""
    return ndimage.gaussian_filter(data, sigma=sigma_vox, mode="constant", cval=0.0,
                                   truncate=truncate)


def binarise(v: Volume, threshold: float) -> BinaryMask:
    """Threshold a probability map; values equal to the threshold count as
    foreground."""
    if v.units is not Units.PROBABILITY:
        raise DomainError(f"binarise expects probability units, got {v.units.value}")
    return BinaryMask(v.grid, v.data >= threshold)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along one axis."""
    if not np.isfinite(x).all():
        raise DomainError("softmax input contains non-finite logits")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channels(logits: list[Volume]) -> TissueMaps:
    """Per-voxel softmax of six aligned log-odds volumes into tissue maps."""
    if len(logits) != N_CLASSES:
        raise DomainError(f"softmax_channels needs {N_CLASSES} channels, got {len(logits)}")
    grid = logits[0].grid
    for v in logits[1:]:
        if not grid.same_geometry(v.grid):
            raise GeometryError("logit channels live on different grids")
    stacked = np.stack([v.data for v in logits], axis=-1)
    return TissueMaps(grid, softmax_array(stacked))
