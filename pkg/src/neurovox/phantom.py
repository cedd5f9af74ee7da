"""Synthetic paired MR/CT head phantoms with exact ground truth.

Nested ellipsoids stand in for head anatomy: concentric shells give soft
tissue, skull, subarachnoid CSF, a grey-matter shell, a white-matter core and
ventricular CSF.  Everything downstream (volumes, surfaces, deformations) is
then checkable against closed forms.  Cohorts apply a per-subject global
scale (carrying a sex effect), a small random rigid jitter and a smooth
random displacement; the exact composed transform ships with each subject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .register import (
    DeformationField,
    apply_deformation,
    displacement_field,
    identity_field,
    invert_displacement,
    _euler_xyz,
    _homogeneous,
)
from .volume import (
    FWHM_TO_SIGMA,
    N_CLASSES,
    TissueMaps,
    Units,
    Volume,
    VoxelGrid,
    sample_at_voxels,
    smooth_array,
)
from .atlasgmm import Atlas

_GM, _WM, _CSF, _BONE, _SOFT, _BG = range(6)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    # ellipsoid semi-axes in mm, centred on the world origin
    head: tuple[float, float, float] = (70.0, 82.0, 64.0)
    skull_outer: tuple[float, float, float] = (64.0, 76.0, 58.0)
    skull_inner: tuple[float, float, float] = (58.0, 70.0, 52.0)
    brain: tuple[float, float, float] = (52.0, 63.0, 46.0)
    wm_core: tuple[float, float, float] = (41.0, 51.0, 36.0)
    ventricles: tuple[float, float, float] = (13.0, 18.0, 13.0)
    # class means in channel order gm, wm, csf, bone, soft, background
    ct_means: tuple[float, ...] = (38.0, 30.0, 8.0, 700.0, 60.0, -1000.0)
    mr_means: tuple[float, ...] = (65.0, 95.0, 28.0, 8.0, 45.0, 2.0)
    ct_noise_sd: float = 2.0
    mr_noise_sd: float = 4.0
    seed: int = 0

    def __post_init__(self):
        shells = [self.head, self.skull_outer, self.skull_inner, self.brain,
                  self.wm_core, self.ventricles]
        for outer, inner in zip(shells, shells[1:]):
            if not all(i < o for i, o in zip(inner, outer)):
                raise DomainError(f"ellipsoids must be strictly nested: {inner} vs {outer}")
        if self.ct_noise_sd < 0 or self.mr_noise_sd < 0:
            raise DomainError("noise SDs must be non-negative")


@dataclass(frozen=True)
class CohortVariation:
    sex_effect: float = 0.06
    scale_jitter: float = 0.03
    rot_deg: float = 3.0
    trans_mm: float = 4.0
    warp_amp_mm: float = 3.0
    warp_smooth_mm: float = 20.0


@dataclass
class PhantomSubject:
    subject_id: str
    sex: str  # "f" | "m"
    scale_factor: float
    ct: Volume
    mr: Volume
    truth: TissueMaps
    truth_field: DeformationField


def _labels_at(points: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Class labels by innermost-ellipsoid containment at world points."""

    def inside(axes):
        q = points / np.asarray(axes)
        return (q * q).sum(axis=-1) <= 1.0

    labels = np.full(points.shape[:-1], _BG, dtype=np.int8)
    labels[inside(spec.head)] = _SOFT
    labels[inside(spec.skull_outer)] = _BONE
    labels[inside(spec.skull_inner)] = _CSF
    labels[inside(spec.brain)] = _GM
    labels[inside(spec.wm_core)] = _WM
    labels[inside(spec.ventricles)] = _CSF
    return labels


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> PhantomSubject:
    """Voxelise the spec on a world-centred grid; intensities are class means
    plus seeded Gaussian noise; the truth field is the identity."""
    grid = VoxelGrid.from_spacing(spec.dims, spec.spacing)
    labels = _labels_at(grid.voxel_centres(), spec)
    rng = np.random.default_rng(spec.seed)
    ct = np.asarray(spec.ct_means, dtype=float)[labels]
    mr = np.asarray(spec.mr_means, dtype=float)[labels]
    if spec.ct_noise_sd > 0:
        ct = ct + rng.normal(0.0, spec.ct_noise_sd, size=labels.shape)
    if spec.mr_noise_sd > 0:
        mr = mr + rng.normal(0.0, spec.mr_noise_sd, size=labels.shape)
    return PhantomSubject(
        subject_id="sub-000",
        sex="f",
        scale_factor=1.0,
        ct=Volume(grid, ct, Units.HU),
        mr=Volume(grid, mr, Units.MR),
        truth=TissueMaps.from_labels(grid, labels),
        truth_field=identity_field(grid),
    )


def _smooth_random_displacement(grid: VoxelGrid, rng, amp_mm: float,
                                smooth_mm: float) -> np.ndarray:
    """Band-limited random world displacement (mm), max norm = amp_mm."""
    if amp_mm <= 0:
        return np.zeros(grid.dims + (3,))
    nodes = rng.normal(size=(6, 6, 6, 3))
    coords = np.stack(np.meshgrid(
        *[np.linspace(0.0, 5.0, d) for d in grid.dims], indexing="ij"), axis=-1)
    b = np.empty(grid.dims + (3,))
    for ax in range(3):
        b[..., ax] = sample_at_voxels(nodes[..., ax], coords)
        b[..., ax] = smooth_array(b[..., ax], smooth_mm / np.asarray(grid.spacing))
    norms = np.linalg.norm(b, axis=-1)
    peak = norms.max()
    if peak > 0:
        b *= amp_mm / peak
    return b


def _subject_transform(rng, variation: CohortVariation):
    sex = "m" if rng.random() < 0.5 else "f"
    scale = 1.0 + variation.sex_effect * (1.0 if sex == "m" else -1.0) / 2.0
    scale += rng.uniform(-variation.scale_jitter, variation.scale_jitter)
    rot = rng.uniform(-1.0, 1.0, 3) * math.radians(variation.rot_deg)
    trans = rng.uniform(-variation.trans_mm, variation.trans_mm, 3)
    affine = _homogeneous(_euler_xyz(rot) * scale, trans)
    return sex, scale, affine


def make_cohort(n: int, base_spec: PhantomSpec = PhantomSpec(),
                variation: CohortVariation = CohortVariation(),
                seed: int = 0) -> list[PhantomSubject]:
    """Cohort of transformed copies of the base phantom.

    Subject anatomy is the base anatomy carried through an affine
    (scale × rotation, then translation) composed with a smooth bounded
    displacement applied in atlas space; ``truth_field`` holds exactly that
    transform, mapping atlas voxels to subject world coordinates.  Labels are
    evaluated analytically at the pre-image of each subject voxel, so truth
    maps stay one-hot and intensities sit on their class plateaus (fresh
    acquisition noise per subject) — the images never contradict the truth
    they are scored against.
    """
    if n < 2:
        raise DomainError("a cohort needs at least 2 subjects")
    grid = VoxelGrid.from_spacing(base_spec.dims, base_spec.spacing)
    spacing = np.asarray(grid.spacing)
    ct_means = np.asarray(base_spec.ct_means, dtype=float)
    mr_means = np.asarray(base_spec.mr_means, dtype=float)

    subjects = []
    for idx in range(n):
        rng = np.random.default_rng((seed, idx))
        sex, scale, affine = _subject_transform(rng, variation)
        b = _smooth_random_displacement(grid, rng, variation.warp_amp_mm,
                                        variation.warp_smooth_mm)
        disp_vox = b / spacing
        field = displacement_field(grid, disp_vox, affine=affine, target_grid=grid)

        # sample the subject anatomy: native voxel y reads atlas content at
        # the preimage of the composed transform
        inv_aff = np.linalg.inv(affine)
        targets = grid.world_to_voxel(
            grid.voxel_centres() @ inv_aff[:3, :3].T + inv_aff[:3, 3])
        xv = invert_displacement(disp_vox, targets) if variation.warp_amp_mm > 0 else targets

        warped_labels = _labels_at(grid.voxel_to_world(xv), base_spec)
        ct = ct_means[warped_labels]
        mr = mr_means[warped_labels]
        if base_spec.ct_noise_sd > 0:
            ct = ct + rng.normal(0.0, base_spec.ct_noise_sd, size=ct.shape)
        if base_spec.mr_noise_sd > 0:
            mr = mr + rng.normal(0.0, base_spec.mr_noise_sd, size=mr.shape)
        subjects.append(PhantomSubject(
            subject_id=f"sub-{idx:03d}",
            sex=sex,
            scale_factor=float(scale),
            ct=Volume(grid, ct, Units.HU),
            mr=Volume(grid, mr, Units.MR),
            truth=TissueMaps.from_labels(grid, warped_labels),
            truth_field=field,
        ))
    return subjects


def make_atlas(cohort: list[PhantomSubject], smooth_fwhm_mm: float = 6.0,
               floor: float = 1e-4) -> Atlas:
    """Empirical tissue prior: cohort truth maps pulled back to atlas space,
    averaged, floored, lightly smoothed, renormalised, stored as log-odds."""
    if not cohort:
        raise DomainError("empty cohort")
    grid = cohort[0].truth_field.grid
    acc = np.zeros(grid.dims + (N_CLASSES,))
    for s in cohort:
        for c in range(N_CLASSES):
            ch = Volume(s.truth.grid, s.truth.data[..., c], Units.PROBABILITY)
            acc[..., c] += apply_deformation(ch, s.truth_field).data
    acc /= len(cohort)
    acc = np.clip(acc, floor, None)
    if smooth_fwhm_mm > 0:
        sigma = smooth_fwhm_mm * FWHM_TO_SIGMA / np.asarray(grid.spacing)
        for c in range(N_CLASSES):
            acc[..., c] = smooth_array(acc[..., c], sigma)
        acc = np.clip(acc, floor, None)
    acc /= acc.sum(axis=-1, keepdims=True)
    return Atlas(grid, np.log(acc))


def analytic_volumes_ml(spec: PhantomSpec, scale: float = 1.0) -> dict[str, float]:
    """Closed-form class volumes (ml) of the (possibly scaled) phantom."""

    def ell(axes):
        return 4.0 / 3.0 * math.pi * axes[0] * axes[1] * axes[2] * scale**3

    gm = ell(spec.brain) - ell(spec.wm_core)
    wm = ell(spec.wm_core) - ell(spec.ventricles)
    csf = ell(spec.ventricles) + ell(spec.skull_inner) - ell(spec.brain)
    bone = ell(spec.skull_outer) - ell(spec.skull_inner)
    soft = ell(spec.head) - ell(spec.skull_outer)
    return {
        "gm": gm / 1000.0,
        "wm": wm / 1000.0,
        "csf": csf / 1000.0,
        "bone": bone / 1000.0,
        "soft": soft / 1000.0,
        "tbv": (gm + wm) / 1000.0,
        "tiv": (gm + wm + csf) / 1000.0,
    }
