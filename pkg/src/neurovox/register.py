"""Registration: NMI rigid/affine alignment, demons-style nonlinear refinement,
deformation fields, Jacobians, and volume-preserving modulation.

Transform convention: a parameter set's matrix maps world coordinates of the
fixed image to the corresponding world coordinates in the moving image, so
resampling the moving image through the matrix aligns it with the fixed one.
A ``DeformationField`` generalises this: it stores, for every voxel of its
grid, the world coordinate in the target space that the voxel samples from.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage, optimize

from .errors import DegenerateInputError, DomainError, GeometryError
from .volume import (
    BinaryMask,
    TissueMaps,
    Units,
    Volume,
    VoxelGrid,
    sample_at_voxels,
    smooth_array,
)


class ConvergenceWarning(UserWarning):
    """An optimiser stopped on its evaluation budget rather than convergence."""


# ---------------------------------------------------------------------------
# Parameter types and matrix builders


def _euler_xyz(rotation) -> np.ndarray:
    """Rotation matrix for fixed XYZ Euler angles (x applied first)."""
    rx, ry, rz = rotation
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _homogeneous(linear: np.ndarray, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = linear
    m[:3, 3] = translation
    return m


@dataclass(frozen=True)
class RigidParams:
    translation: tuple[float, float, float]  # mm
    rotation: tuple[float, float, float]  # radians, fixed XYZ order

    def __post_init__(self):
        if not np.isfinite(self.translation).all() or not np.isfinite(self.rotation).all():
            raise DomainError("rigid parameters must be finite")

    def matrix(self) -> np.ndarray:
        return _homogeneous(_euler_xyz(self.rotation), self.translation)

    @classmethod
    def from_centred(cls, translation, rotation, centre) -> "RigidParams":
        """Parameters for a rotation about ``centre`` re-expressed about the origin."""
        r = _euler_xyz(rotation)
        t = np.asarray(translation, float) + np.asarray(centre, float) - r @ centre
        return cls(tuple(t), tuple(float(a) for a in rotation))


@dataclass(frozen=True)
class AffineParams:
    translation: tuple[float, float, float]
    rotation: tuple[float, float, float]
    scale: tuple[float, float, float]
    shear: tuple[float, float, float]

    def __post_init__(self):
        if min(self.scale) <= 0:
            raise DomainError(f"scales must be strictly positive, got {self.scale}")

    def linear(self) -> np.ndarray:
        sh = self.shear
        shear = np.array([[1, sh[0], sh[1]], [0, 1, sh[2]], [0, 0, 1.0]])
        return _euler_xyz(self.rotation) @ np.diag(self.scale) @ shear

    def matrix(self) -> np.ndarray:
        lin = self.linear()
        if abs(np.linalg.det(lin)) < 1e-12:
            raise DomainError("affine parameters give a singular matrix")
        return _homogeneous(lin, self.translation)

    @classmethod
    def from_centred(cls, translation, rotation, scale, shear, centre) -> "AffineParams":
        p = cls(tuple(translation), tuple(rotation), tuple(scale), tuple(shear))
        lin = p.linear()
        t = np.asarray(translation, float) + np.asarray(centre, float) - lin @ centre
        return cls(tuple(t), p.rotation, p.scale, p.shear)


@dataclass
class DeformationField:
    """Per-voxel sampling map: for each voxel of ``grid``, a world coordinate
    (mm) in the target space.  ``affine_part`` records the global affine
    factor of a composed field (identity for pure displacements), which makes
    the field cheaply invertible."""

    grid: VoxelGrid
    map: np.ndarray  # dims + (3,)
    affine_part: np.ndarray | None = None
    target_grid: VoxelGrid | None = None
    objective_trace: list[float] = dc_field(default_factory=list)

    def __post_init__(self):
        m = np.asarray(self.map, dtype=float)
        if m.shape != self.grid.dims + (3,):
            raise GeometryError(f"field map shape {m.shape} does not match grid {self.grid.dims}")
        if not np.isfinite(m).all():
            raise DomainError("deformation field contains non-finite coordinates")
        self.map = m
        if self.affine_part is None:
            self.affine_part = np.eye(4)


@dataclass
class JacobianMap:
    volume: Volume


def identity_field(grid: VoxelGrid, target_grid: VoxelGrid | None = None) -> DeformationField:
    return DeformationField(grid, grid.voxel_centres(), np.eye(4),
                            target_grid if target_grid is not None else grid)


def affine_field(matrix: np.ndarray, grid: VoxelGrid,
                 target_grid: VoxelGrid | None = None) -> DeformationField:
    """Field mapping each voxel of ``grid`` through a world-to-world matrix."""
    pts = grid.voxel_centres()
    m = np.asarray(matrix, dtype=float)
    return DeformationField(grid, pts @ m[:3, :3].T + m[:3, 3], m, target_grid)


def displacement_field(grid: VoxelGrid, disp_vox: np.ndarray,
                       affine: np.ndarray | None = None,
                       target_grid: VoxelGrid | None = None) -> DeformationField:
    """Field from a voxel-unit displacement, optionally followed by a world affine."""
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in grid.dims],
                               indexing="ij"), axis=-1)
    pts = grid.voxel_to_world(idx + disp_vox)
    if affine is not None:
        pts = pts @ np.asarray(affine)[:3, :3].T + np.asarray(affine)[:3, 3]
    return DeformationField(grid, pts, affine, target_grid)


# ---------------------------------------------------------------------------
# Normalised mutual information


def _joint_histogram(x: np.ndarray, y: np.ndarray, bins: int) -> np.ndarray:
    xmin, xmax = x.min(), x.max()
    ymin, ymax = y.min(), y.max()
    ix = np.clip(((x - xmin) * (bins / (xmax - xmin))).astype(np.int64), 0, bins - 1)
    iy = np.clip(((y - ymin) * (bins / (ymax - ymin))).astype(np.int64), 0, bins - 1)
    joint = np.bincount(ix * bins + iy, minlength=bins * bins).reshape(bins, bins)
    return joint.astype(float)


def _parzen_histogram(x: np.ndarray, y: np.ndarray, bins: int) -> np.ndarray:
    """Blurred joint histogram for the registration objective; the Parzen
    window keeps entropy differentiable enough for line searches that would
    otherwise stall on binning jitter.  Not used by the public nmi(), whose
    contract is plain hard-binned counts."""
    return ndimage.gaussian_filter(_joint_histogram(x, y, bins), 0.7, mode="constant")


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _nmi_from_joint(joint: np.ndarray) -> float:
    p = joint / joint.sum()
    h_x = _entropy(p.sum(axis=1))
    h_y = _entropy(p.sum(axis=0))
    h_xy = _entropy(p.ravel())
    if h_x == 0.0 or h_y == 0.0:
        raise DegenerateInputError("NMI of a constant image")
    return (h_x + h_y) / h_xy


def nmi(a: Volume, b: Volume, bins: int = 64) -> float:
    """Normalised mutual information (H(A)+H(B))/H(A,B), in [1, 2]."""
    if bins < 2:
        raise DomainError("NMI needs at least 2 bins")
    if not a.grid.same_geometry(b.grid):
        raise GeometryError("NMI inputs must share a grid")
    x, y = a.data.ravel(), b.data.ravel()
    if x.min() == x.max() or y.min() == y.max():
        raise DegenerateInputError("NMI of a constant image")
    return _nmi_from_joint(_joint_histogram(x, y, bins))


# ---------------------------------------------------------------------------
# Rigid and affine registration


@dataclass(frozen=True)
class RegistrationOpts:
    """Search settings for rigid/affine alignment.

    The bound fields box the search around its initial pose (moment-based
    for rigid, the rigid solution for affine).  Same-subject head alignment
    stays far inside these; without them the affine search can fall into a
    distant basin that trades a large rotation against the scale freedom
    when two principal axes have similar extents.
    """

    bins: int = 64
    levels: int = 3
    max_evals: int = 1200
    trans_bound_mm: float = 30.0
    rot_bound: float = 0.26
    log_scale_bound: float = 0.25
    shear_bound: float = 0.2
    # Affine-only: seed from a full rigid solve first.  Worth skipping when
    # the expected pose difference is small and a later nonlinear stage mops
    # up, as in atlas pre-alignment.
    rigid_init: bool = True


def _downsample_level(data: np.ndarray, grid: VoxelGrid, factor: int):
    if factor == 1:
        return data, grid
    smoothed = smooth_array(data, sigma_vox=0.5 * factor)
    sub = smoothed[::factor, ::factor, ::factor]
    affine = grid.affine.copy()
    affine[:3, :3] *= factor
    new_grid = VoxelGrid(sub.shape, tuple(s * factor for s in grid.spacing), affine)
    return sub, new_grid


def _transform_points(pts: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return pts @ matrix[:3, :3].T + matrix[:3, 3]


def transform_volume(v: Volume, matrix: np.ndarray, target: VoxelGrid | None = None,
                     interp: str = "trilinear", cval: float = 0.0) -> Volume:
    """Pull-back warp: out(x) = v(matrix @ x) evaluated on the target grid."""
    target = target if target is not None else v.grid
    pts = _transform_points(target.voxel_centres(), np.asarray(matrix, float))
    vox = v.grid.world_to_voxel(pts)
    return Volume(target, sample_at_voxels(v.data, vox, interp, cval=cval), v.units)


class _NmiObjective:
    """Negative NMI of (fixed, moving warped through the candidate matrix)."""

    def __init__(self, moving: Volume, fixed_data, fixed_grid, bins, centre):
        self.moving = moving
        # Sample both images at half-voxel offsets of the fixed lattice.  At
        # integer offsets any voxel-aligned candidate (notably the identity,
        # when both inputs share a grid) is read without interpolation while
        # every other pose pays an interpolation blur, which biases NMI
        # towards aligned poses.  Off-lattice points cost both sides equally.
        n_full = int(np.prod([d - 1 for d in fixed_data.shape]))
        stride = max(1, int(np.ceil((n_full / 40000.0) ** (1.0 / 3.0))))
        ijk = np.stack(
            np.meshgrid(
                *[np.arange(d - 1, dtype=float)[::stride] + 0.5 for d in fixed_data.shape],
                indexing="ij",
            ),
            axis=-1,
        ).reshape(-1, 3)
        self.fixed_data = sample_at_voxels(fixed_data, ijk).ravel()
        self.pts = fixed_grid.voxel_to_world(ijk)
        self.bins = bins
        self.centre = np.asarray(centre, float)
        self.inv_moving = np.linalg.inv(moving.grid.affine)
        # Out-of-field samples take the moving minimum so they bin with the
        # image's own background rather than forming a spurious level.
        self.cval = float(moving.data.min())
        self.n_evals = 0

    def matrix(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, p: np.ndarray) -> float:
        self.n_evals += 1
        m = self.inv_moving @ self.matrix(p)
        vox = _transform_points(self.pts, m)
        warped = sample_at_voxels(self.moving.data, vox, cval=self.cval)
        if warped.min() == warped.max():
            return 0.0  # moving fully out of field; worst possible score
        return -_nmi_from_joint(_parzen_histogram(self.fixed_data, warped.ravel(), self.bins))


class _RigidObjective(_NmiObjective):
    def matrix(self, p):
        return RigidParams.from_centred(p[:3], p[3:6], self.centre).matrix()


class _AffineObjective(_NmiObjective):
    def matrix(self, p):
        return AffineParams.from_centred(
            p[:3], p[3:6], np.exp(p[6:9]), p[9:12], self.centre
        ).matrix()


def _check_registration_inputs(moving: Volume, fixed: Volume):
    for v, name in ((moving, "moving"), (fixed, "fixed")):
        if v.data.min() == v.data.max():
            raise DegenerateInputError(f"{name} image is constant")


def _pyramid_optimise(moving, fixed, opts, objective_cls, x0, step_scales, half_widths):
    centre = fixed.grid.centre_world
    factors = [2**i for i in reversed(range(opts.levels))]
    # Blurred levels only capture translation; rotation/scale precision all
    # comes from the finest level, which therefore gets most of the budget.
    shares = np.array([1.0 / factor for factor in factors], float)
    evals = np.maximum(opts.max_evals * shares / shares.sum(), 60).astype(int)
    x = np.asarray(x0, dtype=float)
    bounds = optimize.Bounds(x - half_widths, x + half_widths)
    budget_hit = False
    for factor, per_level in zip(factors, evals):
        fdata, fgrid = _downsample_level(fixed.data, fixed.grid, factor)
        mdata, mgrid = _downsample_level(moving.data, moving.grid, factor)
        bins = max(16, opts.bins // factor)
        obj = objective_cls(Volume(mgrid, mdata, moving.units), fdata, fgrid, bins, centre)
        direc = np.diag(step_scales(factor))
        res = optimize.minimize(
            obj, x, method="Powell", bounds=bounds,
            options={"maxfev": int(per_level), "xtol": 1e-3, "ftol": 1e-7, "direc": direc},
        )
        x = res.x
        # Coarse levels run tiny budgets on purpose; only the finest level's
        # convergence says anything about the returned solution.
        if factor == factors[-1] and not res.success:
            budget_hit = True
    if budget_hit:
        warnings.warn("registration stopped on its evaluation budget; returning best found",
                      ConvergenceWarning)
    return x, centre


def _weighted_moments(v: Volume):
    w = (v.data - v.data.min()).ravel()
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("cannot take moments of a constant image")
    pts = v.grid.voxel_centres().reshape(-1, 3)
    c = (w[:, None] * pts).sum(axis=0) / total
    return c, total


def _moment_pose(moving: Volume, fixed: Volume) -> RigidParams:
    """Initial pose aligning intensity centroids, with zero rotation.

    Principal-axes rotation estimates are deliberately not used: whenever two
    extents come out similar (heads are roughly axisymmetric, and anisotropic
    scaling can equalise two axes exactly) the covariance eigenvectors are
    arbitrary within the near-degenerate plane, which poisons the start far
    worse than no estimate at all.  Zero rotation stays inside the bounded
    search whenever the true pose difference is below the rotation bound.
    """
    c_f, _ = _weighted_moments(fixed)
    c_m, _ = _weighted_moments(moving)
    return RigidParams(tuple(c_m - c_f), (0.0, 0.0, 0.0))


def _centred_x0(params: RigidParams, centre: np.ndarray) -> np.ndarray:
    r = _euler_xyz(params.rotation)
    t0 = np.asarray(params.translation) - centre + r @ centre
    return np.concatenate([t0, params.rotation])


def register_rigid(moving: Volume, fixed: Volume,
                   opts: RegistrationOpts = RegistrationOpts()) -> RigidParams:
    """Rigid alignment maximising NMI over a coarse-to-fine pyramid."""
    _check_registration_inputs(moving, fixed)
    mean_sp = float(np.mean(fixed.grid.spacing))

    def steps(factor):
        t = mean_sp * factor
        return [t, t, t, 0.03, 0.03, 0.03]

    x0 = _centred_x0(_moment_pose(moving, fixed), fixed.grid.centre_world)
    half = np.array([opts.trans_bound_mm] * 3 + [opts.rot_bound] * 3)
    x, centre = _pyramid_optimise(moving, fixed, opts, _RigidObjective, x0, steps, half)
    return RigidParams.from_centred(x[:3], x[3:6], centre)


def register_affine(moving: Volume, fixed: Volume,
                    opts: RegistrationOpts = RegistrationOpts(),
                    init: RigidParams | None = None) -> AffineParams:
    """12-parameter affine alignment, initialised from a rigid solution."""
    _check_registration_inputs(moving, fixed)
    if init is None:
        init = (register_rigid(moving, fixed, opts) if opts.rigid_init
                else _moment_pose(moving, fixed))
    centre = fixed.grid.centre_world
    # Re-centre the rigid solution: matrix identity T(t0)R = T(t')T(c)RT(-c).
    r = _euler_xyz(init.rotation)
    t0 = np.asarray(init.translation) - centre + r @ centre
    x0 = np.concatenate([t0, init.rotation, np.zeros(3), np.zeros(3)])
    mean_sp = float(np.mean(fixed.grid.spacing))

    def steps(factor):
        t = mean_sp * factor
        return [t, t, t, 0.03, 0.03, 0.03, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02]

    half = np.array([opts.trans_bound_mm] * 3 + [opts.rot_bound] * 3
                    + [opts.log_scale_bound] * 3 + [opts.shear_bound] * 3)
    x, centre = _pyramid_optimise(moving, fixed, opts, _AffineObjective, x0, steps, half)
    return AffineParams.from_centred(x[:3], x[3:6], np.exp(x[6:9]), x[9:12], centre)


# ---------------------------------------------------------------------------
# Nonlinear (demons-style) refinement


@dataclass(frozen=True)
class NonlinearOpts:
    levels: int = 3
    sigma_mm: float = 12.0
    step: float = 1.0
    iterations: int = 40
    tol: float = 1e-4
    fill_sweeps: int = 200


def _warp_channels(data: np.ndarray, disp: np.ndarray, base_idx: np.ndarray) -> np.ndarray:
    vox = base_idx + disp
    out = np.empty_like(data)
    for c in range(data.shape[-1]):
        out[..., c] = sample_at_voxels(data[..., c], vox)
    return out


def _ssd(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float((d * d).sum())


def _demons_level(p: np.ndarray, q: np.ndarray, disp: np.ndarray, sigma_vox, opts):
    base_idx = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in p.shape[:3]],
                                    indexing="ij"), axis=-1)
    warped = _warp_channels(p, disp, base_idx)
    obj = _ssd(warped, q)
    trace = [obj]
    step = opts.step
    for _ in range(opts.iterations):
        resid = warped - q
        num = np.zeros(p.shape[:3] + (3,))
        den = (resid * resid).sum(axis=-1)
        for c in range(p.shape[-1]):
            g = np.gradient(warped[..., c])
            for ax in range(3):
                num[..., ax] += resid[..., c] * g[ax]
                den += g[ax] * g[ax]
        update = -num / np.maximum(den, 1e-9)[..., None]
        for ax in range(3):
            update[..., ax] = smooth_array(update[..., ax], sigma_vox)
        # Regularisation shrinks the update badly; rescale so the largest
        # move is one voxel and let step backtracking govern the pace.
        peak = np.sqrt((update * update).sum(axis=-1)).max()
        if peak > 1e-12:
            update /= peak
        accepted = False
        while step > 1e-3:
            cand = disp + step * update
            warped_cand = _warp_channels(p, cand, base_idx)
            obj_cand = _ssd(warped_cand, q)
            if obj_cand <= obj:
                disp, warped, obj = cand, warped_cand, obj_cand
                trace.append(obj)
                accepted = True
                step = min(step * 1.2, opts.step)
                break
            step *= 0.5
        if not accepted:
            break
        if len(trace) >= 2 and trace[-2] - trace[-1] <= opts.tol * max(trace[-2], 1e-12):
            break
    return disp, trace


def _fill_quiet_regions(disp: np.ndarray, q: np.ndarray, sweeps: int) -> np.ndarray:
    """Harmonically extend displacement into regions the mismatch cannot see.

    Matching forces exist only where the target maps vary; inside a uniform
    tissue compartment (or far outside the head) the objective is flat and
    demons leaves the field at whatever it diffused to.  Jacobi sweeps with
    the gradient-carrying voxels pinned extend the boundary displacement
    smoothly through those quiet regions without changing the objective.
    """
    if sweeps <= 0:
        return disp
    grad_sq = np.zeros(q.shape[:3])
    for c in range(q.shape[-1]):
        for g in np.gradient(q[..., c]):
            grad_sq += g * g
    active = grad_sq > 1e-4 * grad_sq.max()
    out = disp.copy()
    # Relax on a stride-2 lattice first: each coarse sweep carries boundary
    # values twice as far, so deep interiors converge in a fraction of the
    # full-resolution sweeps, which then only polish the seams.
    if min(out.shape[:3]) >= 8:
        coarse = _jacobi_fill(out[::2, ::2, ::2].copy(),
                              active[::2, ::2, ::2], sweeps)
        idx = np.stack(np.meshgrid(*[np.minimum(np.arange(d, dtype=float) / 2.0, c - 1)
                                     for d, c in zip(out.shape[:3], coarse.shape[:3])],
                                   indexing="ij"), axis=-1)
        up = np.empty_like(out)
        for ax in range(3):
            up[..., ax] = sample_at_voxels(coarse[..., ax], idx)
        out = np.where(active[..., None], out, up)
    return _jacobi_fill(out, active, max(sweeps // 8, 10))


def _jacobi_fill(out: np.ndarray, active: np.ndarray, sweeps: int) -> np.ndarray:
    for _ in range(sweeps):
        for ax in range(3):
            nb = ndimage.uniform_filter(out[..., ax], size=3, mode="nearest")
            out[..., ax] = np.where(active, out[..., ax], nb)
    return out


def _upsample_displacement(disp: np.ndarray, target_dims) -> np.ndarray:
    out = np.empty(tuple(target_dims) + (3,))
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) / 2.0 for d in target_dims],
                               indexing="ij"), axis=-1)
    for ax in range(3):
        out[..., ax] = 2.0 * sample_at_voxels(disp[..., ax], idx)
    return out


def register_nonlinear(posteriors: TissueMaps, atlas_priors: TissueMaps,
                       opts: NonlinearOpts = NonlinearOpts()) -> DeformationField:
    """Small-deformation refinement matching posteriors to priors.

    Minimises the summed squared channel difference with a Gaussian-smoothed
    demons update per iteration; the objective never increases (updates that
    would increase it are rejected, shrinking the step).  The returned field
    maps each grid voxel to the world position its content should be read
    from, with the objective trace attached.
    """
    if not isinstance(posteriors, TissueMaps) or not isinstance(atlas_priors, TissueMaps):
        raise DomainError("register_nonlinear needs TissueMaps inputs")
    if not posteriors.grid.same_geometry(atlas_priors.grid):
        raise GeometryError("posteriors and priors must share the atlas grid")
    grid = atlas_priors.grid
    spacing = np.asarray(grid.spacing)

    levels = []
    p_data, q_data = posteriors.data, atlas_priors.data
    for i in range(opts.levels):
        factor = 2 ** (opts.levels - 1 - i)
        if factor == 1:
            levels.append((p_data, q_data, spacing))
            continue
        p_l = np.stack([_downsample_level(p_data[..., c], grid, factor)[0]
                        for c in range(p_data.shape[-1])], axis=-1)
        q_l = np.stack([_downsample_level(q_data[..., c], grid, factor)[0]
                        for c in range(q_data.shape[-1])], axis=-1)
        levels.append((p_l, q_l, spacing * factor))

    disp = None
    # The update is smoothed by sigma_mm in units of each level's voxels, so
    # coarse levels regularise over proportionally larger physical distances.
    # That broad coherence is what drags regions whose boundaries run
    # parallel to the local motion (which see no matching force themselves).
    sigma_vox = opts.sigma_mm / spacing
    trace: list[float] = []
    for p_l, q_l, _sp in levels:
        if disp is None:
            disp = np.zeros(p_l.shape[:3] + (3,))
        elif disp.shape[:3] != p_l.shape[:3]:
            disp = _upsample_displacement(disp, p_l.shape[:3])
        disp, trace = _demons_level(p_l, q_l, disp, sigma_vox, opts)

    disp = _fill_quiet_regions(disp, q_data, opts.fill_sweeps)
    fld = displacement_field(grid, disp, None, grid)
    # Coarse levels only seed the field; the reported objective is the
    # full-resolution mismatch, non-increasing by update rejection.
    fld.objective_trace = trace
    return fld


def compose_displacement(u_old: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Displacement of x -> x + w(x) followed by x -> x + u_old(x), voxel units."""
    base_idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in u_old.shape[:3]],
                                    indexing="ij"), axis=-1)
    out = w.copy()
    at = base_idx + w
    for ax in range(3):
        out[..., ax] += sample_at_voxels(u_old[..., ax], at)
    return out


def invert_displacement(u: np.ndarray, targets: np.ndarray, iters: int = 10) -> np.ndarray:
    """Solve x + u(x) = z for each target z (fractional voxel coords).

    Fixed-point iteration; converges for the small smooth displacements this
    module generates.
    """
    x = targets.copy()
    for _ in range(iters):
        x_new = targets.copy()
        for ax in range(3):
            x_new[..., ax] -= sample_at_voxels(u[..., ax], x)
        x = x_new
    return x


def invert_field(field: DeformationField) -> DeformationField:
    """Invert a composed affine+displacement field.

    Requires ``target_grid``; returns a field on the target grid mapping back
    into the source grid's world space.
    """
    if field.target_grid is None:
        raise GeometryError("field inversion needs the field's target_grid")
    src, dst = field.grid, field.target_grid
    inv_affine = np.linalg.inv(field.affine_part)
    # Displacement part in source voxel coordinates: map = A(world(x + u(x))).
    back = _transform_points(field.map.reshape(-1, 3), inv_affine).reshape(field.map.shape)
    u = src.world_to_voxel(back)
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in src.dims],
                               indexing="ij"), axis=-1)
    u -= idx
    targets = src.world_to_voxel(_transform_points(
        dst.voxel_centres().reshape(-1, 3), inv_affine).reshape(dst.dims + (3,)))
    x = invert_displacement(u, targets)
    return DeformationField(dst, src.voxel_to_world(x), inv_affine, src)


# ---------------------------------------------------------------------------
# Applying fields


def apply_deformation(v: Volume, field: DeformationField, interp: str = "trilinear") -> Volume:
    """Warp a volume onto the field's grid by sampling at the mapped coordinates."""
    vox = v.grid.world_to_voxel(field.map)
    return Volume(field.grid, sample_at_voxels(v.data, vox, interp), v.units)


def warp_tissue_maps(maps: TissueMaps, field: DeformationField) -> TissueMaps:
    """Warp tissue maps channelwise and renormalise.

    Out-of-field voxels receive background probability 1 (interpolated sums
    below 0.5 count as out of field for the renormalisation).
    """
    vox = maps.grid.world_to_voxel(field.map)
    out = np.empty(field.grid.dims + (maps.data.shape[-1],))
    for c in range(maps.data.shape[-1]):
        out[..., c] = sample_at_voxels(maps.data[..., c], vox)
    total = out.sum(axis=-1)
    inside = total > 0.5
    out[inside] /= total[inside][..., None]
    out[~inside] = 0.0
    out[~inside, -1] = 1.0
    return TissueMaps(field.grid, np.clip(out, 0.0, 1.0))


def jacobian_determinant(field: DeformationField) -> JacobianMap:
    """Per-voxel determinant of the field's spatial derivative, normalised so
    an identity field gives 1 (central differences, one-sided at boundaries)."""
    jac = np.empty(field.grid.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(field.map[..., c])
        for ax in range(3):
            jac[..., c, ax] = grads[ax]
    det = np.linalg.det(jac) / np.linalg.det(field.grid.affine[:3, :3])
    return JacobianMap(Volume(field.grid, det, Units.DIMENSIONLESS))


def modulate(warped: Volume, jac: JacobianMap) -> Volume:
    """Voxelwise product preserving total tissue volume under warping."""
    if warped.data.shape != jac.volume.data.shape:
        raise DomainError("modulation inputs have mismatched shapes")
    return Volume(warped.grid, warped.data * jac.volume.data, Units.DIMENSIONLESS)
