"""Atlas-guided tissue classification.

A deformable probabilistic atlas (per-class log-odds) supplies spatial priors;
intensities are modelled per class by small Gaussian mixtures whose parameters
are re-estimated per subject by EM.  Segmentation alternates EM with a
nonlinear refinement of the atlas-to-subject warp so that priors follow the
posterior boundaries.

Class channel order everywhere: gm, wm, csf, bone, soft, background.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, DegenerateInputError, DomainError, GeometryError
from . import nifti
from .register import (
    DeformationField,
    NonlinearOpts,
    RegistrationOpts,
    compose_displacement,
    displacement_field,
    invert_displacement,
    invert_field,
    apply_deformation,
    register_affine,
    register_nonlinear,
)
from .volume import (
    N_CLASSES,
    TISSUE_CLASSES,
    BinaryMask,
    TissueMaps,
    Units,
    Volume,
    VoxelGrid,
    sample_at_voxels,
    softmax_array,
)


# ---------------------------------------------------------------------------
# Modality profiles
#
# Component counts per class and nominal class intensities.  The intensities
# serve two roles: they paint the atlas expectation image used to drive the
# affine pre-alignment, and they anchor the EM mean updates so that classes
# cannot drift onto each other's intensity ranges.  Using a profile on data
# from the other modality is deliberately possible (that is the baseline
# condition in the validation harness) and deliberately harmful.


@dataclass(frozen=True)
class ModalityProfile:
    name: str
    counts: tuple[int, int, int, int, int, int]
    means: tuple[float, float, float, float, float, float]
    anchor_strength: float = 0.5


CT_PROFILE = ModalityProfile(
    "ct", counts=(1, 1, 1, 3, 2, 6), means=(38.0, 30.0, 8.0, 700.0, 60.0, -1000.0)
)
MR_PROFILE = ModalityProfile(
    "mr", counts=(1, 1, 1, 1, 1, 2), means=(65.0, 95.0, 28.0, 8.0, 45.0, 2.0)
)

_PROFILES = {"ct": CT_PROFILE, "mr": MR_PROFILE}


def get_profile(name: str) -> ModalityProfile:
    try:
        return _PROFILES[name.lower()]
    except KeyError:
        raise DomainError(f"unknown modality profile {name!r}; have {sorted(_PROFILES)}")


# ---------------------------------------------------------------------------
# Model types


@dataclass
class GmmModel:
    """Per-class Gaussian mixtures over intensity.

    Within-class weights sum to one; mixing across classes always comes from
    the spatial prior field, never from the model.  ``anchor_means`` (if set)
    pull the mean updates toward nominal class intensities with a pseudo-count
    of ``anchor_strength * n_voxels / n_components`` observations each.
    ``var_floor`` is a per-class lower bound on component variances.
    """

    means: list[np.ndarray]
    variances: list[np.ndarray]
    weights: list[np.ndarray]
    modality: str = "ct"
    anchor_means: list[np.ndarray] | None = None
    anchor_strength: float = 0.0
    var_floor: np.ndarray | None = None

    def __post_init__(self):
        if len(self.means) != N_CLASSES:
            raise DomainError(f"model needs {N_CLASSES} classes, got {len(self.means)}")
        self.means = [np.atleast_1d(np.asarray(m, dtype=float)) for m in self.means]
        self.variances = [np.atleast_1d(np.asarray(s, dtype=float)) for s in self.variances]
        self.weights = [np.atleast_1d(np.asarray(w, dtype=float)) for w in self.weights]
        for c in range(N_CLASSES):
            k = len(self.means[c])
            if k == 0 or len(self.variances[c]) != k or len(self.weights[c]) != k:
                raise DomainError(f"class {TISSUE_CLASSES[c]}: inconsistent component arrays")
            if (self.variances[c] <= 0).any():
                raise DomainError(f"class {TISSUE_CLASSES[c]}: non-positive variance")
            if abs(self.weights[c].sum() - 1.0) > 1e-6 or (self.weights[c] < 0).any():
                raise DomainError(f"class {TISSUE_CLASSES[c]}: weights must sum to 1")

    @property
    def gaussians_per_class(self) -> tuple[int, ...]:
        return tuple(len(m) for m in self.means)

    @property
    def n_components(self) -> int:
        return sum(self.gaussians_per_class)


@dataclass
class EmResult:
    posteriors: TissueMaps
    model: GmmModel
    loglik_trace: list[float]
    n_iter: int
    converged: bool


@dataclass
class SegmentationResult:
    posteriors: TissueMaps
    deformation: DeformationField
    model: GmmModel
    loglik_trace: list[float]


@dataclass
class Atlas:
    """Tissue prior atlas stored as per-class log-odds on its own grid."""

    grid: VoxelGrid
    log_odds: np.ndarray  # dims + (6,)

    def __post_init__(self):
        lo = np.asarray(self.log_odds, dtype=float)
        if lo.shape != self.grid.dims + (N_CLASSES,):
            raise GeometryError(f"atlas log-odds shape {lo.shape} does not match grid")
        if not np.isfinite(lo).all():
            raise DomainError("atlas log-odds must be finite")
        self.log_odds = lo

    def priors(self) -> TissueMaps:
        return TissueMaps(self.grid, softmax_array(self.log_odds))

    def save(self, path):
        nifti.write_nifti_channels(self.grid, self.log_odds, path)

    @classmethod
    def load(cls, path) -> "Atlas":
        grid, data = nifti.read_nifti_channels(path)
        if data.shape[-1] != N_CLASSES:
            raise DomainError(f"atlas file has {data.shape[-1]} channels, expected {N_CLASSES}")
        return cls(grid, data)


# ---------------------------------------------------------------------------
# Initialisation


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    return np.interp(np.asarray(q, dtype=float) * cum[-1], cum - 0.5 * w, v)


def init_gmm(v: Volume, priors: TissueMaps, profile: ModalityProfile,
             gaussians_per_class: tuple[int, ...] | None = None,
             anchor_strength: float | None = None) -> GmmModel:
    """Data-driven initial model: per-class prior-weighted moments, with
    multi-component classes split along weighted intensity quantiles."""
    if not v.grid.same_geometry(priors.grid):
        raise GeometryError("image and priors must share a grid")
    counts = gaussians_per_class if gaussians_per_class is not None else profile.counts
    if len(counts) != N_CLASSES or min(counts) < 1:
        raise DomainError(f"need a positive component count per class, got {counts}")
    strength = profile.anchor_strength if anchor_strength is None else anchor_strength

    x = v.data.ravel()
    p = priors.data.reshape(-1, N_CLASSES)
    global_range = float(x.max() - x.min())

    means, variances, weights = [], [], []
    floors = np.empty(N_CLASSES)
    for c in range(N_CLASSES):
        wc = p[:, c]
        mass = wc.sum()
        if mass <= 0:
            raise DegenerateInputError(f"class {TISSUE_CLASSES[c]} has zero prior mass")
        lo, hi = _weighted_quantile(x, wc, [0.005, 0.995])
        floors[c] = max((0.01 * (hi - lo)) ** 2, (1e-6 * global_range) ** 2, 1e-12)
        mu = float((wc * x).sum() / mass)
        var = float((wc * (x - mu) ** 2).sum() / mass)
        kc = counts[c]
        if kc == 1:
            m = np.array([mu])
        else:
            m = _weighted_quantile(x, wc, (np.arange(kc) + 0.5) / kc)
            # quantile ties (e.g. heavily discretised data) collapse components
            m = m + 1e-6 * max(global_range, 1.0) * np.arange(kc)
        s = np.full(kc, max(var / kc**2, floors[c]))
        means.append(m)
        variances.append(s)
        weights.append(np.full(kc, 1.0 / kc))

    anchors = None
    if strength > 0:
        anchors = [np.full(counts[c], profile.means[c]) for c in range(N_CLASSES)]
    return GmmModel(means, variances, weights, modality=profile.name,
                    anchor_means=anchors, anchor_strength=float(strength),
                    var_floor=floors)


# ---------------------------------------------------------------------------
# EM


def _flat_components(model: GmmModel):
    mu = np.concatenate(model.means)
    var = np.concatenate(model.variances)
    w = np.concatenate(model.weights)
    cls = np.concatenate([np.full(len(model.means[c]), c, dtype=int)
                          for c in range(N_CLASSES)])
    return mu, var, w, cls


def _penalty(model: GmmModel, lam: float) -> float:
    """Log prior density of the component means under the anchor model."""
    if model.anchor_means is None or lam <= 0:
        return 0.0
    total = 0.0
    for c in range(N_CLASSES):
        d = model.means[c] - model.anchor_means[c]
        total += float(
            (-0.5 * lam * d * d / model.variances[c]
             - 0.5 * np.log(2.0 * np.pi * model.variances[c] / lam)).sum()
        )
    return total


def em_fit(v: Volume, priors: TissueMaps, model: GmmModel,
           tol: float = 1e-4, max_iter: int = 50) -> EmResult:
    """EM for the prior-weighted mixture.

    The trace holds the (penalised, when anchors are active) log-likelihood
    evaluated at the start of each iteration; it is non-decreasing.  Mean and
    variance updates are exact constrained M-steps, so monotonicity survives
    the variance floor.  Components that lose effectively all responsibility
    are pruned with a warning; a class losing every component is an error.
    """
    if not v.grid.same_geometry(priors.grid):
        raise GeometryError("image and priors must share a grid")
    if max_iter < 1:
        raise DomainError("max_iter must be >= 1")
    x = v.data.ravel().astype(float)
    n = x.size
    logp = np.log(priors.data.reshape(-1, N_CLASSES),
                  out=np.full((n, N_CLASSES), -np.inf), where=priors.data.reshape(-1, N_CLASSES) > 0)
    model = replace(model, means=[m.copy() for m in model.means],
                    variances=[s.copy() for s in model.variances],
                    weights=[w.copy() for w in model.weights])
    lam = 0.0
    if model.anchor_means is not None and model.anchor_strength > 0:
        lam = model.anchor_strength * n / model.n_components
    floors = model.var_floor if model.var_floor is not None else np.zeros(N_CLASSES)

    trace: list[float] = []
    r = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu, var, w, cls = _flat_components(model)
        with np.errstate(divide="ignore"):
            log_r = (
                logp[:, cls]
                + np.log(w)[None, :]
                - 0.5 * np.log(2.0 * np.pi * var)[None, :]
                - 0.5 * (x[:, None] - mu[None, :]) ** 2 / var[None, :]
            )
        norm = logsumexp(log_r, axis=1)
        if not np.isfinite(norm).all():
            raise DegenerateInputError("voxels with zero total prior support")
        ll = float(norm.sum()) + _penalty(model, lam)
        r = np.exp(log_r - norm[:, None])
        if trace and ll - trace[-1] <= tol * (1.0 + abs(ll)):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)

        nk = r.sum(axis=0)
        s1 = r.T @ x
        s2 = r.T @ (x * x)
        new_means, new_vars, new_weights, new_anchors = [], [], [], []
        offset = 0
        pruned = []
        for c in range(N_CLASSES):
            kc = len(model.means[c])
            sl = slice(offset, offset + kc)
            nk_c, s1_c, s2_c = nk[sl], s1[sl], s2[sl]
            offset += kc
            keep = nk_c > 1e-10 * n
            if not keep.all():
                if not keep.any():
                    raise ConvergenceError(
                        f"all components of class {TISSUE_CLASSES[c]} collapsed")
                pruned.append((TISSUE_CLASSES[c], int((~keep).sum())))
                nk_c, s1_c, s2_c = nk_c[keep], s1_c[keep], s2_c[keep]
            anchors_c = None
            if model.anchor_means is not None:
                anchors_c = model.anchor_means[c][keep]
            if anchors_c is not None and lam > 0:
                m_new = (s1_c + lam * anchors_c) / (nk_c + lam)
                ss = s2_c - 2.0 * m_new * s1_c + m_new**2 * nk_c
                v_new = (ss + lam * (m_new - anchors_c) ** 2) / (nk_c + 1.0)
            else:
                m_new = s1_c / nk_c
                v_new = s2_c / nk_c - m_new**2
            v_new = np.maximum(v_new, floors[c])
            new_means.append(m_new)
            new_vars.append(v_new)
            new_weights.append(nk_c / nk_c.sum())
            new_anchors.append(anchors_c)
        if pruned:
            detail = ", ".join(f"{name}: {k}" for name, k in pruned)
            warnings.warn(f"pruned collapsed mixture components ({detail})", UserWarning)
        model = GmmModel(new_means, new_vars, new_weights, modality=model.modality,
                         anchor_means=None if model.anchor_means is None else new_anchors,
                         anchor_strength=model.anchor_strength, var_floor=model.var_floor)

    post = np.empty((n, N_CLASSES))
    _, _, _, cls = _flat_components(model)
    # on convergence the last E-step already matches the final model;
    # after a budget stop one more E-step brings responsibilities up to date
    if not converged:
        mu, var, w, cls = _flat_components(model)
        with np.errstate(divide="ignore"):
            log_r = (
                logp[:, cls]
                + np.log(w)[None, :]
                - 0.5 * np.log(2.0 * np.pi * var)[None, :]
                - 0.5 * (x[:, None] - mu[None, :]) ** 2 / var[None, :]
            )
        norm = logsumexp(log_r, axis=1)
        trace.append(float(norm.sum()) + _penalty(model, lam))
        r = np.exp(log_r - norm[:, None])
    for c in range(N_CLASSES):
        post[:, c] = r[:, cls == c].sum(axis=1)
    posteriors = TissueMaps(v.grid, np.clip(post, 0.0, 1.0).reshape(v.grid.dims + (N_CLASSES,)))
    return EmResult(posteriors, model, trace, n_iter=it, converged=converged)


# ---------------------------------------------------------------------------
# Full segmentation


@dataclass(frozen=True)
class SegmentOpts:
    modality: str = "ct"
    gaussians_per_class: tuple[int, ...] | None = None
    alternations: int = 2
    em_tol: float = 1e-4
    em_max_iter: int = 30
    anchor_strength: float | None = None
    # Atlas pre-alignment needs only to land inside the nonlinear stage's
    # capture range, so the default search is lighter than a standalone
    # registration: two pyramid levels, no rigid seeding stage.
    reg: RegistrationOpts = RegistrationOpts(max_evals=600, levels=2,
                                             rigid_init=False)
    nonlinear: NonlinearOpts = NonlinearOpts()


def _expectation_image(atlas: Atlas, profile: ModalityProfile) -> Volume:
    pri = atlas.priors().data
    data = np.tensordot(pri, np.asarray(profile.means), axes=([-1], [0]))
    return Volume(atlas.grid, data, Units.DIMENSIONLESS)


def _warp_log_priors(atlas: Atlas, native: VoxelGrid, matrix: np.ndarray,
                     disp: np.ndarray) -> TissueMaps:
    """Pull atlas priors to the native grid through affine + displacement.

    Outside the atlas field of view each channel continues with its corner
    value, which the phantom-style atlases keep background-dominant.
    """
    z = atlas.grid.world_to_voxel(
        native.voxel_centres() @ matrix[:3, :3].T + matrix[:3, 3])
    if np.any(disp):
        xv = invert_displacement(disp, z)
    else:
        xv = z
    out = np.empty(native.dims + (N_CLASSES,))
    for c in range(N_CLASSES):
        out[..., c] = sample_at_voxels(atlas.log_odds[..., c], xv,
                                       cval=float(atlas.log_odds[0, 0, 0, c]))
    return TissueMaps(native, softmax_array(out))


def _posteriors_to_atlas(post: TissueMaps, atlas_grid: VoxelGrid,
                         inv_matrix: np.ndarray, disp: np.ndarray) -> TissueMaps:
    """Push subject posteriors onto the atlas grid through the current warp."""
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in atlas_grid.dims],
                               indexing="ij"), axis=-1)
    world = atlas_grid.voxel_to_world(idx + disp)
    native_vox = post.grid.world_to_voxel(
        world @ inv_matrix[:3, :3].T + inv_matrix[:3, 3])
    out = np.empty(atlas_grid.dims + (N_CLASSES,))
    for c in range(N_CLASSES):
        out[..., c] = sample_at_voxels(post.data[..., c], native_vox)
    total = out.sum(axis=-1)
    inside = total > 0.5
    out[inside] /= total[inside][..., None]
    out[~inside] = 0.0
    out[~inside, -1] = 1.0
    return TissueMaps(atlas_grid, np.clip(out, 0.0, 1.0))


def segment(v: Volume, atlas: Atlas, opts: SegmentOpts = SegmentOpts()) -> SegmentationResult:
    """Atlas-guided segmentation with interleaved warp refinement.

    Affine pre-alignment registers the atlas expectation image to the subject;
    the loop then alternates EM (intensity model + posteriors) with a demons
    refinement matching warped posteriors to the atlas priors.  The returned
    deformation maps atlas voxels to native world coordinates and carries the
    native grid as its target, so it can be inverted cheaply.
    """
    profile = get_profile(opts.modality)
    counts = opts.gaussians_per_class if opts.gaussians_per_class is not None \
        else profile.counts
    expect = _expectation_image(atlas, profile)
    aff = register_affine(expect, v, opts.reg)
    m = aff.matrix()  # native world -> atlas world
    a = np.linalg.inv(m)  # atlas world -> native world

    disp = np.zeros(atlas.grid.dims + (3,))
    priors_atlas = atlas.priors()
    trace: list[float] = []
    model = None
    res = None
    prev_disp = disp
    for round_ in range(opts.alternations + 1):
        priors_nat = _warp_log_priors(atlas, v.grid, m, disp)
        if model is None:
            model = init_gmm(v, priors_nat, profile, counts, opts.anchor_strength)
        cand = em_fit(v, priors_nat, model, tol=opts.em_tol, max_iter=opts.em_max_iter)
        if trace and cand.loglik_trace[0] < trace[-1]:
            # The warp step optimises posterior/prior mismatch, not the
            # likelihood, so near the fixed point it can nudge the priors the
            # wrong way; rejecting the update keeps the joint objective (and
            # the concatenated trace) monotone.
            disp = prev_disp
            break
        res = cand
        model = res.model
        trace.extend(res.loglik_trace)
        if round_ == opts.alternations:
            break
        prev_disp = disp
        post_atlas = _posteriors_to_atlas(res.posteriors, atlas.grid, a, disp)
        w_field = register_nonlinear(post_atlas, priors_atlas, opts.nonlinear)
        w = atlas.grid.world_to_voxel(w_field.map)
        w -= np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in atlas.grid.dims],
                                  indexing="ij"), axis=-1)
        disp = compose_displacement(disp, w)

    field = displacement_field(atlas.grid, disp, affine=a, target_grid=v.grid)
    return SegmentationResult(res.posteriors, field, model, trace)


def intracranial_mask(atlas: Atlas, field: DeformationField,
                      threshold: float = 0.5) -> BinaryMask:
    """Native-space intracranial mask.

    Thresholds gm+wm+csf prior mass in atlas space, warps the indicator to the
    field's target grid with trilinear interpolation, and re-thresholds.
    """
    pri = atlas.priors().data
    ind = ((pri[..., 0] + pri[..., 1] + pri[..., 2]) >= threshold).astype(float)
    inv = invert_field(field)
    warped = apply_deformation(Volume(atlas.grid, ind, Units.DIMENSIONLESS), inv)
    return BinaryMask(warped.grid, warped.data >= threshold)
