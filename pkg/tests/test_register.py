import warnings

import numpy as np
import pytest

from neurovox.errors import DegenerateInputError, DomainError, GeometryError
from neurovox.phantom import PhantomSpec, make_phantom
from neurovox.register import (
    AffineParams,
    ConvergenceWarning,
    DeformationField,
    NonlinearOpts,
    RegistrationOpts,
    RigidParams,
    affine_field,
    apply_deformation,
    displacement_field,
    identity_field,
    invert_displacement,
    invert_field,
    jacobian_determinant,
    modulate,
    nmi,
    register_affine,
    register_nonlinear,
    register_rigid,
    transform_volume,
    warp_tissue_maps,
)
from neurovox.volume import TissueMaps, Units, Volume, VoxelGrid, smooth_array

BG_CT = -1000.0


@pytest.fixture(scope="module")
def coarse_phantom():
    return make_phantom(PhantomSpec(dims=(48,) * 3, spacing=(4.0,) * 3,
                                    ct_noise_sd=2.0, seed=3))


@pytest.fixture(scope="module")
def fine_phantom():
    return make_phantom(PhantomSpec(dims=(64,) * 3, spacing=(3.0,) * 3,
                                    ct_noise_sd=2.0, seed=3))


def _smoothed_priors(truth: TissueMaps) -> TissueMaps:
    q = np.stack([smooth_array(truth.data[..., c], 2.0) for c in range(6)], axis=-1)
    return TissueMaps(truth.grid, q / q.sum(-1, keepdims=True))


# ---------------------------------------------------------------------------
# NMI


def test_nmi_identical_images(rng):
    g = VoxelGrid.from_spacing((12, 12, 12), (1.0, 1.0, 1.0))
    a = Volume(g, rng.normal(size=g.dims), Units.DIMENSIONLESS)
    assert nmi(a, a) == pytest.approx(2.0, abs=1e-9)


def test_nmi_two_bin_hand_case():
    # half the voxels at one level, half at another, paired with itself:
    # H(A) = H(B) = H(A,B) = 1 bit, so NMI = 2 exactly
    g = VoxelGrid.from_spacing((4, 4, 4), (1.0, 1.0, 1.0))
    data = np.zeros(g.dims)
    data.ravel()[::2] = 1.0
    v = Volume(g, data, Units.DIMENSIONLESS)
    assert nmi(v, v, bins=2) == pytest.approx(2.0, abs=1e-12)


def test_nmi_independent_noise(rng):
    g = VoxelGrid.from_spacing((32, 32, 32), (1.0, 1.0, 1.0))
    a = Volume(g, rng.random(g.dims), Units.DIMENSIONLESS)
    b = Volume(g, rng.random(g.dims), Units.DIMENSIONLESS)
    assert nmi(a, b, bins=16) == pytest.approx(1.0, abs=0.05)


def test_nmi_symmetry(rng):
    g = VoxelGrid.from_spacing((10, 10, 10), (1.0, 1.0, 1.0))
    a = Volume(g, rng.normal(size=g.dims), Units.DIMENSIONLESS)
    b = Volume(g, rng.normal(size=g.dims) + 0.5 * a.data, Units.DIMENSIONLESS)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)


def test_nmi_errors(rng):
    g = VoxelGrid.from_spacing((6, 6, 6), (1.0, 1.0, 1.0))
    flat = Volume(g, np.zeros(g.dims), Units.DIMENSIONLESS)
    noisy = Volume(g, rng.normal(size=g.dims), Units.DIMENSIONLESS)
    with pytest.raises(DegenerateInputError):
        nmi(flat, noisy)
    with pytest.raises(DomainError):
        nmi(noisy, noisy, bins=1)
    other = Volume(VoxelGrid.from_spacing((6, 6, 6), (2.0, 2.0, 2.0)),
                   np.ones((6, 6, 6)), Units.DIMENSIONLESS)
    with pytest.raises(GeometryError):
        nmi(noisy, other)


# ---------------------------------------------------------------------------
# Parameter containers


def test_rigid_matrix_maps_points():
    p = RigidParams((1.0, -2.0, 3.0), (0.0, 0.0, np.pi / 2.0))
    out = p.matrix() @ np.array([1.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(out[:3], [1.0, -1.0, 3.0], atol=1e-12)


def test_from_centred_fixes_centre():
    centre = np.array([10.0, -5.0, 2.0])
    p = RigidParams.from_centred((0.0, 0.0, 0.0), (0.1, -0.2, 0.3), centre)
    out = p.matrix() @ np.append(centre, 1.0)
    np.testing.assert_allclose(out[:3], centre, atol=1e-12)
    a = AffineParams.from_centred((0.0, 0.0, 0.0), (0.0, 0.1, 0.0),
                                  (1.2, 0.9, 1.05), (0.01, 0.0, 0.02), centre)
    out = a.matrix() @ np.append(centre, 1.0)
    np.testing.assert_allclose(out[:3], centre, atol=1e-12)


def test_affine_params_validation():
    with pytest.raises(DomainError):
        AffineParams((0, 0, 0), (0, 0, 0), (1.0, 0.0, 1.0), (0, 0, 0))
    with pytest.raises(DomainError):
        RigidParams((np.nan, 0, 0), (0, 0, 0))


# ---------------------------------------------------------------------------
# Rigid registration


def test_rigid_self_registration(coarse_phantom):
    p = register_rigid(coarse_phantom.ct, coarse_phantom.ct)
    assert np.abs(p.translation).max() <= 0.1
    assert np.abs(p.rotation).max() <= 0.01


def test_rigid_recovers_translation(coarse_phantom):
    base = coarse_phantom.ct
    known = RigidParams((4.0, -2.0, 6.0), (0.0, 0.0, 0.0)).matrix()
    moved = transform_volume(base, known, cval=BG_CT)
    got = register_rigid(moved, base)
    half_voxel = 0.5 * np.asarray(base.grid.spacing)
    err = np.abs(np.asarray(got.translation) - (-np.array([4.0, -2.0, 6.0])))
    assert (err <= half_voxel).all()
    assert np.abs(got.rotation).max() <= np.deg2rad(0.5)


def test_rigid_recovers_rotation(coarse_phantom):
    base = coarse_phantom.ct
    known = RigidParams.from_centred((0.0, 0.0, 0.0), (0.0, 0.0, np.deg2rad(5.0)),
                                     base.grid.centre_world).matrix()
    moved = transform_volume(base, known, cval=BG_CT)
    got = register_rigid(moved, base)
    assert abs(np.rad2deg(got.rotation[2]) + 5.0) <= 0.5
    assert abs(np.rad2deg(got.rotation[0])) <= 0.5
    assert abs(np.rad2deg(got.rotation[1])) <= 0.5


def test_rigid_inverse_consistency(fine_phantom):
    base = fine_phantom.ct
    known = RigidParams.from_centred((5.0, -3.0, 2.0), (0.0, 0.0, np.deg2rad(3.0)),
                                     base.grid.centre_world).matrix()
    other = transform_volume(base, known, cval=BG_CT)
    fwd = register_rigid(other, base)
    bwd = register_rigid(base, other)
    comp = fwd.matrix() @ bwd.matrix()
    angle = np.arccos(np.clip((np.trace(comp[:3, :3]) - 1.0) / 2.0, -1.0, 1.0))
    assert np.linalg.norm(comp[:3, 3]) <= 1.0
    assert np.rad2deg(angle) <= 1.0


def test_rigid_budget_warning(coarse_phantom):
    base = coarse_phantom.ct
    moved = transform_volume(base, RigidParams((8.0, 0.0, 0.0), (0, 0, 0)).matrix(),
                             cval=BG_CT)
    with pytest.warns(ConvergenceWarning):
        register_rigid(moved, base, RegistrationOpts(max_evals=30, levels=1))


def test_rigid_constant_input_error(coarse_phantom):
    g = coarse_phantom.ct.grid
    flat = Volume(g, np.zeros(g.dims), Units.HU)
    with pytest.raises(DegenerateInputError):
        register_rigid(flat, coarse_phantom.ct)


# ---------------------------------------------------------------------------
# Affine registration


def test_affine_self_registration(coarse_phantom):
    p = register_affine(coarse_phantom.ct, coarse_phantom.ct)
    assert np.abs(p.translation).max() <= 0.5
    assert np.abs(np.asarray(p.scale) - 1.0).max() <= 0.01
    assert np.abs(p.shear).max() <= 0.01


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_affine_recovers_isotropic_scale(coarse_phantom):
    base = coarse_phantom.ct
    known = AffineParams.from_centred((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (1.1,) * 3,
                                      (0.0, 0.0, 0.0), base.grid.centre_world).matrix()
    moved = transform_volume(base, known, cval=BG_CT)
    got = register_affine(moved, base)
    np.testing.assert_allclose(got.scale, 1.0 / 1.1, atol=0.02)


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_affine_reproduces_composition_on_landmarks(fine_phantom):
    base = fine_phantom.ct
    grid = base.grid
    known = AffineParams.from_centred((3.0, -2.0, 1.0), (0.0, 0.0, 0.0),
                                      (1.05, 0.97, 1.02), (0.0, 0.0, 0.0),
                                      grid.centre_world).matrix()
    moved = transform_volume(base, known, cval=BG_CT)
    got = register_affine(base, moved, RegistrationOpts(max_evals=2400)).matrix()
    corners = np.array([[sx * 52.0, sy * 63.0, sz * 46.0]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    want = corners @ known[:3, :3].T + known[:3, 3]
    have = corners @ got[:3, :3].T + got[:3, 3]
    assert np.linalg.norm(want - have, axis=1).mean() <= 1.0


# ---------------------------------------------------------------------------
# Nonlinear refinement


def test_nonlinear_identity_when_matched(coarse_phantom):
    priors = _smoothed_priors(coarse_phantom.truth)
    fld = register_nonlinear(priors, priors)
    g = priors.grid
    base = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in g.dims],
                                indexing="ij"), axis=-1)
    disp = g.world_to_voxel(fld.map) - base
    assert np.abs(disp).max() <= 1e-3


def test_nonlinear_recovers_two_voxel_shift(coarse_phantom):
    priors = _smoothed_priors(coarse_phantom.truth)
    g = priors.grid
    shifted = TissueMaps(g, np.roll(priors.data, 2, axis=0))
    fld = register_nonlinear(shifted, priors)
    base = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in g.dims],
                                indexing="ij"), axis=-1)
    disp = g.world_to_voxel(fld.map) - base
    truth = coarse_phantom.truth.data
    brain = (truth[..., 0] + truth[..., 1]) > 0.5
    mean_disp = disp[brain].mean(axis=0)
    np.testing.assert_allclose(mean_disp, [2.0, 0.0, 0.0], atol=0.5)


def test_nonlinear_trace_monotone(coarse_phantom):
    priors = _smoothed_priors(coarse_phantom.truth)
    shifted = TissueMaps(priors.grid, np.roll(priors.data, 1, axis=1))
    fld = register_nonlinear(shifted, priors, NonlinearOpts(levels=2, iterations=15))
    tr = fld.objective_trace
    assert len(tr) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(tr, tr[1:]))


def test_nonlinear_input_validation(coarse_phantom):
    priors = _smoothed_priors(coarse_phantom.truth)
    with pytest.raises(DomainError):
        register_nonlinear(coarse_phantom.ct, priors)
    g2 = VoxelGrid.from_spacing(priors.grid.dims, (5.0, 5.0, 5.0))
    with pytest.raises(GeometryError):
        register_nonlinear(priors, TissueMaps(g2, priors.data))


# ---------------------------------------------------------------------------
# Field constructors, application, inversion


def test_identity_field_resamples_only(coarse_phantom):
    v = coarse_phantom.ct
    out = apply_deformation(v, identity_field(v.grid))
    np.testing.assert_allclose(out.data, v.data, atol=1e-9)


def test_translation_field_commutes_with_resample(coarse_phantom):
    v = coarse_phantom.ct
    t = RigidParams((4.0, -2.0, 6.0), (0.0, 0.0, 0.0)).matrix()
    via_field = apply_deformation(v, affine_field(t, v.grid))
    via_resample = transform_volume(v, t)
    np.testing.assert_allclose(via_field.data, via_resample.data, atol=1e-12)


def test_apply_deformation_keeps_probabilities_bounded(coarse_phantom):
    gm = Volume(coarse_phantom.truth.grid, coarse_phantom.truth.data[..., 0],
                Units.PROBABILITY)
    rot = RigidParams.from_centred((5.0, 0.0, 0.0), (0.0, 0.0, 0.2),
                                   gm.grid.centre_world).matrix()
    out = apply_deformation(gm, affine_field(rot, gm.grid))
    assert out.data.min() >= 0.0
    assert out.data.max() <= 1.0


def test_field_shape_and_finiteness_validation():
    g = VoxelGrid.from_spacing((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        DeformationField(g, np.zeros((3, 4, 4, 3)))
    bad = g.voxel_centres()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        DeformationField(g, bad)


def test_invert_field_of_affine_is_inverse_affine():
    g = VoxelGrid.from_spacing((8, 8, 8), (2.0, 2.0, 2.0))
    m = AffineParams.from_centred((3.0, -1.0, 2.0), (0.0, 0.0, 0.1),
                                  (1.1, 0.95, 1.0), (0.0, 0.0, 0.0),
                                  g.centre_world).matrix()
    inv = invert_field(affine_field(m, g, target_grid=g))
    want = affine_field(np.linalg.inv(m), g, g)
    np.testing.assert_allclose(inv.map, want.map, atol=1e-6)


def test_invert_field_needs_target_grid():
    g = VoxelGrid.from_spacing((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        invert_field(DeformationField(g, g.voxel_centres()))


def test_invert_displacement_fixed_point():
    g = VoxelGrid.from_spacing((16, 16, 16), (1.0, 1.0, 1.0))
    idx = np.stack(np.meshgrid(*[np.arange(16, dtype=float)] * 3, indexing="ij"),
                   axis=-1)
    u = 0.8 * np.sin(2.0 * np.pi * idx / 16.0)
    x = invert_displacement(u, idx)
    fwd = x.copy()
    from neurovox.volume import sample_at_voxels

    for ax in range(3):
        fwd[..., ax] += sample_at_voxels(u[..., ax], x)
    inner = (slice(2, -2),) * 3
    np.testing.assert_allclose(fwd[inner], idx[inner], atol=0.05)


def test_warp_tissue_maps_identity_and_out_of_field(coarse_phantom):
    maps = coarse_phantom.truth
    g = maps.grid
    out = warp_tissue_maps(maps, identity_field(g))
    np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.data, maps.data, atol=1e-6)
    far = RigidParams((500.0, 0.0, 0.0), (0.0, 0.0, 0.0)).matrix()
    shifted = warp_tissue_maps(maps, affine_field(far, g))
    np.testing.assert_allclose(shifted.data.sum(-1), 1.0, atol=1e-6)
    assert shifted.data[..., -1].min() == 1.0  # everything left the field


# ---------------------------------------------------------------------------
# Jacobians and modulation


def test_jacobian_identity_and_translation():
    g = VoxelGrid.from_spacing((10, 10, 10), (2.0, 2.0, 2.0))
    np.testing.assert_allclose(jacobian_determinant(identity_field(g)).volume.data,
                               1.0, atol=1e-6)
    t = RigidParams((7.0, -3.0, 1.0), (0.0, 0.0, 0.0)).matrix()
    np.testing.assert_allclose(jacobian_determinant(affine_field(t, g)).volume.data,
                               1.0, atol=1e-6)


def test_jacobian_uniform_scale():
    g = VoxelGrid.from_spacing((12, 12, 12), (2.0, 2.0, 2.0))
    s = 1.2
    m = AffineParams.from_centred((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (s,) * 3,
                                  (0.0, 0.0, 0.0), g.centre_world).matrix()
    det = jacobian_determinant(affine_field(m, g)).volume.data
    inner = (slice(1, -1),) * 3
    np.testing.assert_allclose(det[inner], s**3, atol=1e-3)
    # affine fields have spatially constant determinants
    assert det[inner].std() / det[inner].mean() <= 1e-3


def test_modulate_identity_and_zero(coarse_phantom):
    gm = Volume(coarse_phantom.truth.grid, coarse_phantom.truth.data[..., 0],
                Units.PROBABILITY)
    fld = identity_field(gm.grid)
    warped = apply_deformation(gm, fld)
    mod = modulate(warped, jacobian_determinant(fld))
    np.testing.assert_allclose(mod.data, warped.data, atol=1e-6)
    zero = Volume(gm.grid, np.zeros(gm.grid.dims), Units.PROBABILITY)
    assert modulate(zero, jacobian_determinant(fld)).data.max() == 0.0


def test_modulate_shape_mismatch():
    g = VoxelGrid.from_spacing((4, 4, 4), (1.0, 1.0, 1.0))
    g2 = VoxelGrid.from_spacing((5, 5, 5), (1.0, 1.0, 1.0))
    v = Volume(g, np.zeros(g.dims), Units.PROBABILITY)
    jac = jacobian_determinant(identity_field(g2))
    with pytest.raises(DomainError):
        modulate(v, jac)


def test_modulation_conserves_volume_under_scaling(coarse_phantom):
    gm = Volume(coarse_phantom.truth.grid, coarse_phantom.truth.data[..., 0],
                Units.PROBABILITY)
    g = gm.grid
    m = AffineParams.from_centred((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (1.2,) * 3,
                                  (0.0, 0.0, 0.0), g.centre_world).matrix()
    fld = affine_field(m, g)
    mod = modulate(apply_deformation(gm, fld), jacobian_determinant(fld))
    native = gm.data.sum()
    assert mod.data.sum() == pytest.approx(native, rel=0.01)


def test_modulation_conserves_volume_under_smooth_warp(coarse_phantom):
    gm = Volume(coarse_phantom.truth.grid, coarse_phantom.truth.data[..., 0],
                Units.PROBABILITY)
    g = gm.grid
    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in g.dims],
                               indexing="ij"), axis=-1)
    disp = 1.2 * np.sin(2.0 * np.pi * idx / np.asarray(g.dims))
    fld = displacement_field(g, disp, target_grid=g)
    mod = modulate(apply_deformation(gm, fld), jacobian_determinant(fld))
    assert mod.data.sum() == pytest.approx(gm.data.sum(), rel=0.01)
