import numpy as np
import pytest

from conftest import make_grid, scalar_vol
from corticarve.geometry import (
    AffineSample,
    DenseDeformation,
    VelocityField,
    _sample_field_world,
    integrate_svf,
    sample_affine,
    sample_velocity_field,
    warp_volume,
)
from corticarve.synthesis import SynthesisConfig
from corticarve.volume import BinaryMask, LabelVolume


def identity_cfg():
    """Config with every spatial range collapsed to the identity."""
    return SynthesisConfig(
        affine_translation_mm=(0.0, 0.0),
        affine_rotation_deg=(0.0, 0.0),
        affine_scaling_pct=(100.0, 100.0),
        deformation_sd_mm=(0.0, 0.0),
    )


class TestAffineSample:
    def test_scale_bounds_enforced(self):
        with pytest.raises(ValueError, match="scale"):
            AffineSample((0, 0, 0), (0, 0, 0), (0.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="scale"):
            AffineSample((0, 0, 0), (0, 0, 0), (1.0, 2.0, 1.0))

    def test_identity_matrix(self):
        m = AffineSample.identity().matrix((10.0, -4.0, 2.0))
        assert np.allclose(m, np.eye(4))

    def test_pure_translation(self):
        a = AffineSample((5.0, -2.0, 1.0), (0, 0, 0), (1, 1, 1))
        m = a.matrix((30.0, 30.0, 30.0))
        assert np.allclose(m[:3, :3], np.eye(3))
        assert np.allclose(m[:3, 3], (5.0, -2.0, 1.0))

    def test_rotation_about_center(self):
        c = np.array([8.0, 8.0, 8.0])
        a = AffineSample((0, 0, 0), (0.0, 0.0, 90.0), (1, 1, 1))
        m = a.matrix(c)
        p = m[:3, :3] @ (c + [1, 0, 0]) + m[:3, 3]
        assert np.allclose(p, c + [0, 1, 0], atol=1e-12)
        # the center itself is a fixed point
        assert np.allclose(m[:3, :3] @ c + m[:3, 3], c, atol=1e-12)

    def test_rotation_composition_order_is_rz_ry_rx(self):
        # with rx=rz=90: Rz(Rx(e_x)) = Rz(e_x) = e_y; the reverse order
        # would give e_z, so this pins R = Rz @ Ry @ Rx
        a = AffineSample((0, 0, 0), (90.0, 0.0, 90.0), (1, 1, 1))
        m = a.matrix((0.0, 0.0, 0.0))
        assert np.allclose(m[:3, :3] @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_scaling_about_center(self):
        c = np.array([5.0, 5.0, 5.0])
        a = AffineSample((0, 0, 0), (0, 0, 0), (1.5, 1.0, 1.0))
        m = a.matrix(c)
        p = m[:3, :3] @ (c + [2, 0, 0]) + m[:3, 3]
        assert np.allclose(p, c + [3, 0, 0], atol=1e-12)


class TestSampleAffine:
    def test_collapsed_ranges_give_identity(self, rng):
        a = sample_affine(identity_cfg(), rng)
        assert a.translation == (0.0, 0.0, 0.0)
        assert a.rotation == (0.0, 0.0, 0.0)
        assert a.scale == (1.0, 1.0, 1.0)

    def test_deterministic_for_fixed_seed(self):
        cfg = SynthesisConfig()
        a = sample_affine(cfg, np.random.default_rng(42))
        b = sample_affine(cfg, np.random.default_rng(42))
        assert a == b

    def test_draw_ranges_over_many_samples(self):
        cfg = SynthesisConfig()
        r = np.random.default_rng(7)
        t = np.empty((10_000, 3))
        rot = np.empty((10_000, 3))
        sc = np.empty((10_000, 3))
        for i in range(10_000):
            a = sample_affine(cfg, r)
            t[i] = a.translation
            rot[i] = a.rotation
            sc[i] = a.scale
        assert np.abs(t).max() <= 50.0
        assert np.abs(rot).max() <= 45.0
        assert sc.min() >= 0.8 and sc.max() <= 1.2
        # signs actually vary
        assert (t < 0).any() and (t > 0).any()
        assert (rot < 0).any() and (rot > 0).any()


class TestVelocityField:
    def test_vectors_shape_checked(self):
        g = make_grid((2, 2, 2), spacing=10.0)
        with pytest.raises(ValueError, match="shape"):
            VelocityField(g, np.zeros((2, 2, 2)))

    def test_nonfinite_rejected(self):
        g = make_grid((2, 2, 2), spacing=10.0)
        v = np.zeros((2, 2, 2, 3))
        v[0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            VelocityField(g, v)

    def test_sampled_field_spacing_in_configured_range(self, rng):
        cfg = SynthesisConfig()
        target = make_grid((32, 32, 32))
        for _ in range(20):
            vf, draws = sample_velocity_field(cfg, target, rng)
            assert 8.0 <= vf.grid.spacing[0] <= 16.0
            assert vf.grid.spacing[0] == draws["deformation_voxel_length_mm"]
            assert 0.0 <= draws["deformation_sd_mm"] <= 3.0

    def test_zero_sd_gives_zero_field(self, rng):
        vf, _ = sample_velocity_field(identity_cfg(), make_grid((16, 16, 16)), rng)
        assert np.all(vf.vectors == 0.0)


class TestIntegrateSVF:
    def test_zero_field_integrates_to_identity(self):
        target = make_grid((12, 12, 12))
        g = make_grid((3, 3, 3), spacing=6.0)
        d = integrate_svf(VelocityField(g, np.zeros((3, 3, 3, 3))), target)
        assert np.all(d.displacement == 0.0)

    def test_constant_field_is_translation(self):
        target = make_grid((16, 16, 16))
        g = make_grid((4, 4, 4), spacing=5.0)
        vec = np.zeros((4, 4, 4, 3))
        vec[..., 0] = 3.0
        d = integrate_svf(VelocityField(g, vec), target, steps=5)
        interior = d.displacement[2:-2, 2:-2, 2:-2]
        assert np.abs(interior[..., 0] - 3.0).max() < 1e-3
        assert np.abs(interior[..., 1:]).max() < 1e-3

    def test_linear_field_matches_exponential_flow(self):
        # v(x) = a*x integrates to displacement (e^a - 1)*x per axis
        a = 0.05
        target = make_grid((16, 16, 16))
        x = np.arange(16, dtype=np.float64)
        vec = np.zeros((16, 16, 16, 3))
        vec[..., 0] = a * x[:, None, None]
        d = integrate_svf(VelocityField(target, vec), target, steps=5)
        want = (np.exp(a) - 1.0) * x[:, None, None]
        got = d.displacement[..., 0]
        # stay clear of the edge clamp: every intermediate lookup of voxels
        # x <= 12 stays inside the lattice
        rel = np.abs(got[:13] - want[:13]) / np.maximum(np.abs(want[:13]), 1e-12)
        assert rel[1:].max() < 0.01

    def test_steps_must_be_positive(self):
        g = make_grid((2, 2, 2), spacing=8.0)
        with pytest.raises(ValueError, match="steps"):
            integrate_svf(VelocityField(g, np.zeros((2, 2, 2, 3))), g, steps=0)

    def test_inverse_field_composes_to_near_identity(self):
        # top of the configured range: coarse 10 mm lattice, 3 mm vector SD.
        # the backward field is integrated over an enlarged grid so forward
        # flow never queries it outside its support
        target = make_grid((32, 32, 32))
        big = make_grid((72, 72, 72), origin=(-20.0, -20.0, -20.0))
        cg = make_grid((5, 5, 5), spacing=10.0, origin=(-4.0, -4.0, -4.0))
        for seed in (0, 1, 2):
            vec = np.random.default_rng(seed).normal(0.0, 3.0, size=(5, 5, 5, 3))
            plus = integrate_svf(VelocityField(cg, vec), target)
            minus = integrate_svf(VelocityField(cg, -vec), big)
            pts = target.voxel_centers_world().reshape(-1, 3)
            fwd = plus.displacement.reshape(-1, 3)
            total = fwd + _sample_field_world(minus.displacement, big, pts + fwd)
            rms = np.sqrt((total**2).sum(axis=1).mean())
            assert rms < 0.1

    def test_jacobian_stays_positive(self):
        # diffeomorphism check on a full-strength draw
        cfg = SynthesisConfig()
        target = make_grid((24, 24, 24))
        r = np.random.default_rng(11)
        vf, _ = sample_velocity_field(cfg, target, r)
        d = integrate_svf(vf, target).displacement
        idx = np.indices((24, 24, 24)).transpose(1, 2, 3, 0).astype(np.float64)
        tmap = idx + d  # spacing 1, world == voxel
        J = np.empty((22, 22, 22, 3, 3))
        core = (slice(1, -1), slice(1, -1), slice(1, -1))
        for ax in range(3):
            hi = [slice(1, -1)] * 3
            lo = [slice(1, -1)] * 3
            hi[ax] = slice(2, None)
            lo[ax] = slice(0, -2)
            J[..., ax] = (tmap[tuple(hi)] - tmap[tuple(lo)]) / 2.0
        det = np.linalg.det(J)
        assert (det > 0).mean() >= 0.999


class TestWarpVolume:
    def test_identity_warp_changes_nothing(self, rng):
        v = scalar_vol(rng.normal(size=(8, 8, 8)))
        out = warp_volume(v, AffineSample.identity(), DenseDeformation.zero(v.grid))
        assert np.allclose(out.data, v.data, atol=1e-9)

    def test_translation_shifts_a_ramp(self):
        dims = (20, 6, 6)
        idx = np.indices(dims).astype(np.float64)
        v = scalar_vol(idx[0])
        a = AffineSample((5.0, 0.0, 0.0), (0, 0, 0), (1, 1, 1))
        out = warp_volume(v, a, None)
        # backward warp: the output at x shows the input at x - 5
        interior = out.data[6:19]
        want = idx[0][6:19] - 5.0
        assert np.abs(interior - want).max() < 1e-6

    def test_label_warp_preserves_value_set(self, rng):
        labels = rng.integers(0, 6, size=(10, 10, 10)).astype(np.uint16)
        lv = LabelVolume(make_grid((10, 10, 10)), labels)
        a = AffineSample((2.0, -1.0, 0.5), (10.0, -5.0, 20.0), (1.1, 0.9, 1.0))
        out = warp_volume(lv, a, None, mode="nearest")
        assert isinstance(out, LabelVolume)
        assert set(np.unique(out.data)) <= set(np.unique(labels))

    def test_constant_volume_warps_to_itself(self, rng):
        v = scalar_vol(np.full((8, 8, 8), 2.5))
        a = AffineSample((4.0, 1.0, -2.0), (15.0, 0.0, 30.0), (1.2, 1.0, 0.85))
        out = warp_volume(v, a, None)
        assert np.allclose(out.data, 2.5)

    def test_mask_requires_nearest(self):
        m = BinaryMask(make_grid((4, 4, 4)), np.zeros((4, 4, 4), dtype=bool))
        with pytest.raises(ValueError, match="nearest"):
            warp_volume(m, AffineSample.identity(), None, mode="trilinear")

    def test_deformation_dims_must_match(self):
        v = scalar_vol(np.zeros((4, 4, 4)))
        other = DenseDeformation.zero(make_grid((5, 5, 5)))
        with pytest.raises(ValueError, match="dims"):
            warp_volume(v, None, other)

    def test_unknown_mode_rejected(self):
        v = scalar_vol(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError, match="mode"):
            warp_volume(v, None, None, mode="sinc")
