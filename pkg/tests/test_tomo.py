import numpy as np
import pytest

from lactlab import kernels, tomo
from lactlab.errors import InvalidArgument, InvalidState
from lactlab.tomo import AngleSpec, Ellipse, PhantomSpec, Sinogram, Volume


def inscribed(size):
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2


class TestAngles:
    def test_sixty_degrees(self):
        spec = AngleSpec(60)
        assert spec.theta_s == 60.0
        a = tomo.make_angle_list(spec)
        assert len(a) == 120
        assert a[0] == 60.0 and a[-1] == 119.5

    def test_thirty_degrees_start(self):
        assert AngleSpec(30).theta_s == 75.0

    def test_full_sweep_count(self):
        assert len(tomo.make_angle_list(AngleSpec(180))) == 360

    def test_strictly_increasing_with_step(self):
        a = np.array(tomo.make_angle_list(AngleSpec(37.5)))
        np.testing.assert_allclose(np.diff(a), 0.5)

    def test_non_divisible_warns_and_floors(self):
        with pytest.warns(UserWarning):
            a = tomo.make_angle_list(AngleSpec(10, delta_theta=3.0))
        assert len(a) == 3

    @pytest.mark.parametrize("bad", [dict(theta_r=0), dict(theta_r=200), dict(theta_r=60, delta_theta=0)])
    def test_invalid_specs(self, bad):
        with pytest.raises(InvalidArgument):
            AngleSpec(**bad)


class TestNormalize:
    def _vol(self, values):
        return Volume(np.array(values, dtype=np.float32).reshape(1, 1, -1).repeat(len(values), 1), "HU")

    def test_anchor_values(self):
        n = tomo.normalize_hu(self._vol([1000, -1000, 0, 2500]))
        np.testing.assert_array_equal(n.voxels[0, 0], [1.0, -1.0, 0.0, 1.0])

    def test_round_trip_is_clip(self):
        v = self._vol([-3000, -200, 350, 4000])
        back = tomo.denormalize_hu(tomo.normalize_hu(v))
        np.testing.assert_allclose(back.voxels, np.clip(v.voxels, -1000, 1000))

    def test_double_normalisation_rejected(self):
        n = tomo.normalize_hu(self._vol([0, 1]))
        with pytest.raises(InvalidState):
            tomo.normalize_hu(n)


class TestPhantom:
    def test_deterministic(self):
        a = tomo.generate_phantom(PhantomSpec(seed=5))
        b = tomo.generate_phantom(PhantomSpec(seed=5))
        np.testing.assert_array_equal(a.voxels, b.voxels)

    def test_seeds_differ(self):
        a = tomo.generate_phantom(PhantomSpec(seed=5))
        b = tomo.generate_phantom(PhantomSpec(seed=6))
        assert not np.array_equal(a.voxels, b.voxels)

    def test_empty_list_is_air(self):
        v = tomo.generate_phantom(PhantomSpec(ellipses=[]))
        assert np.all(v.voxels == -1000.0)

    def test_hu_range_and_modes(self):
        v = tomo.generate_phantom(PhantomSpec(seed=2)).voxels
        assert v.min() >= -1000 and v.max() <= 1000
        air = np.mean(v <= -900)
        soft = np.mean(np.abs(v) <= 200)
        bone = np.mean(v >= 400)
        gas = np.mean((v > -1000) & (v <= -400))
        assert min(air, soft, bone) > 0.001 and gas > 0
        hist, _ = np.histogram(v, bins=20, range=(-1000, 1000))
        # at least three separated populated modes (air, soft tissue, bone)
        assert hist[0] > 0 and hist[9:11].sum() > 0 and hist[14:].sum() > 0

    def test_slices_change_smoothly(self):
        v = tomo.normalize_hu(tomo.generate_phantom(PhantomSpec(seed=3, n_slices=16))).voxels
        adjacent = np.abs(np.diff(v, axis=0)).mean()
        far = np.abs(v[0] - v[-1]).mean()
        assert adjacent < far

    def test_explicit_ellipse(self):
        e = Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 0.0)
        v = tomo.generate_phantom(PhantomSpec(ellipses=[e], size=32, n_slices=2)).voxels
        assert v[0, 16, 16] == 0.0 and v[0, 0, 0] == -1000.0

    def test_body_inside_inscribed_circle(self):
        for s in range(5):
            v = tomo.generate_phantom(PhantomSpec(seed=s)).voxels
            assert np.all(v[:, ~inscribed(64)] == -1000.0)


class TestProjector:
    def test_zero_in_zero_out(self):
        s = tomo.radon_forward(np.zeros((32, 32)), [0, 45, 90])
        assert np.all(s.rays == 0)

    def test_disk_chord_lengths(self):
        S, r = 64, 20.0
        yy, xx = np.mgrid[:S, :S]
        c = (S - 1) / 2.0
        disk = ((xx - c) ** 2 + (yy - c) ** 2 <= r * r).astype(float)
        angles = [0.0, 17.0, 45.0, 90.0, 133.0]
        sino = tomo.radon_forward(disk, angles)
        s = np.arange(S) - c
        chord = 2.0 * np.sqrt(np.clip(r * r - s * s, 0.0, None))
        assert np.abs(sino.rays - chord[None]).max() < 2.0

    def test_linearity(self):
        rng = np.random.default_rng(0)
        f, g = rng.normal(size=(2, 32, 32))
        ang = tomo.make_angle_list(AngleSpec(90))
        lhs = tomo.radon_forward(f + g, ang).rays
        rhs = tomo.radon_forward(f, ang).rays + tomo.radon_forward(g, ang).rays
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-5

    def test_fbp_linearity(self):
        rng = np.random.default_rng(1)
        ang = np.arange(0, 180, 2.0)
        a, b = rng.normal(size=(2, len(ang), 32))
        lhs = tomo.fbp_reconstruct(Sinogram(a + b, ang), 32)
        rhs = tomo.fbp_reconstruct(Sinogram(a, ang), 32) + tomo.fbp_reconstruct(Sinogram(b, ang), 32)
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-5

    def test_fbp_zero(self):
        assert np.all(tomo.fbp_reconstruct(Sinogram(np.zeros((4, 16)), [0, 45, 90, 135]), 16) == 0)

    def test_fbp_empty_angles(self):
        with pytest.raises(InvalidArgument):
            tomo.fbp_reconstruct(Sinogram(np.zeros((0, 16)), []), 16)

    def test_fbp_detector_mismatch(self):
        with pytest.raises(InvalidArgument):
            tomo.fbp_reconstruct(Sinogram(np.zeros((2, 16)), [0, 90]), 32)

    @pytest.mark.parametrize("angle", [0.0, 30.0, 90.0, 120.0])
    def test_impulse_backprojection_draws_line(self, angle):
        S = 64
        row = np.zeros((1, S))
        off = 10
        row[0, (S - 1) // 2 + off] = 1.0  # detector offset s = off - 0.5
        s0 = off - 0.5
        img = kernels.backproject_kernel(row, np.deg2rad([angle]), np.ones(1), S)
        c = (S - 1) / 2.0
        th = np.deg2rad(angle)
        # every image row/col crossing the line should peak within 1 px of it
        errs = []
        for i in range(S):
            y = c - i
            if abs(np.cos(th)) > 0.5:
                j = int(np.argmax(img[i]))
                x_line = (s0 - y * np.sin(th)) / np.cos(th)
                if abs(x_line) < c - 2:
                    errs.append(abs((j - c) - x_line) * abs(np.cos(th)))
            else:
                jcol = i
                col = img[:, jcol]
                x = jcol - c
                k = int(np.argmax(col))
                y_line = (s0 - x * np.cos(th)) / np.sin(th)
                if abs(y_line) < c - 2:
                    errs.append(abs((c - k) - y_line) * abs(np.sin(th)))
        assert errs and max(errs) <= 1.0

    def test_full_angle_fbp_shepp_logan(self):
        img = tomo.shepp_logan(128)
        rec = tomo.simulate_slice(img, tomo.make_angle_list(AngleSpec(180)))
        assert np.abs(rec - img)[inscribed(128)].mean() < 0.05

    def test_sixty_worse_than_onetwenty(self):
        img = tomo.shepp_logan(64)
        m = inscribed(64)
        e60 = np.abs(tomo.simulate_slice(img, tomo.make_angle_list(AngleSpec(60))) - img)[m].mean()
        e120 = np.abs(tomo.simulate_slice(img, tomo.make_angle_list(AngleSpec(120))) - img)[m].mean()
        assert e60 > e120

    def test_deterministic(self):
        img = tomo.shepp_logan(32)
        ang = tomo.make_angle_list(AngleSpec(90))
        a = tomo.radon_forward(img, ang).rays
        np.testing.assert_array_equal(a, tomo.radon_forward(img, ang).rays)
        np.testing.assert_array_equal(tomo.simulate_slice(img, ang), tomo.simulate_slice(img, ang))


@pytest.fixture(scope="module")
def vol():
    return tomo.normalize_hu(tomo.generate_phantom(PhantomSpec(seed=11, n_slices=3)))


class TestSimulateLact:
    def test_shape_and_range(self, vol):
        out = tomo.simulate_lact(vol, AngleSpec(60))
        assert out.shape == vol.shape
        assert out.voxels.min() >= -1 and out.voxels.max() <= 1
        assert out.meta["angles"] == "60,60,0.5"

    def test_full_angle_near_identity(self, vol):
        out = tomo.simulate_lact(vol, AngleSpec(180))
        m = inscribed(vol.size)
        assert np.abs(out.voxels - vol.voxels)[:, m].mean() < 0.05

    def test_error_tracks_coverage(self, vol):
        errs = [np.abs(tomo.simulate_lact(vol, AngleSpec(t)).voxels - vol.voxels).mean()
                for t in (180, 120, 90, 60, 45, 30, 15)]
        assert all(a <= b for a, b in zip(errs, errs[1:]))

    def test_requires_normalized(self):
        with pytest.raises(InvalidState):
            tomo.simulate_lact(tomo.generate_phantom(PhantomSpec(n_slices=1)), AngleSpec(60))


class TestKernelBackends:
    """The numba and numpy kernels must agree."""

    def test_im2col_col2im(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 9, 9))
        for k, s, p in [(3, 1, 1), (4, 2, 1), (3, 2, 0)]:
            a = kernels.im2col_numpy(x, k, k, s, p)
            np.testing.assert_array_equal(a, kernels.im2col_numba(x, k, k, s, p))
            np.testing.assert_allclose(kernels.col2im_numpy(a, 9, 9, s, p),
                                       kernels.col2im_numba(a, 9, 9, s, p), atol=1e-12)

    def test_projector(self):
        img = tomo.shepp_logan(32).astype(np.float64)
        ang = np.deg2rad(np.arange(0, 180, 7.0))
        t, dt = kernels.ray_samples(32)
        det = np.arange(32) - 15.5
        a = kernels.radon_numpy(img, ang, det, t, dt)
        np.testing.assert_allclose(a, kernels.radon_numba(img, ang, det, t, dt), atol=1e-10)
        w = np.full(len(ang), 0.1)
        np.testing.assert_allclose(kernels.backproject_numpy(a, ang, w, 32),
                                   kernels.backproject_numba(a, ang, w, 32), atol=1e-10)
