import numpy as np
import pytest
from skimage.metrics import structural_similarity

from lactlab import metrics
from lactlab.errors import InvalidArgument
from lactlab.tomo import Volume


@pytest.fixture
def pair():
    rng = np.random.default_rng(7)
    a = rng.uniform(-1000, 1000, (32, 32))
    b = a + rng.normal(0, 120, a.shape)
    return a, b


def loop_mae(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += abs(a[i, j] - b[i, j])
    return total / a.size


class TestMAE:
    def test_against_double_loop(self, pair):
        assert metrics.mae(*pair) == pytest.approx(loop_mae(*pair), rel=1e-12)

    def test_identity_and_symmetry(self, pair):
        a, b = pair
        assert metrics.mae(a, a) == 0.0
        assert metrics.mae(a, b) == metrics.mae(b, a)

    def test_constant_offset(self):
        assert metrics.mae(np.zeros((8, 8)), np.full((8, 8), 10.0)) == 10.0

    def test_hu_scale_contract(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(-0.9, 0.9, (2, 3, 16, 16))
        ref = metrics.evaluate_case(Volume(a, "normalized"), Volume(b, "normalized"))
        per_slice = [metrics.mae(x, y) for x, y in zip(a, b)]
        assert ref.mae_hu == pytest.approx(1000 * np.median(per_slice), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            metrics.mae(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_matches_skimage(self, pair):
        a, b = pair
        ref = structural_similarity(a, b, data_range=2000.0, win_size=7)
        assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_skimage_structured(self, seed):
        rng = np.random.default_rng(seed)
        yy, xx = np.mgrid[:40, :40]
        a = 800 * np.sin(xx / (3 + seed)) * np.cos(yy / 5)
        b = np.clip(a + rng.normal(0, 50, a.shape) + 30, -1000, 1000)
        ref = structural_similarity(a, b, data_range=2000.0, win_size=7)
        assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_identical_is_one(self, pair):
        assert metrics.ssim(pair[0], pair[0]) == 1.0

    def test_symmetric(self, pair):
        a, b = pair
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-14)

    def test_constant_images_luminance_only(self):
        # zero variance everywhere: SSIM reduces to the luminance term
        a, b = np.full((9, 9), 100.0), np.full((9, 9), 300.0)
        c1 = (0.01 * 2000) ** 2
        expected = (2 * 100 * 300 + c1) / (100 ** 2 + 300 ** 2 + c1)
        assert metrics.ssim(a, b) == pytest.approx(expected, rel=1e-12)

    def test_scale_covariance(self, pair):
        # scaling images and data range together leaves SSIM unchanged
        a, b = pair
        assert metrics.ssim(a / 1000, b / 1000, data_range=2.0) == pytest.approx(
            metrics.ssim(a, b), rel=1e-9)

    def test_more_noise_lower_ssim(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-500, 500, (32, 32))
        n = rng.normal(size=a.shape)
        vals = [metrics.ssim(a, a + s * n) for s in (10, 50, 200, 800)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1000, 1000, (16, 16))
        for b in (-a, rng.uniform(-1000, 1000, a.shape), np.full(a.shape, 1000.0)):
            assert -1.0 <= metrics.ssim(a, b) <= 1.0

    def test_window_larger_than_image(self):
        with pytest.raises(InvalidArgument):
            metrics.ssim(np.zeros((5, 5)), np.zeros((5, 5)))


class TestROIAndReport:
    def test_roi_is_central_half(self):
        x = np.arange(64 * 64).reshape(64, 64)
        r = metrics.roi_crop(x)
        assert r.shape == (32, 32) and r[0, 0] == x[16, 16]
        assert metrics.roi_crop(np.zeros((512, 512))).shape == (256, 256)

    def test_roi_fixed_target_idempotent(self):
        x = np.random.default_rng(0).normal(size=(2, 64, 64))
        r = metrics.roi_crop(x)
        np.testing.assert_array_equal(metrics.roi_crop(r, size=32), r)

    def test_roi_bad_target(self):
        with pytest.raises(InvalidArgument):
            metrics.roi_crop(np.zeros((8, 8)), size=5)

    def test_median_not_mean(self):
        ref = Volume(np.zeros((3, 16, 16)), "normalized")
        off = np.zeros((3, 16, 16))
        off[0] = 0.01
        off[1] = 0.02
        off[2] = 0.5   # outlier slice
        rep = metrics.evaluate_case(Volume(off, "normalized"), ref)
        assert rep.mae_hu == pytest.approx(20.0, rel=1e-5)
        np.testing.assert_allclose(rep.per_slice["mae"], [10.0, 20.0, 500.0], rtol=1e-5)

    def test_report_monotone_in_noise(self):
        rng = np.random.default_rng(9)
        base = np.clip(rng.normal(0, 0.3, (3, 32, 32)), -1, 1)
        n = rng.normal(size=base.shape)
        reps = [metrics.evaluate_case(Volume(np.clip(base + s * n, -1, 1), "normalized"),
                                      Volume(base, "normalized")) for s in (0.01, 0.05, 0.2)]
        for a, b in zip(reps, reps[1:]):
            assert a.mae_hu < b.mae_hu and a.mae_roi_hu < b.mae_roi_hu
            assert a.ssim > b.ssim and a.ssim_roi > b.ssim_roi

    def test_evaluate_case_identical(self):
        v = Volume(np.random.default_rng(0).uniform(-1, 1, (3, 16, 16)), "normalized")
        rep = metrics.evaluate_case(v, v)
        assert rep.mae_hu == 0.0 and rep.ssim == 1.0
        assert rep.mae_roi_hu == 0.0 and rep.ssim_roi == 1.0

    def test_evaluate_case_in_hu(self):
        ref = Volume(np.zeros((2, 16, 16)), "normalized")
        off = Volume(np.full((2, 16, 16), 0.05), "normalized")
        assert metrics.evaluate_case(off, ref).mae_hu == pytest.approx(50.0, rel=1e-6)

    def test_evaluate_case_rejects_hu(self):
        v = Volume(np.zeros((1, 16, 16)), "HU")
        with pytest.raises(InvalidArgument):
            metrics.evaluate_case(v, v)

    def test_csv_round_trip(self, tmp_path):
        rep = metrics.MetricReport(12.5, 0.91, 20.25, 0.85)
        p = metrics.write_report_csv(tmp_path / "r.csv", [rep.row(3, 60.0)])
        rows = metrics.read_report_csv(p)
        assert list(rows[0]) == list(metrics.CSV_FIELDS)
        assert rows[0]["case_id"] == "3" and float(rows[0]["mae_roi"]) == 20.25
