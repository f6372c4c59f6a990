import numpy as np
import pytest

from s5dscr.errors import DegeneratePCAError, ShapeMismatchError
from s5dscr.metrics import (
    PSNR_IDENTICAL,
    MetricsReport,
    evaluate,
    pca_basis,
    pca_rgb,
    psnr,
    scc,
    ssim,
)

from oracles import ssim_reference


def random_cube(c=3, h=24, w=24, seed=0):
    return np.random.default_rng(seed).random((c, h, w)).astype(np.float32)


class TestPsnr:
    def test_identical_sentinel(self):
        x = random_cube()
        assert psnr(x, x) == PSNR_IDENTICAL

    def test_known_values(self):
        ref = np.zeros((1, 10, 10), dtype=np.float32)
        assert psnr(ref, np.full((1, 10, 10), 0.01, dtype=np.float32)) == pytest.approx(40.0)
        assert psnr(ref, np.full((1, 10, 10), 0.1, dtype=np.float32)) == pytest.approx(20.0)

    def test_symmetric(self):
        a, b = random_cube(seed=1), random_cube(seed=2)
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_perturbation(self):
        x = random_cube(seed=3)
        values = [psnr(x, x + d) for d in (0.01, 0.02, 0.05, 0.1)]
        assert values == sorted(values, reverse=True)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = random_cube(seed=4)
        assert ssim(x, x) == pytest.approx(1.0)

    def test_inverted_binary_pattern_negative(self):
        rng = np.random.default_rng(5)
        x = (rng.random((1, 16, 16)) > 0.5).astype(np.float32)
        assert ssim(x, 1.0 - x) < 0.0

    def test_matches_independent_reference(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            ref = rng.random((2, 14, 14))
            test = np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1)
            got = ssim(ref, test)
            want = ssim_reference(ref, test)
            assert got == pytest.approx(want, abs=1e-6)

    def test_window_larger_than_image(self):
        with pytest.raises(ShapeMismatchError):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))

    def test_symmetric(self):
        a, b = random_cube(seed=6), random_cube(seed=7)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


class TestScc:
    def test_self_correlation_is_one(self):
        x = random_cube(seed=8)
        assert scc(x, x) == pytest.approx(1.0)

    def test_constant_offset_removed(self):
        x = random_cube(seed=9)
        assert scc(x, x + 0.3) == pytest.approx(1.0, abs=1e-6)

    def test_independent_noise_decorrelated(self):
        a = random_cube(c=2, h=64, w=64, seed=10)
        b = random_cube(c=2, h=64, w=64, seed=11)
        assert abs(scc(a, b)) < 0.1

    def test_zero_variance_channel_warns_and_contributes_zero(self):
        flat = np.zeros((1, 16, 16), dtype=np.float32)
        with pytest.warns(UserWarning):
            assert scc(flat, flat) == 0.0

    def test_channel_permutation_invariance(self):
        a, b = random_cube(c=4, seed=12), random_cube(c=4, seed=13)
        perm = [2, 0, 3, 1]
        assert scc(a[perm], b[perm]) == pytest.approx(scc(a, b), abs=1e-12)


class TestEvaluate:
    def test_perfect_method_wins_everything(self):
        ref = random_cube(seed=14)
        from s5dscr.resample import bicubic_upsample, decimate

        bicubic = bicubic_upsample(decimate(ref, 4), 4)
        report = evaluate(ref, {"bicubic": bicubic, "model": ref.copy()})
        assert report.best == {"psnr_db": "model", "scc": "model", "ssim": "model"}

    def test_single_method_single_row(self):
        ref = random_cube(seed=15)
        report = evaluate(ref, {"only": ref + 0.01})
        assert len(report.rows) == 1
        assert report.rows[0].n_images == 1

    def test_csv_and_json_round(self, tmp_path):
        ref = random_cube(seed=16)
        report = evaluate(ref, {"exact": ref.copy(), "noisy": np.clip(ref + 0.05, 0, 1)},
                          band_id=3)
        csv_path = tmp_path / "report.csv"
        json_path = tmp_path / "report.json"
        report.to_csv(csv_path)
        report.to_json(json_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "band,method,psnr_db,scc,ssim,n_images"
        assert "identical" in lines[1]
        import json

        payload = json.loads(json_path.read_text())
        assert payload["band"] == 3
        assert payload["methods"][0]["psnr_identical"] is True
        assert payload["best"]["ssim"] == "exact"

    def test_multi_cube_aggregation(self):
        refs = [random_cube(seed=s) for s in (17, 18)]
        tests = {"m": [refs[0] + 0.01, refs[1] + 0.01]}
        report = evaluate(refs, tests)
        assert report.rows[0].n_images == 2
        assert len(report.rows[0].per_cube) == 2


class TestPcaRgb:
    def _orthogonal_channel_cube(self, scales=(3.0, 2.0, 1.0), n=64, seed=19):
        # channels built from orthonormal zero-mean patterns: the channel
        # covariance is diagonal, so principal axes are the channel axes
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((n * n, 3))
        m -= m.mean(axis=0)
        q, _ = np.linalg.qr(m)
        cube = np.stack([s * q[:, i].reshape(n, n) for i, s in enumerate(scales)])
        return cube.astype(np.float64)

    def test_basis_orthonormal(self):
        cube = random_cube(c=5, seed=20)
        _, comps, _ = pca_basis(cube)
        np.testing.assert_allclose(comps.T @ comps, np.eye(3), atol=1e-6)

    def test_orthogonal_channels_recovered(self):
        cube = self._orthogonal_channel_cube()
        _, comps, eigvals = pca_basis(cube)
        # eigen-decomposition of the known diagonal covariance: components
        # are the channel axes ordered by variance
        np.testing.assert_allclose(np.abs(comps), np.eye(3), atol=1e-8)
        assert eigvals[0] > eigvals[1] > eigvals[2]

    def test_ref_projection_uses_full_range(self):
        cube = random_cube(c=6, seed=21)
        img = pca_rgb(cube, cube)
        for j in range(3):
            assert img[:, :, j].min() == 0
            assert img[:, :, j].max() == 255

    def test_constant_cube_degenerate(self):
        flat = np.full((3, 16, 16), 0.5, dtype=np.float32)
        with pytest.raises(DegeneratePCAError):
            pca_rgb(flat, flat)

    def test_needs_three_channels(self):
        with pytest.raises(ShapeMismatchError):
            pca_basis(np.zeros((2, 8, 8)))

    def test_output_shape_and_dtype(self):
        cube = random_cube(c=4, seed=22)
        img = pca_rgb(cube, np.clip(cube + 0.02, 0, 1))
        assert img.shape == (24, 24, 3)
        assert img.dtype == np.uint8
