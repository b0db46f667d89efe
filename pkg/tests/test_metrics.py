import numpy as np
import pytest
import torch

from ctdenoise.data import load_manifest, save_manifest, write_raster, SliceEntry
from ctdenoise.metrics import (MetricsReport, PSNR_CAP_DB, evaluate_dataset,
                               psnr, rmse, ssim)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def naive_rmse(a, b):
    acc = 0.0
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            acc += (a[r, c] - b[r, c]) ** 2
    return (acc / a.size) ** 0.5


def naive_ssim(a, b):
    """Sliding 11x11 Gaussian window evaluated position by position."""
    size, sigma = 11, 1.5
    w = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            di, dj = i - 5, j - 5
            w[i, j] = np.exp(-(di * di) / (2 * sigma ** 2)) * np.exp(-(dj * dj) / (2 * sigma ** 2))
    w /= w.sum()

    h, wid = a.shape
    values = []
    for r in range(h - size + 1):
        for c in range(wid - size + 1):
            pa = a[r:r + size, c:c + size]
            pb = b[r:r + size, c:c + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            var_a = (w * pa * pa).sum() - mu_a ** 2
            var_b = (w * pb * pb).sum() - mu_b ** 2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
            values.append(num / den)
    return float(np.mean(values))


class TestRmse:
    def test_identical(self):
        a = np.random.default_rng(0).random((8, 8))
        assert rmse(a, a) == 0.0

    def test_constant_offset(self):
        a = np.full((8, 8), 0.4)
        assert rmse(a + 0.1, a) == pytest.approx(0.1, rel=1e-12)

    def test_matches_naive(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert rmse(a, b) == pytest.approx(naive_rmse(a, b), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            rmse(np.zeros((4, 4)), np.zeros((4, 5)))


class TestPsnr:
    def test_published_ldct_pair_is_consistent(self):
        # the published low-dose row pairs PSNR 14.6382 with RMSE 0.1913
        assert psnr_from_rmse(0.1913) == pytest.approx(14.6382, abs=0.5)

    def test_cap_on_identical_images(self):
        a = np.random.default_rng(2).random((8, 8))
        assert psnr(a, a) == PSNR_CAP_DB

    def test_half_range_closed_form(self):
        assert psnr_from_rmse(0.5) == pytest.approx(20 * np.log10(2.0), abs=1e-9)
        assert psnr_from_rmse(0.5) == pytest.approx(6.0206, abs=1e-4)

    def test_strictly_decreasing_in_rmse(self):
        values = [psnr_from_rmse(r) for r in (0.05, 0.1, 0.2, 0.4)]
        assert all(x > y for x, y in zip(values, values[1:]))


def psnr_from_rmse(err):
    a = np.zeros((4, 4))
    b = np.full((4, 4), err)
    return psnr(a, b)


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        a = np.random.default_rng(3).random((16, 16))
        assert ssim(a, a) == 1.0

    def test_constant_images_closed_form(self):
        a = np.full((16, 16), 0.5)
        b = np.full((16, 16), 0.7)
        want = (2 * 0.5 * 0.7 + SSIM_C1) / (0.5 ** 2 + 0.7 ** 2 + SSIM_C1)
        assert ssim(a, b) == pytest.approx(want, rel=1e-12)

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_window_size_guard(self):
        with pytest.raises(ValueError, match="smaller"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_transposition_invariance(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a.T, b.T) == pytest.approx(ssim(a, b), abs=1e-12)
        assert rmse(a.T, b.T) == pytest.approx(rmse(a, b), abs=1e-15)
        assert psnr(a.T, b.T) == pytest.approx(psnr(a, b), abs=1e-12)

    def test_uniform_window_option(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b, gaussian=False) != pytest.approx(ssim(a, b), abs=1e-6)


def _manifest_with_pairs(tmp_path, pairs):
    entries = []
    for i, (ld, nd) in enumerate(pairs):
        lp = tmp_path / f"ld{i}.raw"
        np_ = tmp_path / f"nd{i}.raw"
        write_raster(lp, ld)
        write_raster(np_, nd)
        entries.append(SliceEntry(lp, np_, ld.shape[1], ld.shape[0]))
    save_manifest(tmp_path / "m.json", entries, (0, 1))
    return load_manifest(tmp_path / "m.json")


class TestEvaluateDataset:
    def test_identity_model_scores_raw_ldct(self, tmp_path):
        rng = np.random.default_rng(8)
        nd = rng.random((64, 64)).astype(np.float32)
        ld = np.clip(nd + rng.normal(0, 0.05, nd.shape), 0, 1).astype(np.float32)
        manifest = _manifest_with_pairs(tmp_path, [(ld, nd)])
        report = evaluate_dataset(None, manifest)
        assert report.psnr == pytest.approx(psnr(ld, nd))
        assert report.rmse == pytest.approx(rmse(ld, nd))
        assert report.ssim == pytest.approx(ssim(ld, nd))
        assert report.count == 1

    def test_perfect_output_caps_metrics(self, tmp_path):
        nd = np.random.default_rng(9).random((64, 64)).astype(np.float32)
        manifest = _manifest_with_pairs(tmp_path, [(nd, nd)])
        report = evaluate_dataset(None, manifest)
        assert report.psnr == PSNR_CAP_DB
        assert report.rmse == 0.0
        assert report.ssim == 1.0

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(10)
        pairs = [(rng.random((64, 64)).astype(np.float32),
                  rng.random((64, 64)).astype(np.float32)) for _ in range(2)]
        manifest = _manifest_with_pairs(tmp_path, pairs)
        a = evaluate_dataset(None, manifest)
        b = evaluate_dataset(None, manifest)
        assert a == b

    def test_aggregate_is_mean_of_per_slice(self, tmp_path):
        rng = np.random.default_rng(11)
        pairs = [(rng.random((64, 64)).astype(np.float32),
                  rng.random((64, 64)).astype(np.float32)) for _ in range(3)]
        manifest = _manifest_with_pairs(tmp_path, pairs)
        report = evaluate_dataset(None, manifest)
        arr = np.asarray(report.per_slice)
        assert report.psnr == pytest.approx(arr[:, 0].mean())
        assert report.rmse == pytest.approx(arr[:, 1].mean())
        assert report.ssim == pytest.approx(arr[:, 2].mean())

    def test_table_and_json_outputs(self):
        report = MetricsReport(psnr=20.0, rmse=0.1, ssim=0.9, per_slice=[(20.0, 0.1, 0.9)],
                               count=1)
        table = report.to_table()
        header, row = table.splitlines()
        assert header.split() == ["PSNR", "RMSE", "SSIM"]
        assert "20.0000" in row
        assert '"psnr": 20.0' in report.to_json()
