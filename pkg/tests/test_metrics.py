import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from pytorch_msssim import ms_ssim as reference_ms_ssim

from nvrc.errors import UsageError
from nvrc.metrics import PSNR_CAP, RdCurve, bd_rate, ms_ssim, ms_ssim_scales, psnr, psnr_yuv_611


class TestPsnr:
    def test_identical_is_capped_and_flagged(self):
        x = torch.rand(2, 8, 8, 3)
        assert psnr(x, x, with_flag=True) == (PSNR_CAP, True)

    def test_unit_mse_at_peak_255(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 1.0, peak=255.0) == pytest.approx(20 * math.log10(255.0), abs=1e-12)
        assert psnr(a, a + 1.0, peak=255.0) == pytest.approx(48.13, abs=5e-3)

    @given(st.floats(1e-4, 0.2))
    def test_yuv_equal_planes(self, e):
        a = np.zeros((2, 4, 4, 3))
        assert psnr_yuv_611(a, a + e) == pytest.approx(psnr(a, a + e), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            psnr(np.zeros(3), np.zeros(4))


class TestMsSsim:
    def test_identical_is_one(self):
        x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        assert float(ms_ssim(x, x)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_reference_implementation(self):
        g = torch.Generator().manual_seed(0)
        worst = 0.0
        for _ in range(10):
            x = torch.rand(1, 3, 256, 256, generator=g, dtype=torch.float64)
            y = (x + 0.1 * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
            ours = float(ms_ssim(x, y))
            ref = float(reference_ms_ssim(x, y, data_range=1.0, win_size=11))
            worst = max(worst, abs(ours - ref))
        assert worst < 1e-4

    def test_shift_invariance(self):
        g = torch.Generator().manual_seed(1)
        x = torch.rand(1, 1, 180, 180, generator=g, dtype=torch.float64) * 0.5
        y = (x + 0.05 * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(0, 0.5)
        a = float(ms_ssim(x, y))
        b = float(ms_ssim(x + 0.3, y + 0.3))
        assert abs(a - b) < 1e-2

    def test_scales_drop_for_small_images(self):
        assert ms_ssim_scales(256, 256, 11) == 5
        assert ms_ssim_scales(64, 64, 11) == 3
        assert ms_ssim_scales(16, 16, 5) == 2

    def test_window_too_large(self):
        with pytest.raises(UsageError):
            ms_ssim(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8))


def _curve():
    return RdCurve([(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.2)])


class TestBdRate:
    def test_identical(self):
        assert bd_rate(_curve(), _curve()) == pytest.approx(0.0, abs=1e-9)

    def test_doubled_rate(self):
        b = RdCurve([(2 * r, q) for r, q in _curve().points])
        assert bd_rate(_curve(), b) == pytest.approx(100.0, abs=0.01)

    def test_trapezoid_oracle(self):
        a = _curve()
        b = RdCurve([(0.13, 30.5), (0.21, 32.8), (0.47, 36.0), (0.7, 36.9)])

        def fitted(c):
            q = np.array([p[1] for p in c.points])
            return np.polyfit(q, np.log([p[0] for p in c.points]), 3), q.min(), q.max()

        pa, alo, ahi = fitted(a)
        pb, blo, bhi = fitted(b)
        qs = np.linspace(max(alo, blo), min(ahi, bhi), 20001)
        diff = np.polyval(pb, qs) - np.polyval(pa, qs)
        avg = np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(qs)) / (qs[-1] - qs[0])
        oracle = (math.exp(avg) - 1.0) * 100.0
        assert bd_rate(a, b) == pytest.approx(oracle, rel=1e-3)

    def test_needs_four_points(self):
        with pytest.raises(UsageError):
            bd_rate(RdCurve([(0.1, 30), (0.2, 31), (0.3, 32)]), _curve())

    def test_csv(self):
        text = _curve().to_csv("a")
        assert text.splitlines()[0] == "label,bpp,psnr" and len(text.splitlines()) == 5
