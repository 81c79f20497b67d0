import math

import pytest
import torch

from hshield.metrics import distances, linf, ms_ssim, psnr, ssim

from conftest import rand_image


def test_identical_images():
    x = rand_image(32, 0)
    d = distances(x, x)
    assert d["linf"] == 0.0
    assert d["psnr"] == math.inf
    assert d["ssim"] == pytest.approx(1.0, abs=1e-6)
    assert d["ms_ssim"] == pytest.approx(1.0, abs=1e-6)


def test_uniform_offset_psnr_closed_form():
    x = torch.full((3, 32, 32), 0.5)
    y = x + 4 / 255
    assert linf(x, y) == pytest.approx(4 / 255)
    assert psnr(x, y) == pytest.approx(20 * math.log10(255 / 4), abs=1e-4)


def test_linf_zero_iff_equal():
    x = rand_image(16, 1)
    y = x.clone()
    assert linf(x, y) == 0.0
    y[0, 0, 0] += 1e-4
    assert linf(x, y) > 0.0


def test_ssim_symmetric():
    a, b = rand_image(32, 2), rand_image(32, 3)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_range():
    for seed in range(4):
        v = ssim(rand_image(32, seed), rand_image(32, seed + 10))
        assert -1.0 <= v <= 1.0


def test_ms_ssim_range_nonnegative_inputs():
    for seed in range(4):
        v = ms_ssim(rand_image(64, seed), rand_image(64, seed + 20))
        assert 0.0 <= v <= 1.0


def test_ssim_decreases_with_noise():
    x = rand_image(32, 5)
    small = (x + torch.randn_like(x) * 0.01).clamp(0, 1)
    big = (x + torch.randn_like(x) * 0.2).clamp(0, 1)
    assert ssim(x, small) > ssim(x, big)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        linf(torch.zeros(3, 8, 8), torch.zeros(3, 9, 9))


def test_ms_ssim_small_image_uses_fitting_scales():
    # 16px image: only the first scale fits an 11x11 window
    x, y = rand_image(16, 6), rand_image(16, 7)
    v = ms_ssim(x, y)
    assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        ms_ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))
