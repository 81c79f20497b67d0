import pytest
import torch

from hshield.purify import PurifyKind, PurifySpec, gaussian_kernel1d, purify

from conftest import rand_image


def spec(kind, param, seed=0):
    return PurifySpec(kind=kind, param=param, seed=seed)


class TestSpecs:
    def test_valid_paper_settings(self):
        for kind, params in [
            (PurifyKind.GAUSS_NOISE, (4, 8)),
            (PurifyKind.GAUSS_BLUR, (3, 5)),
            (PurifyKind.JPEG, (20, 70)),
            (PurifyKind.RESIZE, (2.0, 0.5)),
        ]:
            for p in params:
                spec(kind, p)

    @pytest.mark.parametrize("kind,param", [
        (PurifyKind.GAUSS_NOISE, 0),
        (PurifyKind.GAUSS_BLUR, 4),
        (PurifyKind.GAUSS_BLUR, 1),
        (PurifyKind.GAUSS_BLUR, 3.5),
        (PurifyKind.JPEG, 0),
        (PurifyKind.JPEG, 101),
        (PurifyKind.RESIZE, 0.25),
    ])
    def test_invalid_rejected(self, kind, param):
        with pytest.raises(ValueError):
            spec(kind, param)


class TestNoise:
    def test_seeded_reproducibility(self):
        x = rand_image(16, 1)
        a = purify(x, spec(PurifyKind.GAUSS_NOISE, 8, seed=3))
        b = purify(x, spec(PurifyKind.GAUSS_NOISE, 8, seed=3))
        assert torch.equal(a, b)
        c = purify(x, spec(PurifyKind.GAUSS_NOISE, 8, seed=4))
        assert not torch.equal(a, c)

    def test_noise_scale_is_8bit_units(self):
        x = torch.full((3, 64, 64), 0.5)
        out = purify(x, spec(PurifyKind.GAUSS_NOISE, 8, seed=0))
        assert float((out - x).std()) == pytest.approx(8 / 255, rel=0.05)


class TestBlur:
    def test_kernel_normalized(self):
        for k in (3, 5, 11):
            assert float(gaussian_kernel1d(k).sum()) == pytest.approx(1.0, abs=1e-6)

    def test_constant_image_fixed_point(self):
        x = torch.full((3, 16, 16), 0.37)
        out = purify(x, spec(PurifyKind.GAUSS_BLUR, 5))
        assert float((out - x).abs().max()) < 1e-6

    def test_blur_smooths_noise(self):
        x = rand_image(32, 2)
        out = purify(x, spec(PurifyKind.GAUSS_BLUR, 5))
        assert float(out.std()) < float(x.std())

    def test_shift_equivariance_in_interior(self):
        x = rand_image(32, 5)
        shifted = torch.roll(x, shifts=(3, 2), dims=(1, 2))
        a = purify(x, spec(PurifyKind.GAUSS_BLUR, 5))
        b = purify(shifted, spec(PurifyKind.GAUSS_BLUR, 5))
        a_roll = torch.roll(a, shifts=(3, 2), dims=(1, 2))
        interior = (slice(None), slice(8, 24), slice(8, 24))
        assert float((a_roll[interior] - b[interior]).abs().max()) < 1e-6


class TestJpeg:
    def test_q100_midgray_nearly_exact(self):
        x = torch.full((3, 32, 32), 128 / 255)
        out = purify(x, spec(PurifyKind.JPEG, 100))
        assert float((out - x).abs().max()) <= 2 / 255

    def test_deterministic(self):
        x = rand_image(32, 7)
        a = purify(x, spec(PurifyKind.JPEG, 70))
        b = purify(x, spec(PurifyKind.JPEG, 70))
        assert torch.equal(a, b)

    def test_lower_quality_more_distortion(self):
        x = rand_image(32, 8)
        hi = purify(x, spec(PurifyKind.JPEG, 95))
        lo = purify(x, spec(PurifyKind.JPEG, 20))
        assert float((lo - x).abs().mean()) > float((hi - x).abs().mean())


class TestResize:
    def test_gradient_roundtrip_upscale(self):
        # a bilinear-smooth ramp survives 2x up + recover within 1/255
        ramp = torch.linspace(0.2, 0.8, 32).view(1, 1, 32).expand(3, 32, 32)
        out = purify(ramp.contiguous(), spec(PurifyKind.RESIZE, 2.0))
        assert float((out - ramp).abs().max()) < 1 / 255

    def test_gradient_roundtrip_downscale(self):
        # downscale-first loses boundary rows; the interior roundtrips exactly
        ramp = torch.linspace(0.2, 0.8, 32).view(1, 32, 1).expand(3, 32, 32)
        out = purify(ramp.contiguous(), spec(PurifyKind.RESIZE, 0.5))
        interior = (slice(None), slice(2, 30), slice(2, 30))
        assert float((out - ramp)[interior].abs().max()) < 1 / 255

    def test_shift_equivariance_in_interior(self):
        x = rand_image(32, 11)
        shifted = torch.roll(x, shifts=(0, 4), dims=(1, 2))
        a = purify(x, spec(PurifyKind.RESIZE, 0.5))
        b = purify(shifted, spec(PurifyKind.RESIZE, 0.5))
        a_roll = torch.roll(a, shifts=(0, 4), dims=(1, 2))
        interior = (slice(None), slice(8, 24), slice(8, 24))
        assert float((a_roll[interior] - b[interior]).abs().max()) < 1e-5


@pytest.mark.parametrize("kind,param", [
    (PurifyKind.GAUSS_NOISE, 8),
    (PurifyKind.GAUSS_BLUR, 5),
    (PurifyKind.JPEG, 20),
    (PurifyKind.RESIZE, 0.5),
    (PurifyKind.RESIZE, 2.0),
])
def test_output_range_and_determinism(kind, param):
    for seed in range(3):
        x = rand_image(16, seed)
        out = purify(x, spec(kind, param, seed=1))
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
        assert torch.equal(out, purify(x, spec(kind, param, seed=1)))


def test_labels():
    assert spec(PurifyKind.GAUSS_NOISE, 8).label() == "noise_s8"
    assert spec(PurifyKind.GAUSS_BLUR, 5).label() == "blur_k5"
    assert spec(PurifyKind.JPEG, 70).label() == "jpeg_q70"
    assert spec(PurifyKind.RESIZE, 0.5).label() == "resize_0.5x"
