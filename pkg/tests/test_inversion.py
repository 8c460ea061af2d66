"""Feature inversion, perceptual distance and reconstruction reports."""

import numpy as np
import pytest
import torch.nn as nn

from src.datasets import Image
from src.exceptions import NumericAbortError
from src.inversion import InversionConfig, invert_features, perceptual_distance, psnr, reconstruction_report
from tests.conftest import random_image


class _NaNEncoder(nn.Module):

    def forward(self, x):
        return x * float('nan')


def _smooth_image(size: int = 32) -> Image:
    ys, xs = np.mgrid[0:size, 0:size] / size
    pixels = np.stack([0.2 + 0.6 * xs, 0.2 + 0.6 * ys, 0.5 + 0.3 * np.sin(2 * np.pi * xs) * ys], axis=2)
    return Image(pixels=pixels, source='smooth')


class TestInversionConfig:

    def test_zero_iterations(self):
        with pytest.raises(ValueError, match='iterations'):
            InversionConfig(iterations=0)

    def test_noise_bounds(self):
        with pytest.raises(ValueError, match='Noise'):
            InversionConfig(noise_low=0.2, noise_high=0.1)

    def test_unknown_distance(self):
        with pytest.raises(ValueError, match='distance'):
            InversionConfig(distance='cosine')


class TestInvertFeatures:

    def test_objective_decreases_for_identity_encoder(self):
        target = random_image(np.random.default_rng(0))
        result = invert_features(nn.Identity(), target, InversionConfig(iterations=200, lr=0.01, depth=2))
        assert len(result.trace) == 200
        assert result.final_objective < result.trace[0]
        assert result.final_objective == pytest.approx(result.trace.min())
        assert result.image.shape == target.shape
        assert result.last_image.shape == target.shape

    def test_running_minimum_is_non_increasing(self):
        target = random_image(np.random.default_rng(1))
        result = invert_features(nn.Identity(), target, InversionConfig(iterations=50, lr=0.01, depth=2))
        assert np.all(np.diff(result.running_minimum) <= 0)
        assert result.running_minimum[-1] == result.final_objective

    def test_bit_exact_in_float64(self):
        target = random_image(np.random.default_rng(2))
        config = InversionConfig(iterations=20, lr=0.01, depth=2, dtype='float64', seed=3)
        a = invert_features(nn.Identity(), target, config)
        b = invert_features(nn.Identity(), target, config)
        np.testing.assert_array_equal(a.trace, b.trace)
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)

    def test_encoder_is_restored(self, small_encoder):
        small_encoder.train()
        target = random_image(np.random.default_rng(3))
        invert_features(small_encoder, target, InversionConfig(iterations=3, depth=2))
        assert small_encoder.training
        assert all(p.requires_grad for p in small_encoder.parameters())
        assert all(p.grad is None for p in small_encoder.parameters())

    def test_dtype_mismatch(self, small_encoder):
        target = random_image(np.random.default_rng(4))
        with pytest.raises(ValueError, match='float64'):
            invert_features(small_encoder, target, InversionConfig(iterations=2, depth=2, dtype='float64'))

    def test_indivisible_target(self):
        target = random_image(np.random.default_rng(5), size=12)
        with pytest.raises(ValueError, match='divisible'):
            invert_features(nn.Identity(), target, InversionConfig(iterations=2, depth=3))

    def test_non_finite_objective_aborts(self):
        target = random_image(np.random.default_rng(6))
        with pytest.raises(NumericAbortError) as error:
            invert_features(_NaNEncoder(), target, InversionConfig(iterations=5, depth=2))
        assert error.value.index == 0

    @pytest.mark.slow
    def test_smooth_target_is_recovered(self):
        target = _smooth_image(32)
        result = invert_features(nn.Identity(), target, InversionConfig(depth=5))
        assert psnr(result.image, target) >= 20.0


class TestPerceptualDistance:

    def test_identity_and_symmetry(self, small_encoder):
        rng = np.random.default_rng(7)
        a, b = random_image(rng), random_image(rng)
        assert perceptual_distance(a, a, small_encoder) == pytest.approx(0.0, abs=1e-9)
        assert perceptual_distance(a, b, small_encoder) == pytest.approx(perceptual_distance(b, a, small_encoder))
        assert perceptual_distance(a, b, small_encoder) > 0

    def test_shape_mismatch(self, small_encoder):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match='shape'):
            perceptual_distance(random_image(rng, size=16), random_image(rng, size=8), small_encoder)

    def test_psnr(self):
        image = random_image(np.random.default_rng(9))
        assert psnr(image, image) == float('inf')
        grey = Image(np.full(image.shape, 0.5))
        lighter = Image(np.full(image.shape, 0.6))
        assert psnr(grey, lighter) == pytest.approx(20.0, abs=1e-4)


class TestReconstructionReport:

    def test_counts_and_means(self, small_encoder):
        rng = np.random.default_rng(10)
        images = [random_image(rng, source='a'), random_image(rng, source='b')]
        report = reconstruction_report(images, {'identity': nn.Identity(), 'conv': small_encoder}, small_encoder,
                                       InversionConfig(iterations=3, depth=2))
        assert list(report.table.columns) == ['image', 'encoder', 'distance']
        assert len(report.table) == 4
        assert set(report.reconstructions) == {('a', 'identity'), ('a', 'conv'), ('b', 'identity'), ('b', 'conv')}
        for name in ('identity', 'conv'):
            expected = report.table.loc[report.table['encoder'] == name, 'distance'].mean()
            assert report.means[name] == pytest.approx(expected)
        assert report.wide().shape == (2, 2)

    def test_requires_inputs(self, small_encoder):
        with pytest.raises(ValueError):
            reconstruction_report([], {'x': nn.Identity()}, small_encoder)
