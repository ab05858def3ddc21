import numpy as np
import pytest
from pydantic import ValidationError
from scipy import ndimage

from epsr.image import Image
from epsr.logger import FittingError, UsageError
from epsr.niqe import (
    FEATURE_DIM, NiqeModel, aggd_fit, ggd_fit, image_features, mscn, niqe_distance, niqe_fit,
    niqe_score,
)


@pytest.fixture
def corpus(make_image):
    return [make_image(64, 64, channels=1) for _ in range(10)]


@pytest.fixture
def fitted(corpus):
    return niqe_fit(corpus, patch_size=32)


class TestDistributionFits:
    def test_gaussian_shape(self, rng):
        shape, variance = ggd_fit(rng.normal(0.0, 2.0, size=200_000))
        assert shape == pytest.approx(2.0, abs=0.1)
        assert variance == pytest.approx(4.0, rel=0.02)

    def test_laplacian_shape(self, rng):
        shape, _ = ggd_fit(rng.laplace(0.0, 1.0, size=200_000))
        assert shape == pytest.approx(1.0, abs=0.1)

    def test_symmetric_products(self, rng):
        shape, eta, left, right = aggd_fit(rng.normal(size=200_000))
        assert shape == pytest.approx(2.0, abs=0.15)
        assert abs(eta) < 0.02
        assert left == pytest.approx(right, rel=0.05)

    def test_all_zero_values(self):
        assert ggd_fit(np.zeros(16))[1] == 0.0
        assert aggd_fit(np.zeros(16))[1:] == (0.0, 0.0, 0.0)


class TestFeatures:
    def test_constant_plane_has_zero_coefficients(self):
        coeffs, sigma = mscn(np.full((20, 20), 120.0))
        np.testing.assert_allclose(coeffs, 0.0, atol=1e-9)
        np.testing.assert_allclose(sigma, 0.0, atol=1e-4)

    def test_one_vector_per_patch(self, make_image):
        features, sharpness = image_features(make_image(64, 96, channels=1), patch_size=32)
        assert features.shape == (6, FEATURE_DIM)
        assert sharpness.shape == (6,)
        assert np.all(np.isfinite(features))

    def test_image_smaller_than_patch(self):
        with pytest.raises(UsageError):
            image_features(np.zeros((20, 20)), patch_size=32)

    def test_needs_luma(self, make_image):
        with pytest.raises(UsageError, match="rgb_to_y"):
            image_features(make_image(64, 64), patch_size=32)

    def test_odd_patch(self):
        with pytest.raises(UsageError):
            image_features(np.zeros((64, 64)), patch_size=33)

    def test_sharpness_is_local_variance(self, make_image):
        image = make_image(64, 64, channels=1)
        _, sharpness = image_features(image, patch_size=32)
        _, sigma = mscn(image.luma_array() * 255.0)
        assert sharpness[0] == pytest.approx(np.mean(sigma[:32, :32] ** 2))
        assert sharpness[3] == pytest.approx(np.mean(sigma[32:, 32:] ** 2))


class TestFitting:
    def test_needs_ten_images(self, corpus):
        with pytest.raises(FittingError) as info:
            niqe_fit(corpus[:9], patch_size=32)
        assert info.value.counts == {"images": 9}

    def test_flat_corpus_has_no_sharp_patches(self):
        flat = [Image(pixels=np.full((64, 64), 0.4)) for _ in range(10)]
        with pytest.raises(FittingError) as info:
            niqe_fit(flat, patch_size=32)
        assert info.value.counts["sharp_patches"] == 0

    def test_pristine_images_must_hold_two_patches(self, make_image):
        with pytest.raises(UsageError):
            niqe_fit([make_image(48, 48, channels=1) for _ in range(10)], patch_size=32)

    def test_fitted_model(self, fitted):
        assert fitted.mu.shape == (FEATURE_DIM,)
        np.testing.assert_array_equal(fitted.cov, fitted.cov.T)
        assert fitted.patch_size == 32
        assert fitted.threshold > 0.0

    def test_save_and_load(self, fitted, tmp_path):
        restored = NiqeModel.load(fitted.save(tmp_path / "niqe"))
        np.testing.assert_array_equal(restored.mu, fitted.mu)
        np.testing.assert_array_equal(restored.cov, fitted.cov)
        assert restored.patch_size == 32
        assert restored.threshold == fitted.threshold

    def test_model_shape_validation(self):
        with pytest.raises(ValidationError):
            NiqeModel(mu=np.zeros(35), cov=np.eye(FEATURE_DIM))
        with pytest.raises(ValidationError):
            NiqeModel(mu=np.zeros(FEATURE_DIM), cov=np.eye(3))


class TestScoring:
    def test_score_is_finite_and_non_negative(self, fitted, make_image):
        score = niqe_score(make_image(64, 64, channels=1), fitted)
        assert np.isfinite(score) and score >= 0.0

    def test_identical_statistics_are_at_distance_zero(self, rng):
        mu = rng.normal(size=FEATURE_DIM)
        a = rng.normal(size=(50, FEATURE_DIM))
        cov = np.cov(a, rowvar=False)
        assert niqe_distance(mu, cov, mu, cov) == 0.0

    def test_distance_with_identity_covariance(self):
        mu = np.zeros(FEATURE_DIM)
        shifted = mu.copy()
        shifted[:4] = 1.0
        cov = np.eye(FEATURE_DIM)
        assert niqe_distance(mu, cov, shifted, cov) == pytest.approx(2.0)

    def test_single_patch_is_degenerate(self, fitted, make_image):
        with pytest.raises(FittingError, match="Degenerate"):
            niqe_score(make_image(32, 40, channels=1), fitted)


@pytest.mark.slow
def test_blur_scores_worse(make_image):
    model = niqe_fit([make_image(128, 128, channels=1) for _ in range(10)], patch_size=32)
    sharp = [make_image(128, 128, channels=1) for _ in range(10)]
    blurred = [Image(pixels=ndimage.gaussian_filter(im.luma_array(), sigma=2.0)) for im in sharp]
    assert np.mean([niqe_score(im, model) for im in blurred]) > np.mean([niqe_score(im, model) for im in sharp])
