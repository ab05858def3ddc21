"""Natural image quality evaluator: pristine-model fitting and scoring.

Features follow the usual NIQE recipe. Luma values in 0..255 are MSCN
normalized with a 7x7 Gaussian (sigma 7/6). Each patch yields a generalized
Gaussian fit of the coefficients (shape, variance) and asymmetric generalized
Gaussian fits (shape, mean, left variance, right variance) of the horizontal,
vertical and two diagonal neighbour products. That gives 18 values per scale,
and two scales give 36. The second scale is a bicubic half-size image read with
half-size patches, so each patch contributes one 36-dim vector.
"""

from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import linalg, ndimage, special

from .checkpoint import load_archive, save_archive
from .image import Image, resize_array
from .logger import logger, log_execution_time, FittingError, UsageError

FEATURES_PER_SCALE = 18
SCALES = 2
FEATURE_DIM = FEATURES_PER_SCALE * SCALES
DEFAULT_PATCH = 96
SHARPNESS_PERCENTILE = 75.0
MIN_FIT_IMAGES = 10
MIN_SHARP_PATCHES = 2
MSCN_C = 1.0
MIN_SHARPNESS = 1e-3

_GAMMA_GRID = np.arange(0.2, 10.0, 0.001)
_GAMMA_RATIO = special.gamma(2.0 / _GAMMA_GRID) ** 2 / (
    special.gamma(1.0 / _GAMMA_GRID) * special.gamma(3.0 / _GAMMA_GRID)
)


class NiqeModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mu: np.ndarray
    cov: np.ndarray
    patch_size: int = DEFAULT_PATCH
    threshold: float = 0.0
    percentile: float = SHARPNESS_PERCENTILE

    @field_validator("mu", mode="before")
    @classmethod
    def _mu_shape(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        if value.shape != (FEATURE_DIM,):
            raise ValueError(f"mu must have {FEATURE_DIM} entries, got {value.shape}")
        return value

    @field_validator("cov", mode="before")
    @classmethod
    def _cov_shape(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError(f"cov must be {FEATURE_DIM}x{FEATURE_DIM}, got {value.shape}")
        return (value + value.T) / 2.0

    def save(self, path: Union[str, Path]) -> Path:
        return save_archive(
            path,
            {"mu": self.mu, "cov": self.cov},
            {
                "patch_size": self.patch_size,
                "threshold": self.threshold,
                "percentile": self.percentile,
                "scales": SCALES,
                "feature_dim": FEATURE_DIM,
            },
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NiqeModel":
        tensors, metadata = load_archive(path)
        if metadata.get("scales", SCALES) != SCALES:
            raise FittingError(f"NIQE model {path} uses {metadata.get('scales')} scales; expected {SCALES}")
        return cls(
            mu=tensors["mu"],
            cov=tensors["cov"],
            patch_size=int(metadata.get("patch_size", DEFAULT_PATCH)),
            threshold=float(metadata.get("threshold", 0.0)),
            percentile=float(metadata.get("percentile", SHARPNESS_PERCENTILE)),
        )


def _gauss_window(radius: int = 3, sigma: float = 7.0 / 6.0) -> np.ndarray:
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return taps / taps.sum()


def mscn(luma255: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(MSCN coefficients, local standard deviation) of a 0..255 luma plane."""
    image = np.asarray(luma255, dtype=np.float64)
    window = _gauss_window()
    mu = ndimage.correlate1d(ndimage.correlate1d(image, window, axis=0, mode="nearest"),
                             window, axis=1, mode="nearest")
    second = ndimage.correlate1d(ndimage.correlate1d(image * image, window, axis=0, mode="nearest"),
                                 window, axis=1, mode="nearest")
    sigma = np.sqrt(np.abs(second - mu * mu))
    return (image - mu) / (sigma + MSCN_C), sigma


def ggd_fit(values: np.ndarray) -> Tuple[float, float]:
    """Moment-matched generalized Gaussian (shape, variance)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    variance = float(np.mean(values * values))
    mean_abs = float(np.mean(np.abs(values)))
    if mean_abs == 0.0:
        return float(_GAMMA_GRID[-1]), 0.0
    rho = variance / (mean_abs * mean_abs)
    shape = _GAMMA_GRID[np.argmin(np.abs(1.0 / _GAMMA_RATIO - rho))]
    return float(shape), variance


def aggd_fit(values: np.ndarray) -> Tuple[float, float, float, float]:
    """Asymmetric generalized Gaussian (shape, mean, left variance, right variance)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    squares = values * values
    left = squares[values < 0]
    right = squares[values >= 0]
    left_std = np.sqrt(left.mean()) if left.size else 0.0
    right_std = np.sqrt(right.mean()) if right.size else 0.0
    mean_sq = squares.mean()
    if right_std == 0.0 or left_std == 0.0 or mean_sq == 0.0:
        return float(_GAMMA_GRID[-1]), 0.0, float(left_std ** 2), float(right_std ** 2)

    gamma_hat = left_std / right_std
    r_hat = np.mean(np.abs(values)) ** 2 / mean_sq
    r_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    shape = float(_GAMMA_GRID[np.argmin((_GAMMA_RATIO - r_norm) ** 2)])

    ratio = np.sqrt(special.gamma(1.0 / shape) / special.gamma(3.0 / shape))
    left_beta = ratio * left_std
    right_beta = ratio * right_std
    eta = (right_beta - left_beta) * special.gamma(2.0 / shape) / special.gamma(1.0 / shape)
    return shape, float(eta), float(left_beta ** 2), float(right_beta ** 2)


def neighbour_products(coeffs: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Horizontal, vertical and both diagonal products within the patch."""
    horizontal = coeffs[:, :-1] * coeffs[:, 1:]
    vertical = coeffs[:-1, :] * coeffs[1:, :]
    diag_main = coeffs[:-1, :-1] * coeffs[1:, 1:]
    diag_anti = coeffs[:-1, 1:] * coeffs[1:, :-1]
    return horizontal, vertical, diag_main, diag_anti


def patch_features(coeffs: np.ndarray) -> np.ndarray:
    features = list(ggd_fit(coeffs))
    for product in neighbour_products(coeffs):
        features.extend(aggd_fit(product))
    return np.asarray(features)


def _as_luma255(image: Union[Image, np.ndarray]) -> np.ndarray:
    if isinstance(image, Image):
        if image.channels != 1:
            raise UsageError("NIQE needs a luma image; apply rgb_to_y first", argument="image")
        return image.pixels[:, :, 0] * 255.0
    values = np.asarray(image, dtype=np.float64)
    if values.ndim != 2:
        raise UsageError(f"NIQE needs a 2-d luma plane, got shape {values.shape}", argument="image")
    return values * 255.0


def image_features(image: Union[Image, np.ndarray], patch_size: int = DEFAULT_PATCH) -> Tuple[np.ndarray, np.ndarray]:
    """(patch features N x 36, patch sharpness N) over a non-overlapping grid.

    Sharpness is the mean local variance of the fine-scale patch.
    """
    if patch_size % 2:
        raise UsageError(f"patch_size must be even, got {patch_size}", argument="patch_size")
    luma = _as_luma255(image)
    rows, cols = luma.shape[0] // patch_size, luma.shape[1] // patch_size
    if rows == 0 or cols == 0:
        raise UsageError(
            f"Image {luma.shape} is smaller than the NIQE patch size {patch_size}", argument="image"
        )
    luma = luma[:rows * patch_size, :cols * patch_size]
    half = resize_array(luma, luma.shape[0] // 2, luma.shape[1] // 2, antialias=True)

    coeffs_full, sigma_full = mscn(luma)
    coeffs_half, _ = mscn(half)
    p_half = patch_size // 2

    features, sharpness = [], []
    for r in range(rows):
        for c in range(cols):
            full = coeffs_full[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            small = coeffs_half[r * p_half:(r + 1) * p_half, c * p_half:(c + 1) * p_half]
            features.append(np.concatenate([patch_features(full), patch_features(small)]))
            sharpness.append(np.square(sigma_full[r * patch_size:(r + 1) * patch_size,
                                                  c * patch_size:(c + 1) * patch_size]).mean())
    return np.asarray(features), np.asarray(sharpness)


@log_execution_time
def niqe_fit(
    images: Sequence[Union[Image, np.ndarray]],
    patch_size: int = DEFAULT_PATCH,
    percentile: float = SHARPNESS_PERCENTILE,
) -> NiqeModel:
    """Fit the pristine multivariate Gaussian over the sharpest patches of a corpus."""
    if len(images) < MIN_FIT_IMAGES:
        raise FittingError(
            f"NIQE fitting needs at least {MIN_FIT_IMAGES} images, got {len(images)}",
            counts={"images": len(images)},
        )
    all_features, all_sharpness = [], []
    for image in images:
        luma = _as_luma255(image)
        if min(luma.shape) < 2 * patch_size:
            raise UsageError(
                f"Pristine image {luma.shape} is smaller than twice the patch size {patch_size}",
                argument="images",
            )
        features, sharpness = image_features(image, patch_size)
        all_features.append(features)
        all_sharpness.append(sharpness)

    features = np.concatenate(all_features)
    sharpness = np.concatenate(all_sharpness)
    threshold = float(np.percentile(sharpness, percentile))
    keep = (sharpness > MIN_SHARPNESS) & (sharpness >= threshold)
    counts = {"images": len(images), "patches": int(sharpness.size), "sharp_patches": int(keep.sum())}
    if keep.sum() < MIN_SHARP_PATCHES:
        raise FittingError(
            f"Too few sharp patches to fit a NIQE model: {counts['sharp_patches']} of {counts['patches']}",
            counts=counts,
        )

    kept = features[keep]
    model = NiqeModel(
        mu=kept.mean(axis=0),
        cov=np.cov(kept, rowvar=False),
        patch_size=patch_size,
        threshold=threshold,
        percentile=percentile,
    )
    logger.info("NIQE model fitted", threshold=threshold, **counts)
    return model


def niqe_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    diff = mu1 - mu2
    inverse = linalg.pinv((cov1 + cov2) / 2.0)
    return float(np.sqrt(max(float(diff @ inverse @ diff), 0.0)))


def niqe_score(image: Union[Image, np.ndarray], model: NiqeModel) -> float:
    features, _ = image_features(image, model.patch_size)
    if features.shape[0] < 2:
        raise FittingError(
            f"Degenerate NIQE test fit: {features.shape[0]} patch(es) of size {model.patch_size}",
            counts={"patches": int(features.shape[0])},
        )
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
        raise FittingError("Degenerate NIQE test fit: non-finite statistics",
                           counts={"patches": int(features.shape[0])})
    return niqe_distance(model.mu, model.cov, mu, cov)
