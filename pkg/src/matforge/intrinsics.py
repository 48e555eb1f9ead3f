"""Shading/reflectance split of an RGB image with ``image = shading * reflectance``.

The decomposition is a smoothed-luminance Retinex baseline: shading is a
Gaussian-blurred luminance map (floored away from zero) and reflectance is
whatever makes the product reproduce the image exactly.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError

LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_SIGMA = 12.0
DEFAULT_FLOOR = 1e-3
INPUT_MODES = ("rgb", "reflectance", "shading", "branched")


@dataclass
class IntrinsicPair:
    shading: np.ndarray      # (1, H, W), values in (0, 1]
    reflectance: np.ndarray  # (3, H, W), values >= 0

    def reconstruct(self):
        return self.shading * self.reflectance


def luminance(image):
    return np.tensordot(LUMA, image, axes=(0, 0))


def decompose(image, sigma=DEFAULT_SIGMA, s_floor=DEFAULT_FLOOR):
    """Split a (3, H, W) image with values in [0, 1] into an IntrinsicPair."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"expected a (3, H, W) image, got {image.shape}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite pixels")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if not 0 < s_floor <= 1:
        raise ConfigurationError(f"s_floor must lie in (0, 1], got {s_floor}")

    lum = luminance(image)
    blurred = gaussian_filter(lum, sigma=sigma, mode="reflect") if sigma > 0 else lum
    shading = np.clip(blurred, s_floor, 1.0)[None]
    reflectance = image / shading
    return IntrinsicPair(shading=shading, reflectance=reflectance)


def reconstruction_error(image, pair, s_floor=DEFAULT_FLOOR):
    """Max per-channel |image - s*R| over pixels whose shading was not floored."""
    image = np.asarray(image, dtype=np.float64)
    ok = pair.shading[0] > s_floor
    if not ok.any():
        return 0.0
    return float(np.abs(image - pair.reconstruct())[:, ok].max())


def replicate_shading(shading):
    """(1, H, W) -> (3, H, W) with identical channels."""
    shading = np.asarray(shading)
    if shading.ndim != 3 or shading.shape[0] != 1:
        raise ConfigurationError(f"expected a (1, H, W) shading map, got {shading.shape}")
    return np.repeat(shading, 3, axis=0)


def select_input(image, mode="rgb", pair=None, sigma=DEFAULT_SIGMA, s_floor=DEFAULT_FLOOR):
    """Network input for ``mode``.

    ``rgb`` returns the image itself, ``reflectance`` the 3-channel albedo,
    ``shading`` the shading replicated to 3 channels and ``branched`` the
    six-channel stack (reflectance, replicated shading) consumed by the
    two-tower net. Pass ``pair`` to reuse a cached decomposition.
    """
    if mode not in INPUT_MODES:
        raise ConfigurationError(f"unknown input mode {mode!r}; choose from {INPUT_MODES}")
    if mode == "rgb":
        return image
    if pair is None:
        pair = decompose(image, sigma, s_floor)
    dtype = np.asarray(image).dtype
    if mode == "reflectance":
        return pair.reflectance.astype(dtype)
    if mode == "shading":
        return replicate_shading(pair.shading).astype(dtype)
    return np.concatenate([pair.reflectance, replicate_shading(pair.shading)]).astype(dtype)
