"""Stroke thickness, intensity and slant measured directly from digit images.

Conventions follow the Morpho-MNIST tooling: the image is upsampled before
binarising so that thickness can be resolved below one pixel, thickness is
twice the mean distance-to-background along the skeleton, and slant comes
from second-order moments of the binarised digit. Slant is positive for a
digit whose top leans to the right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize


@dataclass(frozen=True)
class Morphometrics:
    thickness: float
    intensity: float  # 8-bit units
    slant: float  # radians
    defined: bool = True

    def as_tuple(self):
        return (self.thickness, self.intensity, self.slant)


UNDEFINED = Morphometrics(float("nan"), float("nan"), float("nan"), defined=False)


def upsample(image: np.ndarray, scale: int) -> np.ndarray:
    if scale == 1:
        return np.asarray(image, dtype=np.float64)
    return np.clip(ndimage.zoom(np.asarray(image, dtype=np.float64), scale, order=3), 0.0, None)


def binarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground mask: pixels at or above ``threshold`` times the image maximum."""
    peak = float(np.max(image))
    if peak <= 0.0:
        return np.zeros(image.shape, dtype=bool)
    return image >= threshold * peak


def measure_thickness(mask: np.ndarray, scale: int = 1) -> float:
    if not mask.any():
        return float("nan")
    skel = skeletonize(mask)
    if not skel.any():
        return float("nan")
    dist = ndimage.distance_transform_edt(mask)
    return float(2.0 * dist[skel].mean() / scale)


def measure_slant(mask: np.ndarray) -> float:
    rows, cols = np.nonzero(mask)
    if rows.size < 2:
        return float("nan")
    dr = rows - rows.mean()
    dc = cols - cols.mean()
    mu02 = float(np.sum(dr * dr))
    if mu02 == 0.0:
        return float("nan")
    mu11 = float(np.sum(dr * dc))
    return float(np.arctan(-mu11 / mu02))


def measure_intensity(image: np.ndarray, threshold: float = 0.5) -> float:
    mask = binarize(image, threshold)
    if not mask.any():
        return float("nan")
    return float(np.median(image[mask]) * 255.0)


def morphometrics(image: np.ndarray, threshold: float = 0.5, scale: int = 4) -> Morphometrics:
    """Measure (thickness px, intensity 8-bit, slant rad) of one [0, 1] digit image.

    Returns :data:`UNDEFINED` when the binarised image is empty.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.max() <= 0.0:
        return UNDEFINED
    up = upsample(image, scale)
    mask = binarize(up, threshold)
    if not mask.any():
        return UNDEFINED
    thickness = measure_thickness(mask, scale)
    slant = measure_slant(mask)
    intensity = measure_intensity(image, threshold)
    if not np.isfinite([thickness, slant, intensity]).all():
        return UNDEFINED
    return Morphometrics(thickness, intensity, slant)


def batch_morphometrics(images, threshold: float = 0.5, scale: int = 4) -> np.ndarray:
    """Stacked ``(N, 3)`` measurements; undefined rows are NaN."""
    out = np.full((len(images), 3), np.nan)
    for k, img in enumerate(images):
        m = morphometrics(img, threshold, scale)
        if m.defined:
            out[k] = m.as_tuple()
    return out


def shear_image(image: np.ndarray, shear: float) -> np.ndarray:
    """Horizontally shear by ``shear`` (= tan of the added slant) about the row centroid.

    Rows above the centroid move right for positive ``shear``, so the
    measured slant of an upright digit becomes ``arctan(shear)``.
    """
    image = np.asarray(image, dtype=np.float64)
    weights = image.sum(axis=1)
    total = weights.sum()
    r_c = float(np.dot(np.arange(image.shape[0]), weights) / total) if total > 0 else image.shape[0] / 2
    matrix = np.array([[1.0, 0.0], [shear, 1.0]])
    offset = np.array([0.0, -shear * r_c])
    return np.clip(ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant"), 0.0, 1.0)
