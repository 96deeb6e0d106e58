"""
Subtlety penalty for the patch objective.

Two squared-l2 terms, both restricted to the patch footprint: one over every
footprint pixel, one over footprint pixels next to strong scene edges, so the
optimizer keeps shadows and boundaries that cross the patch.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

import autodiff as ad
from errors import ConfigError, FootprintError, ShapeError
from geodata import ImageChip, write_pbm

logger = logging.getLogger(__name__)

# (row, col) step along the gradient for each quantised orientation: 0, 45, 90, 135 degrees
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class EdgeMask:
    mask: np.ndarray
    sigma: float
    low: float
    high: float

    def dilated(self) -> np.ndarray:
        if not self.mask.any():
            return self.mask.copy()
        return ndimage.binary_dilation(self.mask, structure=_EIGHT_CONNECTED)


@dataclass(frozen=True)
class PenaltyWeights:
    lambda1: float = 1e-3
    lambda2: float = 1e-1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"penalty weights must be nonnegative, got {self.lambda1}, {self.lambda2}")

    def to_dict(self) -> dict:
        return asdict(self)


def grayscale(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64).mean(axis=2)


def gradients(image: np.ndarray, sigma: float):
    """Blurred central-difference gradients (gy along rows, gx along columns)."""
    blurred = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="nearest", truncate=4.0)
    padded = np.pad(blurred, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2
    return gy, gx


def orientation_bins(gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    angle = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)
    return np.mod(np.floor((angle + 22.5) / 45.0), 4).astype(np.int64)


def non_max_suppression(norm: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Keep pixels >= the forward and > the backward neighbour; outside counts as 0."""
    h, w = norm.shape
    padded = np.pad(norm, 1)

    def neighbour(dr, dc):
        return padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    keep = np.zeros(norm.shape, dtype=bool)
    for b, (dr, dc) in enumerate(_DIRECTIONS):
        keep |= (bins == b) & (norm >= neighbour(dr, dc)) & (norm > neighbour(-dr, -dc))
    return keep


def hysteresis(norm: np.ndarray, candidates: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = candidates & (norm >= low)
    strong = candidates & (norm >= high)
    labels, count = ndimage.label(weak, structure=_EIGHT_CONNECTED)
    if not count:
        return np.zeros(norm.shape, dtype=bool)
    connected = np.unique(labels[strong])
    return np.isin(labels, connected[connected > 0])


def canny(image: np.ndarray, sigma: float = 2.0, low: float = 0.1, high: float = 0.2) -> EdgeMask:
    """Canny edges of a 2-D grayscale image; thresholds act on magnitude scaled to max 1."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"canny expects a 2-D grayscale image, got {image.shape}")
    if not 0 <= low < high:
        raise ConfigError(f"canny thresholds must satisfy 0 <= low < high, got {low}, {high}")

    gy, gx = gradients(image, sigma)
    magnitude = np.hypot(gy, gx)
    peak = magnitude.max(initial=0.0)
    if peak <= 0:
        return EdgeMask(np.zeros(image.shape, dtype=bool), sigma, low, high)
    norm = magnitude / peak
    thin = non_max_suppression(norm, orientation_bins(gy, gx))
    return EdgeMask(hysteresis(norm, thin, low, high), sigma, low, high)


def edge_mask_for(chip, sigma: float = 2.0, low: float = 0.1, high: float = 0.2) -> EdgeMask:
    pixels = chip.pixels if isinstance(chip, ImageChip) else chip
    return canny(grayscale(pixels), sigma, low, high)


def penalty_weights_map(footprint: np.ndarray, edges: EdgeMask, w: PenaltyWeights) -> np.ndarray:
    """Per-pixel weight so that sum(weight * ||c - o||^2) is the two-term penalty."""
    footprint = np.asarray(footprint, dtype=bool)
    if not footprint.any():
        raise FootprintError("penalty over an empty footprint")
    if edges.mask.shape != footprint.shape:
        raise ShapeError(f"edge mask {edges.mask.shape} and footprint {footprint.shape} differ")
    weights = footprint * (w.lambda1 / footprint.sum())
    near_edges = footprint & edges.dilated()
    if near_edges.any():
        weights = weights + near_edges * (w.lambda2 / near_edges.sum())
    return weights


def penalty_d(composite: ad.Tensor, original, footprint: np.ndarray, edges: EdgeMask,
              w: PenaltyWeights) -> ad.Tensor:
    base = original.pixels if isinstance(original, ImageChip) else np.asarray(original)
    if composite.shape != base.shape:
        raise ShapeError(f"composite {composite.shape} and original {base.shape} differ")
    weights = penalty_weights_map(footprint, edges, w)
    weights = np.repeat(weights[:, :, None], base.shape[2], axis=2)
    diff = ad.sub(composite, ad.Tensor(base, composite.dtype))
    return ad.sum_all(ad.mul(ad.mul(diff, diff), ad.Tensor(weights, composite.dtype)))


def dump_edge_mask(edges: EdgeMask, path) -> None:
    write_pbm(edges.mask, path)
