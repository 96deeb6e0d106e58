"""
The physical attack variable: an n x n piecewise-constant RGB surface sized in
meters, its rendering into sensor pixels at a frame's ground sample distance,
and the opaque overlay onto a chip.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

import autodiff as ad
from errors import BelowResolutionError, DataValidationError, FootprintError
from geodata import ImageChip, read_json, write_json, write_ppm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhysicalPatch:
    n: int
    element_size_m: float
    elements: np.ndarray  # n x n x 3, values in [0, 1]

    def __post_init__(self):
        if self.n < 1:
            raise DataValidationError(f"patch needs at least one element per side, got n={self.n}")
        if not self.element_size_m > 0:
            raise DataValidationError(f"element_size_m must be > 0, got {self.element_size_m}")
        el = np.array(self.elements, dtype=np.float32)
        if el.shape != (self.n, self.n, 3):
            raise DataValidationError(f"patch elements must be {self.n}x{self.n}x3, got {el.shape}")
        if not np.all(np.isfinite(el)) or el.min() < 0 or el.max() > 1:
            raise DataValidationError("patch element values must lie in [0, 1]")
        el.flags.writeable = False
        object.__setattr__(self, "elements", el)

    @property
    def side_m(self) -> float:
        return self.n * self.element_size_m

    def with_elements(self, elements: np.ndarray) -> "PhysicalPatch":
        return PhysicalPatch(self.n, self.element_size_m, elements)

    @classmethod
    def uniform(cls, n: int, element_size_m: float, value: float = 0.5) -> "PhysicalPatch":
        return cls(n, element_size_m, np.full((n, n, 3), value, dtype=np.float32))


@dataclass(frozen=True)
class Placement:
    center_px: Tuple[float, float]  # (row, col) in chip pixels

    @classmethod
    def centered(cls, chip_size: int) -> "Placement":
        return cls((chip_size / 2, chip_size / 2))

    def shifted(self, dy: int, dx: int) -> "Placement":
        return Placement((self.center_px[0] + dy, self.center_px[1] + dx))

    def top_left(self, p: int) -> Tuple[int, int]:
        # centred on S/2 this is floor((S - p) / 2)
        return math.floor(self.center_px[0] - p / 2), math.floor(self.center_px[1] - p / 2)


class Footprint(NamedTuple):
    top: int      # unclipped raster origin in chip coordinates
    left: int
    rows: Tuple[int, int]  # clipped [start, stop) in chip coordinates
    cols: Tuple[int, int]
    side: int

    @property
    def pixel_count(self) -> int:
        return (self.rows[1] - self.rows[0]) * (self.cols[1] - self.cols[0])

    @property
    def clipped(self) -> int:
        return self.side * self.side - self.pixel_count


class Composite(NamedTuple):
    image: ad.Tensor
    mask: np.ndarray
    footprint: Footprint


def raster_side(patch: PhysicalPatch, gsd: float) -> int:
    """p = round(n * element_size / gsd), halves rounded up."""
    if not gsd > 0:
        raise DataValidationError(f"gsd must be > 0, got {gsd}")
    p = math.floor(patch.side_m / gsd + 0.5)
    if p < 1:
        raise BelowResolutionError(
            f"patch below sensor resolution: {patch.side_m:g} m at {gsd:g} m/px renders to {p} px")
    return p


def element_index(n: int, p: int) -> np.ndarray:
    """Element covering the centre of each of the p raster pixels along one axis."""
    return np.minimum(np.floor((np.arange(p) + 0.5) * n / p).astype(np.int64), n - 1)


def render(patch: PhysicalPatch, gsd: float, elements: Optional[ad.Tensor] = None) -> Tuple[ad.Tensor, int]:
    """Nearest-element raster of ``elements`` (defaults to the patch's own values)."""
    p = raster_side(patch, gsd)
    if elements is None:
        elements = ad.Tensor(patch.elements)
    idx = element_index(patch.n, p)
    return ad.gather_grid(elements, idx, idx), p


def footprint(side: int, chip_size: int, placement: Placement) -> Footprint:
    top, left = placement.top_left(side)
    rows = (max(top, 0), min(top + side, chip_size))
    cols = (max(left, 0), min(left + side, chip_size))
    if rows[0] >= rows[1] or cols[0] >= cols[1]:
        raise FootprintError(
            f"{side}x{side} footprint at ({top},{left}) lies fully outside the {chip_size}x{chip_size} chip")
    return Footprint(top, left, rows, cols, side)


def _chip_array(chip) -> np.ndarray:
    if isinstance(chip, ImageChip):
        return chip.pixels
    if isinstance(chip, ad.Tensor):
        return chip.data
    return np.asarray(chip)


def overlay(chip: Union[ImageChip, np.ndarray], raster: ad.Tensor, placement: Placement) -> Composite:
    """Opaque replacement of chip pixels by raster pixels inside the footprint."""
    base = _chip_array(chip)
    fp = footprint(raster.shape[0], base.shape[0], placement)
    (r0, r1), (c0, c1) = fp.rows, fp.cols
    window = raster
    if fp.clipped:
        window = ad.crop(raster, r0 - fp.top, r1 - fp.top, c0 - fp.left, c1 - fp.left)
    image = ad.paste(ad.Tensor(base, raster.dtype), window, r0, c0)
    mask = np.zeros(base.shape[:2], dtype=bool)
    mask[r0:r1, c0:c1] = True
    return Composite(image, mask, fp)


def pixel_count(patch: PhysicalPatch, gsd: float, chip_size: int,
                placement: Optional[Placement] = None) -> int:
    """Manipulated pixels: p^2 minus whatever falls outside the chip."""
    placement = placement or Placement.centered(chip_size)
    return footprint(raster_side(patch, gsd), chip_size, placement).pixel_count


def covered_means(pixels: np.ndarray, patch: PhysicalPatch, gsd: float, placement: Placement) -> np.ndarray:
    """Per-element mean of the chip pixels the rendered patch would cover.

    Elements that cover no chip pixel take the mean over the whole footprint.
    """
    p = raster_side(patch, gsd)
    fp = footprint(p, pixels.shape[0], placement)
    idx = element_index(patch.n, p)
    er = idx[fp.rows[0] - fp.top:fp.rows[1] - fp.top]
    ec = idx[fp.cols[0] - fp.left:fp.cols[1] - fp.left]
    covered = np.asarray(pixels[fp.rows[0]:fp.rows[1], fp.cols[0]:fp.cols[1]], dtype=np.float64)

    sums = np.zeros((patch.n, patch.n, 3))
    counts = np.zeros((patch.n, patch.n))
    np.add.at(sums, (er[:, None], ec[None, :]), covered)
    np.add.at(counts, (er[:, None], ec[None, :]), 1.0)
    means = np.broadcast_to(covered.reshape(-1, 3).mean(axis=0), sums.shape).copy()
    hit = counts > 0
    means[hit] = sums[hit] / counts[hit][:, None]
    return np.clip(means, 0, 1).astype(np.float32)


# -- files -----------------------------------------------------------------

def save_patch(patch: PhysicalPatch, path) -> Path:
    """JSON with n, element_size_m and the row-major element values."""
    path = Path(path)
    write_json({"n": patch.n, "element_size_m": patch.element_size_m,
                "elements": patch.elements.reshape(-1).tolist()}, path)
    return path


def load_patch(path) -> PhysicalPatch:
    data = read_json(Path(path))
    try:
        n = int(data["n"])
        elements = np.asarray(data["elements"], dtype=np.float32).reshape(n, n, 3)
        return PhysicalPatch(n, float(data["element_size_m"]), elements)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataValidationError(f"{path}: malformed patch file: {exc}") from exc


def dump_composite(composite: Composite, path) -> None:
    write_ppm(composite.image.data, path)
