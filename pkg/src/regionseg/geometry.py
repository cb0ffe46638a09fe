"""Coordinate math for the region grid.

Everything here works in the normalized image space (``norm_width`` x
``norm_height``, 1000x1000 by default). Rectangles are half-open, origin at the
top-left corner, and rows run top to bottom. Strip ``k`` (1-based) of an axis
of length ``L`` split into ``n`` parts covers ``[b(k-1), b(k))`` where
``b(j) = round(j * L / n)`` with halves rounded away from zero, so strips tile
the axis exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ContractViolation, InvalidInputError
from .masks import BinaryMask


@dataclass(frozen=True)
class GridSpec:
    """``rows`` horizontal strips by ``cols`` vertical strips on a normalized canvas."""

    rows: int
    cols: int
    norm_width: int = 1000
    norm_height: int = 1000
    padding_ratio: float = 0.20

    def __post_init__(self) -> None:
        for name in ("rows", "cols", "norm_width", "norm_height"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        if self.norm_height < self.rows or self.norm_width < self.cols:
            raise InvalidInputError("every strip must be at least one pixel wide")
        if not 0.0 <= float(self.padding_ratio) <= 1.0:
            raise InvalidInputError(f"padding_ratio must be in [0, 1], got {self.padding_ratio}")

    @classmethod
    def square(cls, density: int, **kwargs) -> "GridSpec":
        return cls(rows=density, cols=density, **kwargs)

    def row_boundaries(self) -> list[int]:
        """Pixel rows ``b(0) .. b(rows)`` separating the horizontal strips."""
        return list(_boundaries(self.norm_height, self.rows))

    def col_boundaries(self) -> list[int]:
        return list(_boundaries(self.norm_width, self.cols))

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "norm_width": self.norm_width,
            "norm_height": self.norm_height,
            "padding_ratio": self.padding_ratio,
        }


@dataclass(frozen=True)
class PaddingPx:
    p_x: int
    p_y: int


@dataclass(frozen=True)
class CropRect:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidInputError(f"degenerate rectangle {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, other: "CropRect") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0
            and self.x1 >= other.x1 and self.y1 >= other.y1
        )

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


def round_half_away(q: Fraction | int) -> int:
    q = Fraction(q)
    half = Fraction(1, 2)
    if q >= 0:
        return math.floor(q + half)
    return -math.floor(-q + half)


def strip_boundary(k: int, length: int, parts: int) -> int:
    """``round(k * length / parts)``; the single source of truth for strip edges."""
    return round_half_away(Fraction(k * length, parts))


@lru_cache(maxsize=256)
def _boundaries(length: int, parts: int) -> Tuple[int, ...]:
    return tuple(strip_boundary(k, length, parts) for k in range(parts + 1))


def _ratio(padding_ratio: float) -> Fraction:
    # Interpret the ratio as the decimal literal it was written as (0.2 -> 1/5).
    return Fraction(str(padding_ratio))


@lru_cache(maxsize=256)
def padding_pixels(grid: GridSpec) -> PaddingPx:
    r = _ratio(grid.padding_ratio)
    return PaddingPx(
        p_x=round_half_away(r * Fraction(grid.norm_width, grid.cols)),
        p_y=round_half_away(r * Fraction(grid.norm_height, grid.rows)),
    )


def clamp_ids(ids: Iterable[int], upper: int) -> list[int]:
    return [min(max(int(i), 1), upper) for i in ids]


def region_pixel_bounds(
    grid: GridSpec, ids_v: Sequence[int], ids_h: Sequence[int]
) -> Optional[CropRect]:
    """Pixel rectangle covering the row strips ``ids_v`` and column strips ``ids_h``.

    Returns ``None`` when either list is empty (the object is absent). Ids are
    clamped into range, reduced to their ``[min, max]`` span, converted to
    pixels, padded, and finally clamped to the canvas.
    """
    if len(ids_v) == 0 or len(ids_h) == 0:
        return None
    rows = clamp_ids(ids_v, grid.rows)
    cols = clamp_ids(ids_h, grid.cols)
    pad = padding_pixels(grid)
    start_v, end_v = min(rows), max(rows)
    start_h, end_h = min(cols), max(cols)
    bv = _boundaries(grid.norm_height, grid.rows)
    bh = _boundaries(grid.norm_width, grid.cols)
    y0 = bv[start_v - 1] - pad.p_y
    y1 = bv[end_v] + pad.p_y
    x0 = bh[start_h - 1] - pad.p_x
    x1 = bh[end_h] + pad.p_x
    return CropRect(
        x0=max(x0, 0),
        y0=max(y0, 0),
        x1=min(x1, grid.norm_width),
        y1=min(y1, grid.norm_height),
    )


def _as_raster(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise InvalidInputError(f"raster must be HxW or HxWxC, got shape {arr.shape}")
    return arr


def normalize_image(image, grid: GridSpec | None = None) -> np.ndarray:
    """Resize to the grid's normalized canvas with bilinear resampling.

    Aspect ratio is not preserved. An image already at the target size is
    returned as an unchanged copy.
    """
    grid = grid or GridSpec(rows=9, cols=9)
    arr = _as_raster(image)
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise InvalidInputError(f"cannot normalize an empty image of shape {arr.shape}")
    if (w, h) == (grid.norm_width, grid.norm_height):
        return arr.copy()
    if arr.dtype != np.uint8:
        raise InvalidInputError(f"expected a uint8 raster, got {arr.dtype}")
    resized = Image.fromarray(arr).resize(
        (grid.norm_width, grid.norm_height), resample=Image.Resampling.BILINEAR
    )
    return np.asarray(resized)


def crop(image, rect: CropRect) -> np.ndarray:
    arr = _as_raster(image)
    h, w = arr.shape[:2]
    if rect.x0 < 0 or rect.y0 < 0 or rect.x1 > w or rect.y1 > h:
        raise ContractViolation(f"{rect} lies outside a {w}x{h} image")
    return arr[rect.y0:rect.y1, rect.x0:rect.x1].copy()


def paste_mask(crop_mask: BinaryMask, rect: CropRect, full_dims: Tuple[int, int]) -> BinaryMask:
    """Place a crop-space mask into an all-zero mask of ``full_dims = (W, H)``."""
    if crop_mask.dims != (rect.width, rect.height):
        raise InvalidInputError(
            f"crop mask dims {crop_mask.dims} != rect dims {(rect.width, rect.height)}"
        )
    width, height = full_dims
    if rect.x1 > width or rect.y1 > height:
        raise InvalidInputError(f"{rect} does not fit in {width}x{height}")
    out = np.zeros((height, width), dtype=bool)
    out[rect.y0:rect.y1, rect.x0:rect.x1] = crop_mask.bits
    return BinaryMask(out)


def restrict_mask(mask: BinaryMask, rect: CropRect) -> BinaryMask:
    """Crop-space view of ``mask`` inside ``rect``."""
    return BinaryMask(mask.bits[rect.y0:rect.y1, rect.x0:rect.x1].copy())
