"""Binary masks, the COCO run-length codec, nearest-neighbour resizing and
even-odd polygon rasterization.

RLE follows the COCO convention: counts alternate zero-run / one-run over the
mask flattened in column-major order, always starting with a (possibly empty)
zero run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidInputError


@dataclass(eq=False)
class BinaryMask:
    """A dense boolean mask of shape ``(height, width)``, row-major."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise InvalidInputError(f"mask must be 2-D, got shape {bits.shape}")
        self.bits = bits.astype(bool, copy=False)

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def dims(self) -> Tuple[int, int]:
        """``(width, height)``."""
        return self.width, self.height

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def union(cls, masks: Sequence["BinaryMask"], width: int, height: int) -> "BinaryMask":
        out = np.zeros((height, width), dtype=bool)
        for m in masks:
            if m.dims != (width, height):
                raise InvalidInputError(f"mask dims {m.dims} != {(width, height)}")
            out |= m.bits
        return cls(out)

    def to_rle(self) -> List[int]:
        return rle_encode(self)

    @classmethod
    def from_rle(cls, counts: Sequence[int], width: int, height: int) -> "BinaryMask":
        return rle_decode(counts, (width, height))

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "counts": self.to_rle()}

    @classmethod
    def from_json(cls, data: dict) -> "BinaryMask":
        try:
            return rle_decode(data["counts"], (int(data["width"]), int(data["height"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"bad RLE mask object: {exc}") from exc


def rle_encode(mask: BinaryMask | np.ndarray) -> List[int]:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    flat = bits.T.ravel()  # column-major
    n = flat.size
    if n == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [n]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts: Iterable[int], dims: Tuple[int, int]) -> BinaryMask:
    """Decode COCO column-major counts into a mask of ``dims = (width, height)``."""
    width, height = dims
    if width < 0 or height < 0:
        raise FormatError(f"negative mask dims {dims}")
    values = []
    for c in counts:
        if isinstance(c, bool) or not isinstance(c, (int, np.integer)):
            raise FormatError(f"RLE count {c!r} is not an integer")
        if c < 0:
            raise FormatError(f"negative RLE count {c}")
        values.append(int(c))
    total = sum(values)
    if total != width * height:
        raise FormatError(f"RLE counts sum to {total}, expected {width * height}")
    run_values = np.arange(len(values)) % 2 == 1
    flat = np.repeat(run_values, values)
    return BinaryMask(flat.reshape(width, height).T.copy())


def coco_string_to_counts(s: str | bytes) -> List[int]:
    """Decode pycocotools' compressed counts string (LEB128-like, delta coded)."""
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: List[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise FormatError("truncated compressed RLE string")
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def counts_to_coco_string(counts: Sequence[int]) -> str:
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each destination index (pixel-centre mapping)."""
    # floor((i + 0.5) * src / dst) in exact integer arithmetic
    i = np.arange(dst, dtype=np.int64)
    return ((2 * i + 1) * src) // (2 * dst)


def resize_nearest(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    if width <= 0 or height <= 0:
        raise InvalidInputError(f"target dims must be positive, got {(width, height)}")
    if mask.dims == (width, height):
        return BinaryMask(mask.bits.copy())
    if mask.width == 0 or mask.height == 0:
        raise InvalidInputError("cannot resize an empty mask")
    rows = nearest_indices(mask.height, height)
    cols = nearest_indices(mask.width, width)
    return BinaryMask(mask.bits[np.ix_(rows, cols)])


def rasterize_polygons(polygons: Sequence[Sequence[float]], width: int, height: int) -> BinaryMask:
    """Fill flat ``[x0, y0, x1, y1, ...]`` rings with the even-odd rule.

    A pixel is set when its centre ``(x + 0.5, y + 0.5)`` is inside. All rings
    are filled jointly, so a ring nested in another punches a hole.
    """
    edges = []
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64)
        if pts.ndim != 1 or pts.size % 2 or pts.size < 6:
            raise FormatError(f"polygon needs >= 3 (x, y) pairs, got {pts.size} values")
        xy = pts.reshape(-1, 2)
        nxt = np.roll(xy, -1, axis=0)
        edges.append(np.hstack([xy, nxt]))
    out = np.zeros((height, width), dtype=bool)
    if not edges or width == 0 or height == 0:
        return BinaryMask(out)
    e = np.vstack(edges)
    x0, y0, x1, y1 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    xc = np.arange(width) + 0.5
    for row in range(height):
        yc = row + 0.5
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        t = (yc - y0[crosses]) / (y1[crosses] - y0[crosses])
        xs = np.sort(x0[crosses] + t * (x1[crosses] - x0[crosses]))
        # parity of crossings strictly left of each pixel centre
        parity = np.searchsorted(xs, xc, side="right") % 2
        out[row] = parity == 1
    return BinaryMask(out)
