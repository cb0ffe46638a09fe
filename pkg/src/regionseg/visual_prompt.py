"""Region-aware visual prompts and chain-of-thought text prompts.

The split style produces two annotated copies of the normalized image: one cut
into horizontal strips (rows, labelled top to bottom) and one cut into
vertical strips (columns, labelled left to right). The grid style draws both
line sets on one image and labels cells 1..rows*cols in row-major order.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import List, Optional

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .font import render_text
from .geometry import GridSpec

LINE_THICKNESS = 3
FONT_HEIGHT = 28
LABEL_PADDING = 4
LINE_COLOR = (0, 255, 0)
PATCH_COLOR = (0, 0, 0)
TEXT_COLOR = (255, 255, 255)

TEMPLATE_VERSION = "v1"
ABSENCE_INSTRUCTION = (
    "When nothing in the image answers the query, set both ids_v and ids_h to "
    "empty lists and still give a rationale."
)
STEP_HEADERS = (
    "Step 1 - Object class",
    "Step 2 - Attributes",
    "Step 3 - Region IDs",
    "Step 4 - Rationale",
)


class PromptVariant(str, Enum):
    A = "A"  # hierarchical, four explicit steps
    B = "B"  # plain task statement


class VisualStyle(str, Enum):
    SPLIT = "split"
    GRID = "grid"
    NONE = "none"


@dataclass
class AnnotatedImagePair:
    row_annotated: np.ndarray
    col_annotated: np.ndarray


@dataclass
class PromptBundle:
    system_text: str
    user_text: str
    images: List[np.ndarray] = field(default_factory=list)
    sample_id: str = ""

    def digest(self) -> str:
        """SHA-256 over the texts and the raw image bytes (shape-prefixed)."""
        h = hashlib.sha256()
        for part in (self.system_text, self.user_text):
            data = part.encode("utf-8")
            h.update(len(data).to_bytes(8, "big"))
            h.update(data)
        for img in self.images:
            arr = np.ascontiguousarray(img)
            h.update(repr((arr.shape, str(arr.dtype))).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def _check_normalized(image: np.ndarray, grid: GridSpec) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InvalidInputError(f"expected an RGB raster, got shape {arr.shape}")
    if arr.shape[:2] != (grid.norm_height, grid.norm_width):
        raise InvalidInputError(
            f"image is {arr.shape[1]}x{arr.shape[0]}, expected normalized "
            f"{grid.norm_width}x{grid.norm_height}"
        )
    return np.array(arr[:, :, :3], dtype=np.uint8)


def _line_span(boundary: int, limit: int) -> slice:
    lo = boundary - LINE_THICKNESS // 2
    return slice(max(lo, 0), min(lo + LINE_THICKNESS, limit))


def _draw_label(canvas: np.ndarray, text: str, cx: int, cy: int) -> None:
    """Black patch with white text centred on ``(cx, cy)``; clipped to the canvas."""
    bitmap = render_text(text, height=FONT_HEIGHT)
    ph = bitmap.shape[0] + 2 * LABEL_PADDING
    pw = bitmap.shape[1] + 2 * LABEL_PADDING
    patch = np.empty((ph, pw, 3), dtype=np.uint8)
    patch[:] = PATCH_COLOR
    inner = patch[LABEL_PADDING:LABEL_PADDING + bitmap.shape[0], LABEL_PADDING:LABEL_PADDING + bitmap.shape[1]]
    inner[bitmap] = TEXT_COLOR
    top, left = cy - ph // 2, cx - pw // 2
    h, w = canvas.shape[:2]
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + ph, h), min(left + pw, w)
    if y0 >= y1 or x0 >= x1:
        return
    canvas[y0:y1, x0:x1] = patch[y0 - top:y1 - top, x0 - left:x1 - left]


def _draw_row_lines(canvas: np.ndarray, bounds: List[int]) -> None:
    for b in bounds[1:-1]:
        canvas[_line_span(b, canvas.shape[0]), :] = LINE_COLOR


def _draw_col_lines(canvas: np.ndarray, bounds: List[int]) -> None:
    for b in bounds[1:-1]:
        canvas[:, _line_span(b, canvas.shape[1])] = LINE_COLOR


def render_split_prompts(image: np.ndarray, grid: GridSpec) -> AnnotatedImagePair:
    base = _check_normalized(image, grid)
    rows_b = grid.row_boundaries()
    cols_b = grid.col_boundaries()

    row_img = base.copy()
    _draw_row_lines(row_img, rows_b)
    for k in range(1, grid.rows + 1):
        _draw_label(row_img, str(k), grid.norm_width // 2, (rows_b[k - 1] + rows_b[k]) // 2)

    col_img = base.copy()
    _draw_col_lines(col_img, cols_b)
    for k in range(1, grid.cols + 1):
        _draw_label(col_img, str(k), (cols_b[k - 1] + cols_b[k]) // 2, grid.norm_height // 2)

    return AnnotatedImagePair(row_annotated=row_img, col_annotated=col_img)


def render_grid_prompt(image: np.ndarray, grid: GridSpec) -> np.ndarray:
    canvas = _check_normalized(image, grid)
    rows_b = grid.row_boundaries()
    cols_b = grid.col_boundaries()
    _draw_row_lines(canvas, rows_b)
    _draw_col_lines(canvas, cols_b)
    for r in range(grid.rows):
        cy = (rows_b[r] + rows_b[r + 1]) // 2
        for c in range(grid.cols):
            cx = (cols_b[c] + cols_b[c + 1]) // 2
            _draw_label(canvas, str(r * grid.cols + c + 1), cx, cy)
    return canvas


def encode_png(raster: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    path = resources.files("regionseg") / "templates" / f"{name}.{version}.txt"
    return path.read_text(encoding="utf-8").rstrip("\n")


def build_cot_prompt(
    query: str,
    variant: PromptVariant | str,
    grid: GridSpec,
    visual_style: VisualStyle | str = VisualStyle.SPLIT,
) -> PromptBundle:
    """Text parts of the prompt bundle; images are attached separately."""
    if not query or not query.strip():
        raise InvalidInputError("query must be a non-empty string")
    variant = PromptVariant(variant)
    visual_style = VisualStyle(visual_style)
    body = load_template("cot_a" if variant is PromptVariant.A else "cot_b")
    body = body.replace("{visual}", load_template(f"visual_{visual_style.value}"))
    body = body.replace("{schema}", load_template("schema"))
    body = (
        body.replace("{M}", str(grid.rows))
        .replace("{N}", str(grid.cols))
        .replace("{cells}", str(grid.rows * grid.cols))
    )
    # substituted last so placeholders inside the query are left alone
    user_text = body.replace("{query}", query)
    return PromptBundle(system_text=load_template("system"), user_text=user_text)


def make_prompt_bundle(
    normalized_image: np.ndarray,
    query: str,
    grid: GridSpec,
    variant: PromptVariant | str = PromptVariant.A,
    visual_style: VisualStyle | str = VisualStyle.SPLIT,
    sample_id: str = "",
) -> PromptBundle:
    """Full bundle: raw image first, then the annotated image(s) for the style."""
    visual_style = VisualStyle(visual_style)
    bundle = build_cot_prompt(query, variant, grid, visual_style)
    raw = _check_normalized(normalized_image, grid)
    images: List[np.ndarray] = [raw]
    if visual_style is VisualStyle.SPLIT:
        pair = render_split_prompts(raw, grid)
        images += [pair.row_annotated, pair.col_annotated]
    elif visual_style is VisualStyle.GRID:
        images.append(render_grid_prompt(raw, grid))
    bundle.images = images
    bundle.sample_id = sample_id
    return bundle


def save_annotated(pair: AnnotatedImagePair, prefix: str, grid_image: Optional[np.ndarray] = None) -> List[str]:
    paths = [f"{prefix}_rows.png", f"{prefix}_cols.png"]
    for path, img in zip(paths, (pair.row_annotated, pair.col_annotated)):
        with open(path, "wb") as fh:
            fh.write(encode_png(img))
    if grid_image is not None:
        paths.append(f"{prefix}_grid.png")
        with open(paths[-1], "wb") as fh:
            fh.write(encode_png(grid_image))
    return paths
