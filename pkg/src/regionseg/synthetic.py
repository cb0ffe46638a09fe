"""Seeded synthetic corpora with scripted MLLM answers.

Every sample carries one axis-aligned rectangle or ellipse with a known area,
a templated query, and a canned response whose region ids either cover the
whole object (``cover="exact"``) or stop at its vertical centre line
(``cover="half"``). With the oracle segmenter the expected IoU is 1.0 in the
first case and about 0.5 in the second.

Native image sizes never exceed the normalized canvas, which makes the
nearest-neighbour round trip native -> normalized -> native lossless.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from .corpus import load_corpus, write_manifest
from .errors import InvalidInputError
from .geometry import GridSpec, padding_pixels, strip_boundary
from .masks import BinaryMask, nearest_indices, resize_nearest
from .mllm_client import RegionProposal, format_proposal

COLORS = {
    "red": (220, 40, 40),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "purple": (140, 50, 170),
    "orange": (240, 140, 30),
}
QUERY_TEMPLATES = (
    "Which {color} {shape} would you pick up first?",
    "Point out the {color} {shape} in the picture.",
    "What object here is a {color} {shape}?",
)
SHAPE_NOUN = {"rect": "box", "ellipse": "disc"}


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    count: int = 10
    grid: GridSpec = GridSpec(rows=9, cols=9)
    cover: str = "exact"  # "exact" | "half"
    shapes: tuple = ("rect", "ellipse")
    absent_fraction: float = 0.0
    min_size: int = 320
    max_size: int = 1000


def _strip_of(pos: int, length: int, parts: int) -> int:
    """1-based strip index containing pixel ``pos``."""
    for k in range(1, parts + 1):
        if pos < strip_boundary(k, length, parts):
            return k
    return parts


def _shape_mask(kind: str, w: int, h: int, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    if kind == "rect":
        mx = (xs >= cx - a) & (xs < cx + a)
        my = (ys >= cy - b) & (ys < cy + b)
        return my[:, None] & mx[None, :]
    dx = ((xs - cx) / a) ** 2
    dy = ((ys - cy) / b) ** 2
    return (dy[:, None] + dx[None, :]) <= 1.0


def _analytic_area(kind: str, a: float, b: float) -> float:
    return 4.0 * a * b if kind == "rect" else math.pi * a * b


def _norm_bbox(mask: np.ndarray, grid: GridSpec):
    up = resize_nearest(BinaryMask(mask), grid.norm_width, grid.norm_height).bits
    ys = np.flatnonzero(up.any(axis=1))
    xs = np.flatnonzero(up.any(axis=0))
    return int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1])


def _ids_covering(lo: int, hi: int, length: int, parts: int) -> List[int]:
    return list(range(_strip_of(lo, length, parts), _strip_of(hi, length, parts) + 1))


def _background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    gx = np.linspace(0, 1, w)[None, :, None]
    gy = np.linspace(0, 1, h)[:, None, None]
    base = 90 + 60 * gx * np.array([1.0, 0.6, 0.3]) + 50 * gy * np.array([0.2, 0.5, 1.0])
    noise = rng.integers(-12, 13, size=(h, w, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _place_exact(rng, kind, w, h):
    a = rng.uniform(0.06, 0.25) * w
    b = rng.uniform(0.06, 0.25) * h
    cx = rng.uniform(a + 2, w - a - 2)
    cy = rng.uniform(b + 2, h - b - 2)
    return cx, cy, a, b


def _place_half(rng, kind, w, h, grid: GridSpec):
    """Centre the shape on the right edge of a padded column span."""
    W, N = grid.norm_width, grid.cols
    pad = padding_pixels(grid)
    for _ in range(1000):
        c1 = int(rng.integers(1, N))  # 1 .. N-1, so the cut stays inside the canvas
        cut_norm = strip_boundary(c1, W, N) + pad.p_x
        if cut_norm >= W - 2:
            continue
        cx = cut_norm * w / W
        a_min = (pad.p_x + 2) * w / W + 4
        a_max = min(cx - 2, w - cx - 2, 0.3 * w)
        if a_max <= a_min:
            continue
        a = rng.uniform(a_min, a_max)
        b = rng.uniform(0.06, 0.25) * h
        cy = rng.uniform(b + 2, h - b - 2)
        return cx, cy, a, b, c1
    raise InvalidInputError("could not place a half-cover shape; grid too coarse for image size")


def make_synthetic_corpus(spec: SyntheticSpec, out_dir: str | os.PathLike):
    """Write images, ``manifest.json``, ``responses/`` and ``expected.json``.

    Returns the loaded corpus. Output is a pure function of ``spec``.
    """
    if spec.count < 1:
        raise InvalidInputError("count must be >= 1")
    if spec.cover not in ("exact", "half"):
        raise InvalidInputError(f"unknown cover mode {spec.cover!r}")
    if spec.max_size > min(spec.grid.norm_width, spec.grid.norm_height):
        raise InvalidInputError("native sizes above the normalized canvas break the lossless round trip")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "responses").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    entries, expected = [], []
    for i in range(spec.count):
        sid = f"syn{spec.seed:04d}_{i:04d}"
        w = int(rng.integers(spec.min_size, spec.max_size + 1))
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        kind = str(spec.shapes[int(rng.integers(len(spec.shapes)))])
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        query = QUERY_TEMPLATES[int(rng.integers(len(QUERY_TEMPLATES)))].format(
            color=color, shape=SHAPE_NOUN[kind]
        )
        image = _background(rng, w, h)
        absent = bool(rng.random() < spec.absent_fraction)
        record = {"id": sid, "shape": kind, "width": w, "height": h, "absent": absent}

        if absent:
            annotations = []
            proposal = RegionProposal(
                object_name="", attributes=[], ids_v=[], ids_h=[],
                rationale=f"There is no {color} {SHAPE_NOUN[kind]} anywhere in the image.",
            )
            record.update(expected_iou=1.0, tolerance=0.0)
        else:
            if spec.cover == "exact":
                cx, cy, a, b = _place_exact(rng, kind, w, h)
            else:
                cx, cy, a, b, c1 = _place_half(rng, kind, w, h, grid)
            mask = _shape_mask(kind, w, h, cx, cy, a, b)
            image[mask] = COLORS[color]
            x0, y0, x1, y1 = _norm_bbox(mask, grid)
            ids_v = _ids_covering(y0, y1, grid.norm_height, grid.rows)
            ids_h = _ids_covering(x0, x1, grid.norm_width, grid.cols)
            if spec.cover == "half":
                ids_h = list(range(ids_h[0], c1 + 1))
            proposal = RegionProposal(
                object_name=SHAPE_NOUN[kind], attributes=[color], ids_v=ids_v, ids_h=ids_h,
                rationale=f"The {color} {SHAPE_NOUN[kind]} is the only object of that color.",
            )
            gt_pixels = int(mask.sum())
            ys, xs = np.nonzero(mask)
            bw, bh = int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
            record.update(
                analytic_area=_analytic_area(kind, a, b),
                gt_pixels=gt_pixels,
                expected_iou=1.0 if spec.cover == "exact" else 0.5,
                # two boundary pixels per axis
                tolerance=0.0 if spec.cover == "exact" else 2.0 * (bw + bh) / gt_pixels,
                center=[cx, cy],
                semi_axes=[a, b],
            )
            annotations = [{"type": "rle", "data": BinaryMask(mask).to_json()}]

        Image.fromarray(image).save(out / "images" / f"{sid}.png", compress_level=1)
        preamble = (
            f"Step 1: the query asks for a {SHAPE_NOUN[kind]}.\n"
            f"Step 2: it should be {color}.\n"
            "Step 3: reading the row and column labels.\n"
            "Step 4: see rationale.\n"
        )
        with open(out / "responses" / f"{sid}.txt", "w", encoding="utf-8", newline="") as fh:
            fh.write(format_proposal(proposal, preamble=preamble))
        entries.append({
            "id": sid,
            "image": f"images/{sid}.png",
            "query": query,
            "split": "val",
            "category": SHAPE_NOUN[kind],
            "annotations": annotations,
        })
        expected.append(record)

    write_manifest(out / "manifest.json", entries, categories=sorted(SHAPE_NOUN.values()))
    with open(out / "expected.json", "w", encoding="utf-8") as fh:
        json.dump({"spec": {"seed": spec.seed, "count": spec.count, "cover": spec.cover,
                            "grid": grid.to_json()}, "samples": expected}, fh, indent=1)
    return load_corpus(out)


def covered_fraction_by_pixels(record: dict, grid: GridSpec) -> Optional[float]:
    """Brute-force covered/GT fraction for a half-cover record.

    Rebuilds the shape, keeps pixels whose sampled normalized column lies left
    of the padded cut, and counts.
    """
    if record.get("absent"):
        return None
    w, h = record["width"], record["height"]
    cx, cy = record["center"]
    a, b = record["semi_axes"]
    mask = _shape_mask(record["shape"], w, h, cx, cy, a, b)
    cut = int(round(cx * grid.norm_width / w))
    cols = nearest_indices(grid.norm_width, w)  # normalized column sampled by each native column
    return float(mask[:, cols < cut].sum() / mask.sum())
