"""Independent reference implementations used only by the tests.

None of these import the code paths they check; they are deliberately slow
and literal.
"""
from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal

import numpy as np


def boundary_by_enumeration(k: int, length: int, parts: int) -> int:
    """Integer m nearest to k*length/parts, ties going up, found by scanning."""
    target2 = 2 * k * length  # compare 2*parts*m against 2*k*length
    for m in range(0, length + 1):
        # m is the answer when m - 1/2 <= x < m + 1/2
        if parts * (2 * m - 1) <= target2 < parts * (2 * m + 1):
            return m
    raise AssertionError("no boundary found")


def padding_by_decimal(ratio: str, length: int, parts: int) -> int:
    value = Decimal(ratio) * Decimal(length) / Decimal(parts)
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def rect_oracle(rows, cols, W, H, ratio: str, ids_v, ids_h):
    if not ids_v or not ids_h:
        return None
    clamp_v = [min(max(i, 1), rows) for i in ids_v]
    clamp_h = [min(max(i, 1), cols) for i in ids_h]
    p_y = padding_by_decimal(ratio, H, rows)
    p_x = padding_by_decimal(ratio, W, cols)
    y0 = boundary_by_enumeration(min(clamp_v) - 1, H, rows) - p_y
    y1 = boundary_by_enumeration(max(clamp_v), H, rows) + p_y
    x0 = boundary_by_enumeration(min(clamp_h) - 1, W, cols) - p_x
    x1 = boundary_by_enumeration(max(clamp_h), W, cols) + p_x
    return (max(x0, 0), max(y0, 0), min(x1, W), min(y1, H))


def naive_counts(a: np.ndarray, b: np.ndarray):
    inter = union = 0
    for ra, rb in zip(a.tolist(), b.tolist()):
        for pa, pb in zip(ra, rb):
            if pa and pb:
                inter += 1
            if pa or pb:
                union += 1
    return inter, union


def naive_rle(mask: np.ndarray) -> list:
    h, w = mask.shape
    counts = []
    current = False
    run = 0
    for x in range(w):
        for y in range(h):
            v = bool(mask[y, x])
            if v != current:
                counts.append(run)
                run = 0
                current = v
            run += 1
    counts.append(run)
    return counts


def point_in_polygon(px: float, py: float, xs, ys) -> bool:
    inside = False
    n = len(xs)
    j = n - 1
    for i in range(n):
        if (ys[i] > py) != (ys[j] > py):
            x_cross = xs[i] + (py - ys[i]) * (xs[j] - xs[i]) / (ys[j] - ys[i])
            if px < x_cross:
                inside = not inside
        j = i
    return inside


def bilinear_reference(img: np.ndarray, out_w: int, out_h: int, rows=None, cols=None) -> np.ndarray:
    """Half-pixel-centre bilinear with edge clamping, in float64.

    Only the output ``rows`` x ``cols`` lattice is evaluated (default: all).
    """
    h, w = img.shape[:2]
    rows = list(range(out_h)) if rows is None else list(rows)
    cols = list(range(out_w)) if cols is None else list(cols)
    out = np.zeros((len(rows), len(cols)) + img.shape[2:], dtype=np.float64)
    for i, oy in enumerate(rows):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j, ox in enumerate(cols):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def brute_map(per_image, thresholds) -> float:
    """Mean AP over categories x thresholds by direct enumeration.

    ``per_image`` is a list of (preds, gts) with preds as (mask, score, cat)
    and gts as (mask, cat) tuples of numpy arrays.
    """
    cats = sorted({c for _, gts in per_image for _, c in gts})
    aps = []
    for cat in cats:
        n_gt = sum(1 for _, gts in per_image for _, c in gts if c == cat)
        for thr in thresholds:
            dets = []
            for img_idx, (preds, _) in enumerate(per_image):
                for p_idx, (_, score, c) in enumerate(preds):
                    if c == cat:
                        dets.append((score, img_idx, p_idx))
            dets.sort(key=lambda d: -d[0])
            used = set()
            hits = []
            for score, img_idx, p_idx in dets:
                pmask = per_image[img_idx][0][p_idx][0]
                best, best_key = -1.0, None
                for g_idx, (gmask, c) in enumerate(per_image[img_idx][1]):
                    if c != cat or (img_idx, g_idx) in used:
                        continue
                    i, u = naive_counts(pmask, gmask)
                    v = i / u if u else 0.0
                    if v >= thr and v > best:
                        best, best_key = v, (img_idx, g_idx)
                if best_key is not None:
                    used.add(best_key)
                hits.append(best_key is not None)
            precisions, recalls = [], []
            tp = 0
            for k, hit in enumerate(hits, start=1):
                tp += hit
                precisions.append(tp / k)
                recalls.append(tp / n_gt)
            total = 0.0
            for r in [i / 100 for i in range(101)]:
                candidates = [p for p, rc in zip(precisions, recalls) if rc >= r]
                total += max(candidates) if candidates else 0.0
            aps.append(total / 101)
    return sum(aps) / len(aps)
