"""A tiny embedded bitmap font for strip labels.

Only digits and a comma are needed. Glyphs are 5x7 cells scaled by an integer
factor, so label rendering never depends on a system font or FreeType build.
"""
from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7

_GLYPHS = {
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
    ",": ["00000", "00000", "00000", "00000", "01100", "00100", "01000"],
}


def glyph(ch: str) -> np.ndarray:
    rows = _GLYPHS[ch]
    return np.array([[c == "1" for c in row] for row in rows], dtype=bool)


def render_text(text: str, height: int = 28, spacing: int = 4) -> np.ndarray:
    """Boolean bitmap of ``text``; ``height`` must be a multiple of the glyph height."""
    if height % GLYPH_H:
        raise ValueError(f"font height must be a multiple of {GLYPH_H}")
    scale = height // GLYPH_H
    parts = []
    for i, ch in enumerate(text):
        if i:
            parts.append(np.zeros((height, spacing), dtype=bool))
        parts.append(np.kron(glyph(ch), np.ones((scale, scale), dtype=bool)))
    if not parts:
        return np.zeros((height, 0), dtype=bool)
    return np.hstack(parts)
