"""Procedural sharp test scenes, quantized to 8 bits so PNG and float copies agree."""

from __future__ import annotations

import numpy as np


def checkerboard(h: int, w: int, square: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    board = ((yy // square + xx // square) % 2).astype(np.float64)
    return np.repeat(board[None], 3, axis=0)


def random_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Smooth colour gradient overlaid with random rectangles, discs and stripe patches."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, d = rng.uniform(-0.4, 0.4, 3)
        img[c] = 0.5 + a * yy + b * xx + d * yy * xx
    for _ in range(rng.integers(6, 12)):
        colour = rng.uniform(0, 1, 3)[:, None]
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        size = rng.uniform(0.08, 0.3) * min(h, w)
        py, px = np.mgrid[:h, :w]
        if kind == 0:
            mask = (np.abs(py - cy) < size) & (np.abs(px - cx) < size * rng.uniform(0.3, 1.5))
        elif kind == 1:
            mask = (py - cy) ** 2 + (px - cx) ** 2 < size**2
        else:
            period = rng.integers(3, 9)
            theta = rng.uniform(0, np.pi)
            phase = (py * np.cos(theta) + px * np.sin(theta)) // period
            mask = (np.abs(py - cy) < size) & (np.abs(px - cx) < size) & (phase % 2 == 0)
        img[:, mask] = colour
    return quantize8(np.clip(img, 0.0, 1.0))


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
