"""Procedural 10-class 32x32 colour image set.

Five classes are silhouettes (disk, square, triangle, ring, plus) and five are
fine textures inside a disk (horizontal, vertical and diagonal gratings,
checkerboard, dot field). Texture classes are separable only through
high-frequency content, so blur and noise erase exactly the cues a clean-trained
network relies on. Every image draws its own colours, placement, scale and a
smooth cluttered background.
"""

from __future__ import annotations

import numpy as np

CLASS_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "hgrating",
    "vgrating",
    "dgrating",
    "checker",
    "dots",
)
NUM_CLASSES = len(CLASS_NAMES)


def _soft(d, width=0.5):
    """Antialiased indicator of ``d < 0``."""
    return np.clip(0.5 - d / (2 * width), 0.0, 1.0)


def _mask(cls, rng, yy, xx, size):
    cx, cy = rng.uniform(11, size - 11, 2)
    r = rng.uniform(7.0, 10.5)
    dx, dy = xx - cx, yy - cy
    dist = np.hypot(dx, dy)
    disk = _soft(dist - r)
    if cls == 0:
        return disk
    if cls == 1:
        t = rng.uniform(-0.3, 0.3)
        u, v = dx * np.cos(t) + dy * np.sin(t), -dx * np.sin(t) + dy * np.cos(t)
        return _soft(np.maximum(np.abs(u), np.abs(v)) - 0.82 * r)
    if cls == 2:
        t = rng.uniform(0, 2 * np.pi)
        d = -np.inf
        for k in range(3):
            a = t + 2 * np.pi * k / 3
            d = np.maximum(d, dx * np.cos(a) + dy * np.sin(a) - 0.55 * r)
        return _soft(d)
    if cls == 3:
        return _soft(np.abs(dist - 0.72 * r) - rng.uniform(1.2, 2.0))
    if cls == 4:
        w = rng.uniform(1.2, 2.0)
        bar1 = np.maximum(np.abs(dx) - w, np.abs(dy) - r)
        bar2 = np.maximum(np.abs(dy) - w, np.abs(dx) - r)
        return _soft(np.minimum(bar1, bar2))
    period = rng.uniform(3.0, 4.5)
    phase = rng.uniform(0, 2 * np.pi)
    if cls == 5:
        tex = np.sin(2 * np.pi * dy / period + phase)
    elif cls == 6:
        tex = np.sin(2 * np.pi * dx / period + phase)
    elif cls == 7:
        s = 1 if rng.random() < 0.5 else -1
        tex = np.sin(2 * np.pi * (dx + s * dy) / (period * np.sqrt(2)) + phase)
    elif cls == 8:
        tex = np.sin(2 * np.pi * dx / period + phase) * np.sin(2 * np.pi * dy / period + phase)
    else:
        tex = -np.ones_like(dist)
        for _ in range(rng.integers(7, 13)):
            px, py = rng.uniform(-0.8 * r, 0.8 * r, 2)
            tex = np.maximum(tex, _soft(np.hypot(dx - px, dy - py) - 1.1) * 2 - 1)
    return disk * (tex > 0)


def _background(rng, yy, xx, size):
    base = rng.uniform(20, 235, 3)
    gx, gy = rng.normal(0, 1.5, (2, 3))
    bg = base[:, None, None] + gx[:, None, None] * (xx - size / 2) + gy[:, None, None] * (yy - size / 2)
    # smooth clutter: a few broad blobs
    for _ in range(rng.integers(1, 4)):
        bx, by = rng.uniform(0, size, 2)
        s = rng.uniform(4, 9)
        amp = rng.normal(0, 30, 3)
        bg += amp[:, None, None] * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * s * s))
    return bg


def _foreground(rng, bg_mean):
    for _ in range(100):
        fg = rng.uniform(0, 255, 3)
        if abs(fg.mean() - bg_mean.mean()) > 50:
            return fg
    return 255.0 - bg_mean


def render(cls, rng, size=32):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = _background(rng, yy, xx, size)
    fg = _foreground(rng, bg.mean(axis=(1, 2)))
    m = _mask(cls, rng, yy, xx, size)
    img = bg * (1 - m) + fg[:, None, None] * m
    img += rng.normal(0, 4.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic(n, seed=0, size=32):
    """``n`` images (uint8, (n, 3, size, size)) with balanced labels in shuffled order."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    for k, c in enumerate(labels):
        images[k] = render(int(c), rng, size)
    return images, labels.astype(np.uint8)
