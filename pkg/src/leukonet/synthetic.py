"""Synthetic four-class texture/blob images for smoke tests and demos.

Class 0: one large soft blob.  Class 1: many small blobs.
Class 2: horizontal stripes.   Class 3: diagonal stripes.
Position, frequency, phase, colour and noise are randomized per image.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Rng


def _blob(yy, xx, cy, cx, r):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))


def make_image(label: int, size: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = lambda lo, hi: lo + (hi - lo) * rng.random()  # noqa: E731
    if label == 0:
        r = u(0.18, 0.28) * size
        field = _blob(yy, xx, u(0.3, 0.7) * size, u(0.3, 0.7) * size, r)
    elif label == 1:
        field = np.zeros((size, size))
        for _ in range(6 + rng.below(5)):
            field = np.maximum(field, _blob(yy, xx, u(0, 1) * size, u(0, 1) * size, u(0.04, 0.07) * size))
    elif label == 2:
        period = u(0.15, 0.3) * size
        field = 0.5 + 0.5 * np.sin(2 * math.pi * yy / period + u(0, 2 * math.pi))
    elif label == 3:
        period = u(0.15, 0.3) * size
        field = 0.5 + 0.5 * np.sin(2 * math.pi * (yy + xx) / (period * math.sqrt(2)) + u(0, 2 * math.pi))
    else:
        raise ValueError(f"synthetic generator has 4 classes, got label {label}")
    fg = np.array([u(0.5, 1.0), u(0.2, 0.6), u(0.4, 0.9)])
    bg = np.array([u(0.0, 0.3), u(0.0, 0.3), u(0.1, 0.4)])
    img = bg + field[..., None] * (fg - bg)
    img += rng.normal((size, size, 3), std=0.04, dtype=np.float64)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_dataset(per_class, size: int, rng: Rng):
    """Return (images u8 [N,size,size,3], labels u8 [N]) in class order.

    ``per_class`` is either an int or a list of per-class counts."""
    counts = [per_class] * 4 if isinstance(per_class, int) else list(per_class)
    images, labels = [], []
    for label, count in enumerate(counts):
        for _ in range(count):
            images.append(make_image(label, size, rng))
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.uint8)
