"""Procedural RGB images: seeded mixtures of gradients, rectangles and circles.

Every image gets a class label usable for conditional generation:
0 = background only, 1 = rectangles only, 2 = circles only, 3 = both.
"""

from __future__ import annotations

import numpy as np

from . import container

NUM_CLASSES = 4


def _gradient_background(rng, size):
    c0 = rng.uniform(-0.9, 0.9, size=3)
    c1 = rng.uniform(-0.9, 0.9, size=3)
    angle = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    return c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]


def _paint_rect(img, rng, size):
    h = rng.integers(size // 6, size // 2)
    w = rng.integers(size // 6, size // 2)
    top = rng.integers(0, size - h)
    left = rng.integers(0, size - w)
    color = rng.uniform(-0.9, 0.9, size=3)
    img[:, top : top + h, left : left + w] = color[:, None, None]


def _paint_circle(img, rng, size):
    r = rng.integers(size // 8, size // 3)
    cy = rng.integers(r, size - r)
    cx = rng.integers(r, size - r)
    color = rng.uniform(-0.9, 0.9, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    img[:, mask] = color[:, None]


def generate_images(n, size=32, seed=0):
    """``n`` images of shape (3, size, size) in [-1, 1] plus integer labels."""
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        img = _gradient_background(rng, size)
        n_rect = int(rng.integers(0, 3))
        n_circ = int(rng.integers(0, 3))
        for _ in range(n_rect):
            _paint_rect(img, rng, size)
        for _ in range(n_circ):
            _paint_circle(img, rng, size)
        images[i] = img
        labels[i] = (1 if n_rect else 0) + (2 if n_circ else 0)
    np.clip(images, -1.0, 1.0, out=images)
    return images, labels


def save_dataset(path, images, labels, tag=""):
    """Write images in the grid container (HWC payload) plus a labels sidecar."""
    hwc = np.transpose(np.asarray(images), (0, 2, 3, 1))
    container.write_grid_file(path, container.IMAGE_MAGIC, hwc, tag)
    with open(labels_path(path), "w") as fh:
        fh.write("index,label\n")
        for i, lab in enumerate(labels):
            fh.write(f"{i},{int(lab)}\n")


def load_dataset(path):
    """Read images back as (n, 3, h, w) float64 plus labels (zeros if no sidecar)."""
    hwc, _tag = container.read_grid_file(path, container.IMAGE_MAGIC)
    images = np.transpose(hwc.astype(np.float64), (0, 3, 1, 2))
    try:
        with open(labels_path(path)) as fh:
            rows = fh.read().strip().splitlines()[1:]
        labels = np.array([int(r.split(",")[1]) for r in rows], dtype=np.int64)
        if len(labels) != len(images):
            raise ValueError(f"labels sidecar has {len(labels)} rows for {len(images)} images")
    except FileNotFoundError:
        labels = np.zeros(len(images), dtype=np.int64)
    return images, labels


def labels_path(dataset_path):
    return str(dataset_path) + ".labels.csv"
