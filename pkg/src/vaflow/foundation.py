"""Frozen feature targets: a synthetic foundation model and feature-file IO.

The synthetic source flattens non-overlapping image patches, projects them
through a fixed seeded orthonormal matrix, and L2-normalizes per location.
It is deterministic, local (a patch only affects its own grid cell), and
self-contained, standing in for a real pretrained backbone.  Features
exported by an external backbone arrive through the "VFFT" file format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .vfloss import FeatureMap


def _orthonormal_rows(d_out, d_in, seed):
    if d_out > d_in:
        raise ValueError(f"cannot build {d_out} orthonormal rows in dimension {d_in}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    q *= np.sign(np.diag(r))  # fix the QR sign ambiguity for determinism
    return q[:, :d_out].T


def synthetic_features(images, seed, d_f, patch):
    """Per-patch orthonormal-projection features, unit-normalized per location.

    ``images``: (b, c, H, W) or (c, H, W) ndarray; H and W must be divisible
    by ``patch``.  A constant channel is appended to each flattened patch
    before projection so an all-zero patch still yields a nonzero direction.
    Returns a batched :class:`FeatureMap`.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    b, c, height, width = arr.shape
    if height % patch or width % patch:
        raise ValueError(f"image sides ({height}x{width}) not divisible by patch {patch}")
    h, w = height // patch, width // patch
    cells = arr.reshape(b, c, h, patch, w, patch).transpose(0, 2, 4, 1, 3, 5).reshape(b, h, w, c * patch * patch)
    cells = np.concatenate([cells, np.ones((b, h, w, 1))], axis=-1)
    proj = _orthonormal_rows(d_f, c * patch * patch + 1, seed)
    feats = cells @ proj.T
    feats /= np.linalg.norm(feats, axis=-1, keepdims=True)
    return FeatureMap(feats, source_tag=f"synthetic(seed={seed},d_f={d_f},patch={patch})")


def save_features(feature_map, path):
    """Persist a batched FeatureMap in the feature wire format."""
    container.write_grid_file(path, container.FEATURE_MAGIC, feature_map.values.data, feature_map.source_tag)


def load_features(path):
    """Load a feature file back into a batched FeatureMap (float32 values)."""
    values, tag = container.read_grid_file(path, container.FEATURE_MAGIC)
    return FeatureMap(values.astype(np.float64), source_tag=tag)


def align_grids(feature_map, target_h, target_w):
    """Bilinear-resample a FeatureMap's grid; identity when sizes already match.

    Corner locations map onto corner locations, so a 2x2 map resampled to
    3x3 has the mean of the four corners at its center.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target grid must be positive, got {target_h}x{target_w}")
    vals = feature_map.values.data
    b, h, w, d = vals.shape
    if (h, w) == (target_h, target_w):
        return feature_map
    rows = np.linspace(0.0, h - 1.0, target_h) if target_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, target_w) if target_w > 1 else np.zeros(1)
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[None, :, None, None]
    fc = (cols - c0)[None, None, :, None]
    top = vals[:, r0][:, :, c0] * (1 - fc) + vals[:, r0][:, :, c1] * fc
    bot = vals[:, r1][:, :, c0] * (1 - fc) + vals[:, r1][:, :, c1] * fc
    out = top * (1 - fr) + bot * fr
    return FeatureMap(out, source_tag=feature_map.source_tag)


@dataclass
class FeatureSource:
    """Where alignment targets come from: a synthetic model or an exported file."""

    kind: str = "synthetic"  # "synthetic" | "file" | "none"
    seed: int = 0
    d_f: int = 24
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "file", "none"):
            raise ValueError(f"unknown feature source kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("file feature source needs a path")

    def dataset_features(self, images, grid_h, grid_w):
        """Features for every image, aligned to the (grid_h, grid_w) latent grid.

        Returns a float64 ndarray (n, grid_h, grid_w, d_f) -- precomputed once
        per training run since the source is frozen.
        """
        if self.kind == "none":
            raise ValueError("feature source disabled")
        if self.kind == "synthetic":
            height, width = images.shape[2], images.shape[3]
            if height % grid_h == 0 and width % grid_w == 0 and height // grid_h == width // grid_w:
                fm = synthetic_features(images, self.seed, self.d_f, height // grid_h)
            else:
                base_patch = max(1, min(height, width) // max(grid_h, grid_w))
                fm = synthetic_features(images, self.seed, self.d_f, base_patch)
                fm = align_grids(fm, grid_h, grid_w)
            return fm.values.data
        fm = align_grids(load_features(self.path), grid_h, grid_w)
        vals = fm.values.data
        if vals.shape[0] != images.shape[0]:
            raise ValueError(f"feature file holds {vals.shape[0]} maps but the dataset has {images.shape[0]} images")
        return vals
