"""Run a frozen backbone over an image set and write VFFT feature files.

Images are resized so the backbone's patch grid equals the requested
(h, w) exactly (a patch-14 backbone exporting a 16x16 grid sees 224x224
input).  Only spatial patch tokens are written, image-major / row-major /
channel-last, matching the feature wire format:

    magic "VFFT" | version u32=1 | count u32 | h u32 | w u32 | d u32
    | tag-length u32 | tag utf-8 | count*h*w*d float32 little-endian

Output files are written atomically (temp + rename) and accompanied by a
JSON sidecar recording the backbone, input resolution, and preprocessing.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbones import load_backbone

VFFT_MAGIC = b"VFFT"
IMAGE_MAGIC = b"VIMG"
VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportJob:
    backbone: str
    images: str  # folder of images, or a .vimg dataset file
    grid_h: int
    grid_w: int
    out: str
    pretrained: bool = True
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid must be positive, got {self.grid_h}x{self.grid_w}")


def _read_vimg(path):
    """Minimal reader for the image wire format (count, h, w, c float32)."""
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image container (magic {blob[:4]!r})")
    version, n, h, w, c = struct.unpack("<IIIII", blob[4:24])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (tag_len,) = struct.unpack("<I", blob[24:28])
    payload = blob[28 + tag_len :]
    values = np.frombuffer(payload, dtype="<f4", count=n * h * w * c).reshape(n, h, w, c)
    # [-1, 1] HWC -> [0, 1] CHW
    return (np.transpose(values, (0, 3, 1, 2)).astype(np.float32) + 1.0) / 2.0


def _read_folder(path):
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images ({'/'.join(s.lstrip('.') for s in IMAGE_SUFFIXES)}) under {path}")
    arrays = []
    for file in files:
        with Image.open(file) as img:
            arrays.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    return [np.transpose(a, (2, 0, 1)) for a in arrays], [f.name for f in files]


def load_images(path):
    """Images in [0, 1] CHW plus their names, from a folder or a .vimg file."""
    p = Path(path)
    if p.is_file():
        batch = _read_vimg(p)
        return list(batch), [f"{p.name}[{i}]" for i in range(len(batch))]
    if p.is_dir():
        return _read_folder(p)
    raise FileNotFoundError(f"image source {path} does not exist")


def _preprocess(images, side_h, side_w, mean, std):
    mean_t = torch.tensor(mean).view(1, 3, 1, 1)
    std_t = torch.tensor(std).view(1, 3, 1, 1)
    out = []
    for img in images:
        t = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0)
        t = torch.nn.functional.interpolate(t, size=(side_h, side_w), mode="bilinear", align_corners=False)
        out.append((t - mean_t) / std_t)
    return torch.cat(out)


def write_vfft(path, values, tag=""):
    """Atomic write of a (count, h, w, d) float32 array in the feature format."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 4:
        raise ValueError(f"expected (count, h, w, d), got {values.shape}")
    n, h, w, d = values.shape
    tag_bytes = tag.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(VFFT_MAGIC)
            fh.write(struct.pack("<IIIII", VERSION, n, h, w, d))
            fh.write(struct.pack("<I", len(tag_bytes)))
            fh.write(tag_bytes)
            fh.write(values.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export(job: ExportJob):
    """Run the job; returns (feature_path, sidecar_path)."""
    backbone = load_backbone(job.backbone, pretrained=job.pretrained)
    side_h = backbone.patch * job.grid_h
    side_w = backbone.patch * job.grid_w
    images, names = load_images(job.images)

    torch.manual_seed(0)  # inference is deterministic; belt and braces
    device = torch.device(job.device)
    backbone.model.to(device)
    features = []
    with torch.no_grad():
        for start in range(0, len(images), job.batch_size):
            pixels = _preprocess(images[start : start + job.batch_size],
                                 side_h, side_w, backbone.mean, backbone.std).to(device)
            tokens = backbone.patch_tokens(pixels)
            expect = job.grid_h * job.grid_w
            if tokens.shape[1] != expect:
                raise RuntimeError(
                    f"{job.backbone} produced {tokens.shape[1]} patch tokens for "
                    f"{side_h}x{side_w} input, expected {expect}; valid inputs are "
                    f"multiples of the patch size {backbone.patch} "
                    f"(e.g. {backbone.patch}*{job.grid_h} = {side_h})"
                )
            grid = tokens.reshape(-1, job.grid_h, job.grid_w, backbone.width)
            features.append(grid.cpu().numpy().astype(np.float32))
    values = np.concatenate(features)

    tag = f"{job.backbone}({'pretrained' if job.pretrained else 'random-init'})"
    write_vfft(job.out, values, tag=tag)
    sidecar = {
        "backbone": job.backbone,
        "pretrained": job.pretrained,
        "patch_size": backbone.patch,
        "feature_width": backbone.width,
        "grid": [job.grid_h, job.grid_w],
        "input_resolution": [side_h, side_w],
        "preprocessing": {
            "resize": "bilinear",
            "rescale": "[0,1]",
            "normalize_mean": list(backbone.mean),
            "normalize_std": list(backbone.std),
        },
        "count": int(values.shape[0]),
        "images": names,
    }
    sidecar_path = job.out + ".json"
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return job.out, sidecar_path
