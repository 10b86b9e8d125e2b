"""Binary containers: grid-array files (features/images) and checkpoints.

Array container (magics "VFFT" for features, "VIMG" for images), little-endian:

    magic (4 bytes) | version u32=1 | count u32 | h u32 | w u32 | d u32
    | tag length u32 | tag UTF-8 | count*h*w*d float32, image-major,
    then row-major, then channel

Checkpoint container (magic "VAVK"):

    magic | version u32 | entries until EOF, each:
    name length u32 | name UTF-8 | rank u32 | dims u32... | float32 data

All reads fail with :class:`ContainerError` carrying the byte offset of the
problem, so truncation is diagnosable.
"""

from __future__ import annotations

import struct

import numpy as np

VERSION = 1
FEATURE_MAGIC = b"VFFT"
IMAGE_MAGIC = b"VIMG"
CHECKPOINT_MAGIC = b"VAVK"


class ContainerError(ValueError):
    """Malformed container file; ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self):
        return self.pos >= len(self.data)


def write_grid_file(path, magic, values, tag=""):
    """Write a (count, h, w, d) float array under the given 4-byte magic."""
    values = np.asarray(values)
    if values.ndim != 4:
        raise ValueError(f"grid container expects (count, h, w, d), got {values.shape}")
    n, h, w, d = values.shape
    tag_bytes = tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IIIII", VERSION, n, h, w, d))
        fh.write(struct.pack("<I", len(tag_bytes)))
        fh.write(tag_bytes)
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_grid_file(path, magic):
    """Read back (values, tag); values are float32 with shape (count, h, w, d)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    got = r.take(4, "magic")
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4)
    n = r.u32("count")
    h = r.u32("height")
    w = r.u32("width")
    d = r.u32("channels")
    tag_len = r.u32("tag length")
    tag = r.take(tag_len, "tag").decode("utf-8")
    payload = r.take(n * h * w * d * 4, "payload")
    if not r.exhausted:
        raise ContainerError("trailing bytes after payload", r.pos)
    values = np.frombuffer(payload, dtype="<f4").reshape(n, h, w, d)
    return values.copy(), tag


def save_tensors(path, tensors, version=VERSION):
    """Write named float32 arrays as a checkpoint."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", version))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path):
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    got = r.take(4, "magic")
    if got != CHECKPOINT_MAGIC:
        raise ContainerError(f"bad magic {got!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    r.u32("version")
    out = {}
    while not r.exhausted:
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        rank = r.u32("rank")
        dims = tuple(r.u32(f"dim {i} of {name}") for i in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(count * 4, f"data of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
