"""
Image I/O and datasets.

* Binary and ASCII PGM/PPM (P2, P3, P5, P6) decoding and binary encoding,
  8- or 16-bit.
* Class-per-directory dataset scanning (``root/<class>/<image>``).
* Bilinear resizing with half-pixel centres.
* A synthetic outline-shapes dataset whose classes differ only in edges.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, ValidationError
from .tensor import Tensor
from .training import ArrayDataset

IMAGE_EXTENSIONS = (".pgm", ".ppm", ".pnm")
SHAPE_CLASSES = ("square", "circle", "triangle", "cross")


# ---------------------------------------------------------------------------
# PNM codec
# ---------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise DatasetError("truncated PNM header")
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode PGM/PPM bytes into (H, W, C) integer samples and the maxval."""
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DatasetError(f"not a PGM/PPM stream (magic {magic!r})")
    tokens, pos = _header_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise DatasetError(f"malformed PNM header: {tokens}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DatasetError(f"invalid PNM dimensions/maxval: {width}x{height} max {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        # exactly one whitespace byte separates the header from the raster
        pos += 1
        dtype = ">u2" if maxval > 255 else "u1"
        nbytes = count * np.dtype(dtype).itemsize
        raster = buf[pos : pos + nbytes]
        if len(raster) < nbytes:
            raise DatasetError(f"truncated raster: expected {nbytes} bytes, got {len(raster)}")
        data = np.frombuffer(raster, dtype=dtype).astype(np.int64)
    else:
        values = buf[pos:].split()
        if len(values) < count:
            raise DatasetError(f"truncated ASCII raster: expected {count} samples, got {len(values)}")
        data = np.array([int(v) for v in values[:count]], dtype=np.int64)
    if data.max(initial=0) > maxval:
        raise DatasetError("sample exceeds declared maxval")
    return data.reshape(height, width, channels), maxval


def encode_pnm(samples: np.ndarray, maxval: int = 255) -> bytes:
    """Encode (H, W) or (H, W, 1|3) integer samples as binary P5/P6."""
    arr = np.asarray(samples)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValidationError(f"cannot encode array of shape {samples.shape} as PGM/PPM")
    if not 0 < maxval < 65536:
        raise ValidationError(f"maxval must lie in [1, 65535], got {maxval}")
    if arr.min() < 0 or arr.max() > maxval:
        raise ValidationError(f"samples must lie in [0, {maxval}]")
    h, w, c = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def read_pnm(path: str) -> tuple[np.ndarray, int]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from exc
    try:
        return decode_pnm(buf)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def write_pnm(path: str, samples: np.ndarray, maxval: int = 255) -> None:
    data = encode_pnm(samples, maxval)
    with open(path, "wb") as fh:
        fh.write(data)


def to_samples(img: np.ndarray, maxval: int = 255) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) integers in [0, maxval], rounded and clipped."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * maxval).astype(np.int64).transpose(1, 2, 0)


def load_image(path: str) -> np.ndarray:
    """(C, H, W) float image scaled to [0, 1]."""
    samples, maxval = read_pnm(path)
    return samples.transpose(2, 0, 1).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array to ``size`` = (H', W').

    Output pixel centres map to ``(i + 0.5) * H / H' - 0.5`` in the source,
    clamped to the border, so resizing to the same size is the identity.
    """
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[-2:]
    oh, ow = int(size[0]), int(size[1])
    if (oh, ow) == (h, w):
        return arr.copy()
    r0, r1, fr = _interp_axis(h, oh)
    c0, c1, fc = _interp_axis(w, ow)
    top = arr[..., r0, :] * (1 - fr)[:, None] + arr[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def load_resize(path: str, size: Sequence[int] = (64, 64)) -> Tensor:
    """Decode an image, scale to [0, 1] and resize; returns a (1, C, H, W) tensor."""
    return Tensor(resize_bilinear(load_image(path), size)[None])


# ---------------------------------------------------------------------------
# Class-per-directory datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    class_names: tuple[str, ...]
    files: tuple[tuple[str, ...], ...]
    resolution: tuple[int, int] = (64, 64)

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(f) for c, f in zip(self.class_names, self.files)}

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "class_names": list(self.class_names),
            "files": [list(f) for f in self.files],
            "resolution": list(self.resolution),
        }


def scan_dataset(root: str, resolution: Sequence[int] = (64, 64)) -> DatasetManifest:
    """Sorted manifest of ``root/<class>/<image>``; every file's header is decoded."""
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise DatasetError(f"no class directories under {root!r}")
    files = []
    for cls in classes:
        cdir = os.path.join(root, cls)
        entries = sorted(e for e in os.listdir(cdir) if os.path.isfile(os.path.join(cdir, e)))
        if not entries:
            raise DatasetError(f"class {cls!r} has no images")
        for e in entries:
            path = os.path.join(cdir, e)
            if not e.lower().endswith(IMAGE_EXTENSIONS):
                raise DatasetError(f"unsupported file {path!r} (expected {', '.join(IMAGE_EXTENSIONS)})")
            read_pnm(path)
        files.append(tuple(os.path.join(cls, e) for e in entries))
    return DatasetManifest(os.path.abspath(root), tuple(classes), tuple(files), (int(resolution[0]), int(resolution[1])))


def load_dataset(manifest: DatasetManifest) -> ArrayDataset:
    """Decode and resize every image; grayscale is promoted to RGB when the tree mixes both."""
    images, labels = [], []
    for label, rels in enumerate(manifest.files):
        for rel in rels:
            images.append(resize_bilinear(load_image(os.path.join(manifest.root, rel)), manifest.resolution))
            labels.append(label)
    channels = max(img.shape[0] for img in images)
    images = [np.repeat(img, channels, axis=0) if img.shape[0] != channels else img for img in images]
    return ArrayDataset(np.stack(images), np.array(labels), list(manifest.class_names))


# ---------------------------------------------------------------------------
# Synthetic outline shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticShapesSpec:
    """Outline shapes on a flat background.

    ``scale`` bounds the shape's half-extent as a fraction of the resolution;
    ``thickness`` is the stroke width in pixels.
    """

    classes: tuple[str, ...] = SHAPE_CLASSES
    samples_per_class: int = 200
    resolution: int = 28
    noise: float = 0.05
    background: tuple[float, float] = (0.0, 0.3)
    foreground: tuple[float, float] = (0.7, 1.0)
    scale: tuple[float, float] = (0.25, 0.42)
    thickness: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown or not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValidationError(f"classes must be distinct members of {SHAPE_CLASSES}, got {self.classes}")
        if self.resolution < 16:
            raise ValidationError(f"resolution must be >= 16, got {self.resolution}")
        if self.samples_per_class < 1 or self.noise < 0:
            raise ValidationError("samples_per_class must be >= 1 and noise >= 0")
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid scale range {self.scale}")
        if hi * self.resolution + self.thickness / 2 + 1 > self.resolution / 2:
            raise ValidationError(f"shape scale {hi} is too large for resolution {self.resolution}")


@dataclass
class ShapesDataset(ArrayDataset):
    bboxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    clean: Optional[np.ndarray] = None


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float, thickness: float) -> np.ndarray:
    """Boolean stroke mask of an outline centred at (cx, cy) with half-extent ``r``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    half = thickness / 2
    if kind == "square":
        dist = np.abs(np.maximum(np.abs(dx), np.abs(dy)) - r)
    elif kind == "circle":
        dist = np.abs(np.hypot(dx, dy) - r)
    elif kind == "triangle":
        # upward triangle inscribed in the circle of radius r
        verts = [(0.0, -r), (r * np.sqrt(3) / 2, r / 2), (-r * np.sqrt(3) / 2, r / 2)]
        dist = np.full(dx.shape, np.inf)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            dist = np.minimum(dist, _segment_distance(dx, dy, x0, y0, x1, y1))
    elif kind == "cross":
        dist = np.minimum(_segment_distance(dx, dy, -r, 0, r, 0), _segment_distance(dx, dy, 0, -r, 0, r))
    else:
        raise ValidationError(f"unknown shape {kind!r}")
    return dist <= half


def _segment_distance(px, py, x0, y0, x1, y1) -> np.ndarray:
    vx, vy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * vx + (py - y0) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * vx), py - (y0 + t * vy))


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def generate_shapes(spec: SyntheticShapesSpec = SyntheticShapesSpec(), out_dir: Optional[str] = None) -> ShapesDataset:
    """Class-balanced outline dataset; geometry and noise use separate streams of ``spec.seed``.

    Bounding boxes are (row0, col0, row1, col1), end-exclusive.  When
    ``out_dir`` is given each sample is also written as an 8-bit PGM under
    ``out_dir/<class>/``.
    """
    geo = np.random.default_rng([spec.seed, 0])
    noise_rng = np.random.default_rng([spec.seed, 1])
    size = spec.resolution
    n = spec.samples_per_class * len(spec.classes)
    clean = np.empty((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    i = 0
    for _ in range(spec.samples_per_class):
        for label, kind in enumerate(spec.classes):
            r = geo.uniform(*spec.scale) * size
            margin = r + spec.thickness / 2 + 1
            cx, cy = geo.uniform(margin, size - margin, size=2)
            bg = geo.uniform(*spec.background)
            fg = geo.uniform(*spec.foreground)
            mask = shape_mask(kind, size, cx, cy, r, spec.thickness)
            clean[i, 0] = np.where(mask, fg, bg)
            labels[i] = label
            boxes[i] = _bbox(mask)
            i += 1
    x = clean + noise_rng.normal(0.0, 1.0, clean.shape) * spec.noise if spec.noise > 0 else clean.copy()
    ds = ShapesDataset(x, labels, list(spec.classes), bboxes=boxes, clean=clean)
    if out_dir is not None:
        for kind in spec.classes:
            os.makedirs(os.path.join(out_dir, kind), exist_ok=True)
        for j in range(n):
            kind = spec.classes[labels[j]]
            write_pnm(os.path.join(out_dir, kind, f"{j:05d}.pgm"), to_samples(x[j]))
    return ds
