"""Image, depth map and manifest I/O plus a synthetic scene generator.

Supported rasters:

* 8-bit PNG (via Pillow) and binary PPM/PGM (``P6``/``P5``) for images;
* 16-bit binary PGM and single-channel PFM (``Pf``) for depth.  A raw
  depth value of 0 marks an invalid pixel.
"""

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader, DegenerateRange, DimensionMismatch, IoFailure, MissingFile,
    NonPositiveScale, UnsupportedFormat,
)

SPLITS = ("train", "test")


@dataclass
class Image:
    """Row-major raster with values in [0, 1], shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise DimensionMismatch(f"image must be HxWx1 or HxWx3, got {self.data.shape}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def rgb(self):
        """The raster as HxWx3 (gray images are replicated)."""
        return np.repeat(self.data, 3, axis=2) if self.channels == 1 else self.data


@dataclass
class DepthMap:
    """Depth values (height, width) and a boolean validity mask."""

    data: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.data) & (self.data > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.data.shape:
            raise DimensionMismatch("depth and validity mask differ in shape")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class ManifestRecord:
    image: str
    depth: str = None
    pairs: str = None
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


# --- Netpbm / PFM -----------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_bytes(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    return path.read_bytes()


def _parse_pnm_header(raw, n_fields):
    """Magic plus ``n_fields`` integers; returns (tokens, offset of data)."""
    tokens, pos = [], 0
    for _ in range(n_fields + 1):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise CorruptHeader("truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates the header from the samples
    return tokens, pos + 1


def read_pnm(path):
    """Decode a binary PGM/PPM into an integer array (H, W, C) and maxval."""
    raw = _read_bytes(path)
    if raw[:2] not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"{path}: not a binary PGM/PPM")
    tokens, offset = _parse_pnm_header(raw, 3)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptHeader(f"{path}: bad header {tokens}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise CorruptHeader(f"{path}: bad dimensions or maxval")
    channels = 3 if tokens[0] == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(raw) - offset < count * dtype.itemsize:
        raise CorruptHeader(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(height, width, channels).astype(np.int64), maxval


def write_pnm(path, data, maxval=255):
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    height, width, channels = data.shape
    magic = {1: b"P5", 3: b"P6"}[channels]
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + f"\n{width} {height}\n{maxval}\n".encode()
    try:
        Path(path).write_bytes(header + data.astype(dtype).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_pfm(path):
    raw = _read_bytes(path)
    lines = raw.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() != b"Pf":
        raise UnsupportedFormat(f"{path}: not a single-channel PFM")
    try:
        width, height = (int(t) for t in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise CorruptHeader(f"{path}: bad header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    body = lines[3]
    if len(body) < width * height * 4:
        raise CorruptHeader(f"{path}: truncated pixel data")
    data = np.frombuffer(body, dtype=dtype, count=width * height).reshape(height, width)
    # PFM stores rows bottom to top
    return data[::-1].astype(np.float64)


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    height, width = data.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode()
    try:
        Path(path).write_bytes(header + data[::-1].tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# --- public operations ------------------------------------------------------

def load_image(path):
    """Load an 8-bit PNG or binary PPM/PGM scaled to [0, 1]."""
    path = Path(path)
    raw = _read_bytes(path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormat(f"{path}: PNG mode {im.mode} is not 8-bit gray/RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return Image(arr)
    data, maxval = read_pnm(path)
    if maxval > 255:
        raise UnsupportedFormat(f"{path}: images must be 8-bit")
    return Image(data.astype(np.float64) / maxval)


def save_image(path, image):
    write_pnm(path, np.round(np.clip(image.data, 0, 1) * 255), 255)


def load_depth(path, scale=1.0, like=None):
    """Load a 16-bit PGM or PFM depth raster; raw 0 marks invalid pixels.

    ``like`` (an Image or DepthMap) checks the spatial dimensions.
    """
    if scale <= 0:
        raise NonPositiveScale(f"scale must be positive, got {scale}")
    raw = _read_bytes(path)
    if raw[:2] == b"Pf":
        values = read_pfm(path)
    elif raw[:2] == b"P5":
        values, _ = read_pnm(path)
        values = values[:, :, 0].astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: depth must be 16-bit PGM or PFM")
    valid = np.isfinite(values) & (values > 0)
    depth = np.where(valid, values * scale, 0.0)
    if like is not None and (like.height, like.width) != depth.shape:
        raise DimensionMismatch(
            f"{path}: depth {depth.shape} vs companion {(like.height, like.width)}"
        )
    return DepthMap(depth, valid)


def quantize_depth(depth, lo, hi):
    """16-bit codes ``round(65535 * clamp((d - lo) / (hi - lo), 0, 1))``; invalid -> 0."""
    if not lo < hi:
        raise DegenerateRange(f"need lo < hi, got {lo}, {hi}")
    frac = np.clip((depth.data - lo) / (hi - lo), 0.0, 1.0)
    codes = np.round(65535 * frac).astype(np.int64)
    return np.where(depth.valid, codes, 0)


def write_depth_pgm(depth, path, lo, hi):
    write_pnm(path, quantize_depth(depth, lo, hi), 65535)


def write_depth_pfm(depth, path):
    write_pfm(path, np.where(depth.valid, depth.data, 0.0))


def read_manifest(path):
    records = []
    with open(_existing(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    base = Path(path).parent
    for rec in records:
        for p in (rec.image, rec.depth, rec.pairs):
            if p is not None:
                _existing(base / p)
    return records


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"image": rec.image, "depth": rec.depth,
                                 "pairs": rec.pairs, "split": rec.split}) + "\n")


def _existing(path):
    if not Path(path).is_file():
        raise MissingFile(f"no such file: {path}")
    return path


# --- synthetic scenes -------------------------------------------------------

def synth_scene(seed, width=64, height=64, n_objects=4, near=1.0, far=4.0):
    """A deterministic image/depth pair.

    The background is a vertical depth ramp from ``far`` (top row) to
    ``near`` (bottom row) over a mildly shaded two-tone backdrop.  Each
    object is an axis-aligned rectangle of uniform color and uniform depth
    that stands on the ramp: it takes the ramp depth just below its bottom
    edge, capped so it is strictly closer than everything it covers.
    """
    width, height = max(32, int(width)), max(32, int(height))
    n_objects = max(0, int(n_objects))
    rng = np.random.default_rng(seed)

    rows = np.arange(height, dtype=np.float64)
    ramp = far + (near - far) * rows / (height - 1)
    depth = np.repeat(ramp[:, None], width, axis=1)

    horizon = rng.integers(height // 4, 3 * height // 4)
    top, bottom = rng.uniform(0.15, 0.85, size=(2, 3))
    image = np.where((rows < horizon)[:, None, None], top, bottom) * np.ones((height, width, 3))
    image *= rng.uniform(0.85, 1.0, size=(1, width, 1))

    for _ in range(n_objects):
        h = rng.integers(height // 8, height // 3 + 1)
        w = rng.integers(width // 8, width // 3 + 1)
        r0 = rng.integers(0, height - h + 1)
        c0 = rng.integers(0, width - w + 1)
        color = rng.uniform(0.0, 1.0, size=3)
        footing = ramp[r0 + h] if r0 + h < height else 0.95 * near
        behind = depth[r0 : r0 + h, c0 : c0 + w].min()
        depth[r0 : r0 + h, c0 : c0 + w] = min(footing, 0.95 * behind)
        image[r0 : r0 + h, c0 : c0 + w] = color
    return Image(np.clip(image, 0.0, 1.0)), DepthMap(depth)
