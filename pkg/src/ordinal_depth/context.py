"""Per-pair network inputs: two point patches, three nested scale crops
and two location masks.

Geometry conventions: a point (r, c) owns the 16x16 footprint with
top-left corner (r - 8, c - 8).  A ``Rect`` maps onto an output raster by
pixel-center alignment, so output pixel u samples source row
``r0 + (u + 0.5) * h / out_h - 0.5``.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotCollinear
from .superpixel import PAIR_FIELDS, Ordinal, PairSample

PATCH = 16
HALF = PATCH // 2
SCALE_SIZES = (32, 40, 48)
MASK_SIZE = 32
COLLINEAR_THICKNESS = (20, 40, 60)

BUNDLE_FIELDS = ("patch1", "patch2", "scale1", "scale2", "scale3", "mask1", "mask2")
BUNDLE_SHAPES = {
    "patch1": (PATCH, PATCH, 3), "patch2": (PATCH, PATCH, 3),
    "scale1": (32, 32, 3), "scale2": (40, 40, 3), "scale3": (48, 48, 3),
    "mask1": (MASK_SIZE, MASK_SIZE, 1), "mask2": (MASK_SIZE, MASK_SIZE, 1),
}


@dataclass(frozen=True)
class Rect:
    r0: float
    c0: float
    h: float
    w: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"Rect extent must be positive, got h={self.h}, w={self.w}")

    @property
    def center(self):
        return (self.r0 + self.h / 2, self.c0 + self.w / 2)

    @property
    def area(self):
        return self.h * self.w

    def contains(self, other, strict=False):
        if strict:
            return (self.r0 < other.r0 and self.c0 < other.c0
                    and self.r0 + self.h > other.r0 + other.h
                    and self.c0 + self.w > other.c0 + other.w)
        return (self.r0 <= other.r0 and self.c0 <= other.c0
                and self.r0 + self.h >= other.r0 + other.h
                and self.c0 + self.w >= other.c0 + other.w)

    def expanded(self, dr, dc):
        return Rect(self.r0 - dr, self.c0 - dc, self.h + 2 * dr, self.w + 2 * dc)


def footprint(p):
    r, c = (int(round(v)) for v in p)
    return Rect(r - HALF, c - HALF, PATCH, PATCH)


def scale1_box(p_i, p_j, pad=4):
    """Bounding rectangle of both patch footprints, grown by ``pad``."""
    a, b = footprint(p_i), footprint(p_j)
    r0, c0 = min(a.r0, b.r0), min(a.c0, b.c0)
    r1 = max(a.r0 + a.h, b.r0 + b.h)
    c1 = max(a.c0 + a.w, b.c0 + b.w)
    return Rect(r0 - pad, c0 - pad, r1 - r0 + 2 * pad, c1 - c0 + 2 * pad)


def multiscale_boxes(b1):
    """``b1`` plus its concentric expansions by a quarter and a half of its
    height/width on every side (areas 2.25x and 4x)."""
    return b1, b1.expanded(b1.h / 4, b1.w / 4), b1.expanded(b1.h / 2, b1.w / 2)


def collinear_boxes(p_i, p_j):
    """Three boxes 20/40/60 px thick centered on the segment joining two
    points that share a row or column; the long side spans both patches."""
    (ri, ci), (rj, cj) = ((int(round(v)) for v in p) for p in (p_i, p_j))
    if ri == rj:
        c0 = min(ci, cj) - HALF
        span = abs(ci - cj) + PATCH
        return tuple(Rect(ri - t / 2, c0, t, span) for t in COLLINEAR_THICKNESS)
    if ci == cj:
        r0 = min(ri, rj) - HALF
        span = abs(ri - rj) + PATCH
        return tuple(Rect(r0, ci - t / 2, span, t) for t in COLLINEAR_THICKNESS)
    raise NotCollinear(f"{p_i} and {p_j} share neither a row nor a column")


def _sample_coords(start, extent, n_out, n_src):
    # integer and fractional parts kept apart so that integer shifts of
    # ``start`` give bit-identical weights
    base = math.floor(start)
    offs = (start - base) + (np.arange(n_out) + 0.5) * extent / n_out - 0.5
    whole = np.floor(offs)
    lo = base + whole.astype(np.int64)
    frac = offs - whole
    below, above = lo < 0, lo >= n_src - 1
    lo[below], frac[below] = 0, 0.0
    lo[above], frac[above] = n_src - 1, 0.0
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, frac


def crop_resize(data, rect, out_h, out_w):
    """Bilinear resample of ``rect`` from an HxWxC array to out_h x out_w x C.

    Coordinates outside the image are clamped to the border (edge
    replication).
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    r_lo, r_hi, fr = _sample_coords(rect.r0, rect.h, out_h, h)
    c_lo, c_hi, fc = _sample_coords(rect.c0, rect.w, out_w, w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = data[r_lo][:, c_lo] * (1 - fc) + data[r_lo][:, c_hi] * fc
    bot = data[r_hi][:, c_lo] * (1 - fc) + data[r_hi][:, c_hi] * fc
    return top * (1 - fr) + bot * fr


def _mapped_span(start, extent, box_start, box_extent, n):
    scale = n / box_extent
    lo = (start - box_start) * scale
    hi = (start + extent - box_start) * scale
    # guard float noise so symmetric inputs give symmetric spans
    a = max(0, min(n - 1, math.floor(round(lo, 9))))
    b = max(a + 1, min(n, math.ceil(round(hi, 9))))
    return a, b


def location_masks(b1, p_i, p_j, size=MASK_SIZE):
    """Binary masks marking each point's footprint inside ``b1`` resampled
    to ``size`` x ``size``; never empty."""
    masks = []
    for p in (p_i, p_j):
        fp = footprint(p)
        r0, r1 = _mapped_span(fp.r0, fp.h, b1.r0, b1.h, size)
        c0, c1 = _mapped_span(fp.c0, fp.w, b1.c0, b1.w, size)
        m = np.zeros((size, size, 1), dtype=np.float32)
        m[r0:r1, c0:c1] = 1.0
        masks.append(m)
    return tuple(masks)


@dataclass
class ContextBundle:
    patch1: np.ndarray
    patch2: np.ndarray
    scale1: np.ndarray
    scale2: np.ndarray
    scale3: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    pair_ref: PairSample = None

    def arrays(self):
        return [getattr(self, f) for f in BUNDLE_FIELDS]


def context_boxes(pair, mode="standard", pad=4):
    if mode not in ("standard", "diw"):
        raise ValueError(f"mode must be 'standard' or 'diw', got {mode!r}")
    if mode == "diw":
        try:
            return collinear_boxes(pair.p_i, pair.p_j)
        except NotCollinear:
            pass
    return multiscale_boxes(scale1_box(pair.p_i, pair.p_j, pad))


def build_context(image, pair, mode="standard", pad=4):
    rgb = image.rgb()
    boxes = context_boxes(pair, mode, pad)
    crops = [crop_resize(rgb, b, s, s) for b, s in zip(boxes, SCALE_SIZES)]
    patches = [crop_resize(rgb, footprint(p), PATCH, PATCH) for p in (pair.p_i, pair.p_j)]
    m1, m2 = location_masks(boxes[0], pair.p_i, pair.p_j)
    f32 = [a.astype(np.float32) for a in (*patches, *crops)]
    return ContextBundle(*f32, m1, m2, pair_ref=pair)


def stack_bundles(bundles):
    """Network input dict for a list of bundles (masks as two channels)."""
    batch = {name: np.stack([getattr(b, name) for b in bundles])
             for name in ("patch1", "patch2", "scale1", "scale2", "scale3")}
    batch["masks"] = np.stack([np.concatenate([b.mask1, b.mask2], axis=2) for b in bundles])
    return batch


# --- bundle cache -----------------------------------------------------------

def save_bundles(path, bundles):
    """Raw little-endian float32 tensors in fixed field order, one bundle
    after another, with a ``.json`` sidecar of shapes and pair rows."""
    path = Path(path)
    with open(path, "wb") as fh:
        for b in bundles:
            for arr in b.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    rows = []
    for b in bundles:
        p = b.pair_ref
        rows.append(None if p is None else
                    [p.i, p.j, *p.p_i, *p.p_j, "" if p.label is None else p.label.code])
    meta = {"fields": list(BUNDLE_FIELDS),
            "shapes": {k: list(v) for k, v in BUNDLE_SHAPES.items()},
            "pair_columns": PAIR_FIELDS,
            "count": len(bundles), "pairs": rows}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_bundles(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    shapes = [tuple(meta["shapes"][f]) for f in meta["fields"]]
    per = sum(math.prod(s) for s in shapes)
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != per * meta["count"]:
        raise ValueError(f"{path}: expected {per * meta['count']} floats, found {raw.size}")
    out = []
    for k, row in enumerate(meta["pairs"]):
        chunk, arrays, off = raw[k * per : (k + 1) * per], [], 0
        for s in shapes:
            n = math.prod(s)
            arrays.append(chunk[off : off + n].reshape(s).astype(np.float32))
            off += n
        pair = None
        if row is not None:
            i, j, ri, ci, rj, cj, lab = row
            pair = PairSample(i, j, (ri, ci), (rj, cj), Ordinal.from_code(lab) if lab else None)
        out.append(ContextBundle(*arrays, pair_ref=pair))
    return out


class PairDataset:
    """Labeled pairs over a set of images; bundles are built on demand.

    ``items`` is a list of ``(image, pair)``.  ``batch(indices)`` returns
    the network input dict and integer labels.
    """

    def __init__(self, items, mode="standard", pad=4, cache=False):
        self.items = list(items)
        self.mode, self.pad = mode, pad
        self._cache = {} if cache else None

    @classmethod
    def from_images(cls, images, pair_lists, **kw):
        return cls([(img, p) for img, pairs in zip(images, pair_lists) for p in pairs], **kw)

    def __len__(self):
        return len(self.items)

    def bundle(self, k):
        if self._cache is not None and k in self._cache:
            return self._cache[k]
        image, pair = self.items[k]
        b = build_context(image, pair, self.mode, self.pad)
        if self._cache is not None:
            self._cache[k] = b
        return b

    def labels(self):
        return np.array([-1 if p.label is None else int(p.label) for _, p in self.items])

    def batch(self, indices):
        bundles = [self.bundle(int(k)) for k in indices]
        labels = np.array([-1 if b.pair_ref.label is None else int(b.pair_ref.label)
                           for b in bundles], dtype=np.int64)
        return stack_bundles(bundles), labels
