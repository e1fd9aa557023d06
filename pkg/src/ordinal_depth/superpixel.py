"""Superpixels, their adjacency graph and ordinal point pairs.

Points are superpixel centroids; each is paired with every superpixel at
graph distance one or two.  Pair labels follow the fixed class mapping
EQ -> 0, GT -> 1 (first point further), LT -> 2 (first point closer).
"""

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyImage, NoValidDepthWithinRadius


class Ordinal(enum.IntEnum):
    EQ = 0
    GT = 1
    LT = 2

    @property
    def code(self):
        return "EGL"[self]

    @classmethod
    def from_code(cls, code):
        return cls("EGL".index(code))

    def flipped(self):
        return {Ordinal.EQ: Ordinal.EQ, Ordinal.GT: Ordinal.LT, Ordinal.LT: Ordinal.GT}[self]


@dataclass
class SuperpixelMap:
    labels: np.ndarray     # (H, W) int segment ids 0..S-1
    centroids: np.ndarray  # (S, 2) float (row, col)
    sizes: np.ndarray      # (S,) pixel counts

    @property
    def n_segments(self):
        return len(self.sizes)

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, dtype=np.int64)
        n = int(labels.max()) + 1
        rows, cols = np.indices(labels.shape)
        sizes = np.bincount(labels.ravel(), minlength=n)
        cr = np.bincount(labels.ravel(), weights=rows.ravel(), minlength=n) / sizes
        cc = np.bincount(labels.ravel(), weights=cols.ravel(), minlength=n) / sizes
        return cls(labels, np.stack([cr, cc], axis=1), sizes)

    def point(self, s):
        """Integer pixel nearest to the centroid of segment ``s``."""
        r, c = self.centroids[s]
        h, w = self.labels.shape
        return (min(max(int(round(r)), 0), h - 1), min(max(int(round(c)), 0), w - 1))


@dataclass
class AdjacencyGraph:
    n_nodes: int
    edges: list  # sorted (a, b) with a < b

    def neighbors(self):
        nbrs = [set() for _ in range(self.n_nodes)]
        for a, b in self.edges:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return nbrs


@dataclass
class PairSample:
    i: int
    j: int
    p_i: tuple
    p_j: tuple
    label: Ordinal = None
    source: str = "generated"

    def swapped(self):
        label = None if self.label is None else self.label.flipped()
        return PairSample(self.j, self.i, self.p_j, self.p_i, label, self.source)


# --- SLIC -------------------------------------------------------------------

def grid_interval(height, width, n_segments):
    return math.sqrt(height * width / n_segments)


def _seed_grid(height, width, n_segments):
    """Cell centers of an nr x nc grid with nr * nc <= n_segments."""
    nc = max(1, min(width, math.ceil(math.sqrt(n_segments * width / height) - 1e-9)))
    nr = max(1, min(height, n_segments // nc))
    rs = (np.arange(nr) + 0.5) * height / nr - 0.5
    cs = (np.arange(nc) + 0.5) * width / nc - 0.5
    return np.array([(r, c) for r in rs for c in cs]), max(height / nr, width / nc)


def slic_segment(image, n_segments=200, compactness=10.0, iterations=10):
    """SLIC superpixels in RGB with D = sqrt(dc^2 + (ds / G)^2 m^2).

    Seeds sit on a regular grid with interval G = sqrt(W H / n_segments);
    each iteration assigns every pixel within a 2G x 2G window of a center
    to the closest center, then moves centers to their members' mean.
    Disconnected fragments are merged into the neighboring segment they
    share the longest border with, and labels are compacted to 0..S-1.
    """
    rgb = image.rgb()
    height, width = rgb.shape[:2]
    if height * width == 0:
        raise EmptyImage("image has no pixels")
    if n_segments < 1 or n_segments > height * width:
        raise ValueError(f"n_segments must be in 1..{height * width}")
    if compactness <= 0 or iterations < 1:
        raise ValueError("compactness must be > 0 and iterations >= 1")

    g = grid_interval(height, width, n_segments)
    seeds, spacing = _seed_grid(height, width, n_segments)
    centers_rc = seeds.copy()
    rr = np.clip(np.round(seeds[:, 0]).astype(int), 0, height - 1)
    cc = np.clip(np.round(seeds[:, 1]).astype(int), 0, width - 1)
    centers_col = rgb[rr, cc].astype(np.float64)
    spatial_w = (compactness / g) ** 2
    rows, cols = np.indices((height, width))
    labels = np.zeros((height, width), dtype=np.int64)
    radius = int(math.ceil(max(g, spacing)))

    for _ in range(iterations):
        best = np.full((height, width), np.inf)
        for k, ((cr, ccol), color) in enumerate(zip(centers_rc, centers_col)):
            r0, r1 = max(0, int(cr) - radius), min(height, int(cr) + radius + 2)
            c0, c1 = max(0, int(ccol) - radius), min(width, int(ccol) + radius + 2)
            dc = ((rgb[r0:r1, c0:c1] - color) ** 2).sum(axis=2)
            ds = (rows[r0:r1, c0:c1] - cr) ** 2 + (cols[r0:r1, c0:c1] - ccol) ** 2
            d = dc + ds * spatial_w
            win = best[r0:r1, c0:c1]
            closer = d < win
            win[closer] = d[closer]
            labels[r0:r1, c0:c1][closer] = k
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers_rc))
        live = counts > 0
        for axis, coord in enumerate((rows, cols)):
            sums = np.bincount(flat, weights=coord.ravel(), minlength=len(counts))
            centers_rc[live, axis] = sums[live] / counts[live]
        for ch in range(3):
            sums = np.bincount(flat, weights=rgb[:, :, ch].ravel(), minlength=len(counts))
            centers_col[live, ch] = sums[live] / counts[live]

    labels = enforce_connectivity(labels)
    return SuperpixelMap.from_labels(labels)


def _border_counts(labels, mask):
    """Labels of 4-neighbors of ``mask`` outside it, with multiplicity."""
    out = []
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        moved = np.zeros_like(mask)
        src = [slice(None)] * 2
        dst = [slice(None)] * 2
        for ax, s in enumerate(shift):
            if s == 1:
                src[ax], dst[ax] = slice(0, -1), slice(1, None)
            elif s == -1:
                src[ax], dst[ax] = slice(1, None), slice(0, -1)
        moved[tuple(dst)] = mask[tuple(src)]
        out.append(labels[moved & ~mask])
    return np.concatenate(out)


def enforce_connectivity(labels):
    """Keep the largest 4-connected component of every label and merge the
    rest into the neighboring label with the longest shared border."""
    labels = labels.copy()
    while True:
        orphans = []
        for lab in np.unique(labels):
            comps, n = ndimage.label(labels == lab)
            if n <= 1:
                continue
            sizes = np.bincount(comps.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            orphans += [comps == c for c in range(1, n + 1) if c != keep]
        if not orphans:
            break
        for mask in sorted(orphans, key=lambda m: int(m.sum())):
            nb = _border_counts(labels, mask)
            if len(nb):
                vals, counts = np.unique(nb, return_counts=True)
                labels[mask] = vals[np.argmax(counts)]
    _, compact = np.unique(labels, return_inverse=True)
    return compact.reshape(labels.shape)


# --- graph and pairs --------------------------------------------------------

def build_adjacency(spmap):
    lab = spmap.labels
    pairs = np.concatenate([
        np.stack([lab[:, :-1].ravel(), lab[:, 1:].ravel()], axis=1),
        np.stack([lab[:-1, :].ravel(), lab[1:, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs.sort(axis=1)
    edges = sorted({(int(a), int(b)) for a, b in pairs})
    return AdjacencyGraph(spmap.n_segments, edges)


def second_order_pairs(graph):
    """All {i, j} at graph distance 1 or 2, as sorted (i, j) with i < j."""
    nbrs = graph.neighbors()
    out = set()
    for a in range(graph.n_nodes):
        reach = set(nbrs[a])
        for b in nbrs[a]:
            reach |= nbrs[b]
        out.update((a, b) for b in reach if b > a)
    return sorted(out)


def classify_ratio(x_i, x_j, delta):
    if x_i / x_j > 1 + delta:
        return Ordinal.GT
    if x_j / x_i > 1 + delta:
        return Ordinal.LT
    return Ordinal.EQ


def depth_at(depth, point, radius=None):
    """Depth at ``point``, or at the nearest valid pixel within ``radius``."""
    r, c = point
    if depth.valid[r, c]:
        return float(depth.data[r, c])
    vr, vc = np.nonzero(depth.valid)
    if len(vr):
        d2 = (vr - r) ** 2 + (vc - c) ** 2
        k = int(np.argmin(d2))
        if radius is None or d2[k] <= radius * radius:
            return float(depth.data[vr[k], vc[k]])
    raise NoValidDepthWithinRadius(f"no valid depth near {point}")


def label_pair(depth, p_i, p_j, delta=0.02, radius=None):
    return classify_ratio(depth_at(depth, p_i, radius), depth_at(depth, p_j, radius), delta)


def sample_pairs(pairs, n_per_image, seed):
    """Uniform subsample without replacement, kept in input order."""
    if n_per_image < 1:
        raise ValueError("n_per_image must be >= 1")
    pairs = list(pairs)
    if len(pairs) <= n_per_image:
        return pairs
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(pairs), size=n_per_image, replace=False))
    return [pairs[k] for k in keep]


def generate_samples(spmap, depth, n_per_image, seed, delta=0.02):
    """Labeled centroid pairs for one image.

    Depth is read at the rounded centroid, falling back to the nearest
    valid pixel within two grid intervals.
    """
    graph = build_adjacency(spmap)
    h, w = spmap.labels.shape
    radius = 2 * grid_interval(h, w, spmap.n_segments)
    out = []
    for i, j in sample_pairs(second_order_pairs(graph), n_per_image, seed):
        p_i, p_j = spmap.point(i), spmap.point(j)
        out.append(PairSample(i, j, p_i, p_j, label_pair(depth, p_i, p_j, delta, radius)))
    return out


# --- pairs CSV --------------------------------------------------------------

PAIR_FIELDS = ["i", "j", "r_i", "c_i", "r_j", "c_j", "label"]


def write_pairs_csv(path, samples):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PAIR_FIELDS)
        for s in samples:
            wr.writerow([s.i, s.j, *s.p_i, *s.p_j, "" if s.label is None else s.label.code])


def read_pairs_csv(path):
    """Read a generated pairs file or a DIW-style ``r1,c1,r2,c2,label`` file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for k, row in enumerate(rows):
        label = row.get("label") or None
        label = Ordinal.from_code(label) if label else None
        if "r1" in row:
            out.append(PairSample(-1, -1, (int(row["r1"]), int(row["c1"])),
                                  (int(row["r2"]), int(row["c2"])), label, "annotated"))
        else:
            out.append(PairSample(int(row["i"]), int(row["j"]),
                                  (int(row["r_i"]), int(row["c_i"])),
                                  (int(row["r_j"]), int(row["c_j"])), label))
    return out
