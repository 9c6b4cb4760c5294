"""Reference-image preprocessing: masks, thinning, centerline keypoints and
distance maps.  None of this is differentiated; it runs once per frame."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
SPUR_FRACTION = 0.05


class EmptyMaskError(ValueError):
    pass


@dataclass
class Centerline:
    """Ordered base-to-tip points as image coordinates (u, v) = (col + 0.5, row + 0.5)."""

    points: np.ndarray  # (n, 2)
    arclength: np.ndarray  # (n,)

    @classmethod
    def from_pixels(cls, pixels):
        """Build from (row, col) pixel indices."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return cls.from_points(pixels[:, ::-1] + 0.5)

    @classmethod
    def from_points(cls, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return cls(pts, np.concatenate([[0.0], np.cumsum(steps)]))

    @property
    def length(self) -> float:
        return float(self.arclength[-1]) if len(self.arclength) else 0.0

    def __len__(self):
        return self.points.shape[0]


def as_mask(img) -> np.ndarray:
    m = np.asarray(img)
    if m.dtype == bool:
        return m.astype(np.uint8)
    return (m > 0.5).astype(np.uint8) if m.dtype.kind == "f" else (m > 0).astype(np.uint8)


# ----------------------------------------------------------------- segmentation

def rgb_to_hsv(rgb) -> np.ndarray:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""
    x = np.asarray(rgb, dtype=float)
    if x.max(initial=0.0) > 1.0:
        x = x / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, 60.0 * h, 0.0) % 360.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def largest_component(mask) -> np.ndarray:
    """Keep the largest 4-connected component (lowest label wins ties)."""
    labels, n = ndimage.label(as_mask(mask), structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(labels, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)


def color_segment(rgb, hsv_lo, hsv_hi) -> np.ndarray:
    """Threshold in HSV, keep the largest component and fill its holes.

    A hue range with ``lo > hi`` wraps through 0 (e.g. 340..20 for red).
    Raises :class:`EmptyMaskError` when nothing falls inside the ranges.
    """
    hsv = rgb_to_hsv(rgb)
    lo = np.asarray(hsv_lo, dtype=float)
    hi = np.asarray(hsv_hi, dtype=float)
    h = hsv[..., 0]
    hue_ok = (h >= lo[0]) & (h <= hi[0]) if lo[0] <= hi[0] else (h >= lo[0]) | (h <= hi[0])
    m = hue_ok & (hsv[..., 1] >= lo[1]) & (hsv[..., 1] <= hi[1]) & (hsv[..., 2] >= lo[2]) & (hsv[..., 2] <= hi[2])
    if not m.any():
        raise EmptyMaskError("color segmentation produced an empty mask")
    return clean_mask(m)


def clean_mask(mask) -> np.ndarray:
    """Largest 4-connected component with its holes filled."""
    m = as_mask(mask)
    if not m.any():
        raise EmptyMaskError("cannot clean an empty mask")
    return ndimage.binary_fill_holes(largest_component(m)).astype(np.uint8)


# ----------------------------------------------------------------- thinning

def _neighbours(img):
    p = np.pad(img, 1)
    H, W = img.shape
    sl = lambda di, dj: p[1 + di:1 + di + H, 1 + dj:1 + dj + W]
    # P2..P9 clockwise from north
    return [sl(-1, 0), sl(-1, 1), sl(0, 1), sl(1, 1), sl(1, 0), sl(1, -1), sl(0, -1), sl(-1, -1)]


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen two-subpass thinning, repeated until nothing changes."""
    img = as_mask(mask).astype(np.uint8).copy()
    if not img.any():
        raise EmptyMaskError("cannot skeletonize an empty mask")
    while True:
        changed = False
        for step in (0, 1):
            P = _neighbours(img)
            B = sum(p.astype(int) for p in P)
            ring = P + [P[0]]
            A = sum(((ring[k] == 0) & (ring[k + 1] == 1)).astype(int) for k in range(8))
            p2, p4, p6, p8 = P[0], P[2], P[4], P[6]
            if step == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            kill = (img == 1) & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2
            if kill.any():
                img[kill] = 0
                changed = True
        if not changed:
            return img


# ----------------------------------------------------------------- centerline

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _pixel_graph(pixels):
    index = {tuple(p): k for k, p in enumerate(pixels)}
    rows, cols, w = [], [], []
    for k, (i, j) in enumerate(pixels):
        for di, dj in _OFFSETS:
            m = index.get((i + di, j + dj))
            if m is not None:
                rows.append(k)
                cols.append(m)
                w.append(np.hypot(di, dj))
    n = len(pixels)
    return coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()


def _path(pred, a, b):
    out = [b]
    while out[-1] != a:
        out.append(pred[out[-1]])
    return out[::-1]


def _geodesic_diameter(graph, ends):
    dist, pred = dijkstra(graph, directed=False, indices=ends, return_predecessors=True)
    sub = dist[:, ends]
    sub[~np.isfinite(sub)] = -1
    a, b = np.unravel_index(int(np.argmax(sub)), sub.shape)
    return ends[a], ends[b], float(sub[a, b]), pred[a]


def order_centerline(skeleton, base_hint) -> Centerline:
    """Longest end-to-end path through the skeleton, first point nearest ``base_hint``.

    ``base_hint`` is an image point (u, v).  Side branches shorter than 5% of
    the main path are pruned before the path is chosen.
    """
    pixels = np.argwhere(as_mask(skeleton) > 0)
    if len(pixels) == 0:
        raise EmptyMaskError("empty skeleton")
    if len(pixels) == 1:
        return Centerline.from_pixels(pixels)
    keep = np.ones(len(pixels), dtype=bool)
    while True:
        pix = pixels[keep]
        graph = _pixel_graph([tuple(p) for p in pix])
        degree = np.diff(graph.indptr)
        ends = np.flatnonzero(degree == 1)
        if len(ends) == 0:
            raise ValueError("skeleton has no endpoints (closed loop); cannot order a centerline")
        a, b, length, pred = _geodesic_diameter(graph, ends)
        pruned = _short_spurs(graph, degree, ends, {a, b}, SPUR_FRACTION * length)
        if not pruned:
            break
        idx = np.flatnonzero(keep)
        keep[idx[pruned]] = False
    path = _path(pred, a, b)
    pts = pix[path]
    base = np.asarray(base_hint, dtype=float)
    first = pts[0][::-1] + 0.5
    last = pts[-1][::-1] + 0.5
    if np.linalg.norm(last - base) < np.linalg.norm(first - base):
        pts = pts[::-1]
    return Centerline.from_pixels(pts)


def _short_spurs(graph, degree, ends, protected, max_len):
    """Pixels of end branches (endpoint up to, not including, a junction) shorter than max_len."""
    out = []
    for e in ends:
        if e in protected:
            continue
        branch = [e]
        prev, cur, length = -1, e, 0.0
        while True:
            nbrs = graph.indices[graph.indptr[cur]:graph.indptr[cur + 1]]
            nxt = [n for n in nbrs if n != prev and n not in branch]
            if degree[cur] > 2 or not nxt:
                break
            w = graph[cur, nxt[0]]
            if degree[nxt[0]] > 2:
                break
            length += w
            prev, cur = cur, nxt[0]
            branch.append(cur)
        if length < max_len and degree[cur] <= 2:
            # walk stopped next to a junction: the whole branch is a spur
            out.extend(branch)
    return out


def smooth_centerline(centerline: Centerline, sigma: float = 2.0) -> Centerline:
    """Gaussian-smooth the point sequence so arc length stops counting pixel staircases."""
    if len(centerline) < 3 or sigma <= 0:
        return centerline
    return Centerline.from_points(ndimage.gaussian_filter1d(centerline.points, sigma, axis=0, mode="nearest"))


def extend_to_mask(centerline: Centerline, mask, window: int = 5, step: float = 0.05) -> Centerline:
    """Continue both ends straight along the local direction up to the mask edge.

    Thinning stops roughly one half-width short of a blunt end; this restores
    the missing stretch so arc-length fractions run from tip to tip.  The
    march is sub-pixel and stops where it would enter a background pixel.
    """
    m = as_mask(mask)
    H, W = m.shape
    pts = centerline.points
    if len(pts) < 2:
        return centerline

    def march(end, before):
        d = end - before
        n = np.linalg.norm(d)
        if n < 1e-12:
            return None
        d = d / n
        pos = end.copy()
        while True:
            nxt = pos + step * d
            col, row = int(np.floor(nxt[0])), int(np.floor(nxt[1]))
            if not (0 <= row < H and 0 <= col < W) or not m[row, col]:
                break
            pos = nxt
        return pos if np.linalg.norm(pos - end) > 0 else None

    k = min(window, len(pts) - 1)
    head = march(pts[0], pts[k])
    tail = march(pts[-1], pts[-1 - k])
    out = [pts]
    if head is not None:
        out.insert(0, head[None])
    if tail is not None:
        out.append(tail[None])
    return Centerline.from_points(np.concatenate(out))


def anchor_base(centerline: Centerline, base) -> Centerline:
    """Start the centerline at the polyline point nearest to a known base position."""
    pts = centerline.points
    if len(pts) < 2:
        return centerline
    b = np.asarray(base, dtype=float)
    a, e = pts[:-1], np.diff(pts, axis=0)
    den = np.maximum(np.einsum("ij,ij->i", e, e), 1e-24)
    t = np.clip(np.einsum("ij,ij->i", b - a, e) / den, 0.0, 1.0)
    foot = a + t[:, None] * e
    k = int(np.argmin(np.linalg.norm(foot - b, axis=1)))
    return Centerline.from_points(np.concatenate([foot[k:k + 1], pts[k + 1:]]))


def extract_keypoints(centerline: Centerline, K: int):
    """K points at arc-length fractions i/K (i = 1..K), returned as (fractions, points)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(centerline) < K + 1 or centerline.length <= 0:
        raise ValueError(f"centerline with {len(centerline)} points is too short for {K} keypoints")
    fractions = np.arange(1, K + 1) / K
    target = fractions * centerline.length
    u = np.interp(target, centerline.arclength, centerline.points[:, 0])
    v = np.interp(target, centerline.arclength, centerline.points[:, 1])
    return fractions, np.stack([u, v], axis=1)


def border_base_hint(mask, side: str) -> np.ndarray:
    """Image point at the middle of the named border ('left', 'right', 'top', 'bottom')."""
    H, W = np.asarray(mask).shape
    return {"left": np.array([0.0, H / 2]), "right": np.array([float(W), H / 2]),
            "top": np.array([W / 2, 0.0]), "bottom": np.array([W / 2, float(H)])}[side]


def mask_centerline(mask, base_hint, smooth: float = 2.0, anchor: bool = False) -> Centerline:
    """Ordered base-to-tip centerline of a mask.

    Thins the largest component (holes filled), orders from the end nearest
    ``base_hint``, smooths and extends both ends to the mask edge.  With
    ``anchor`` the hint is taken to be the true base position and the
    polyline is cut at its nearest point.
    """
    m = clean_mask(mask)
    cl = order_centerline(skeletonize(m), base_hint)
    if smooth > 0:
        cl = smooth_centerline(cl, smooth)
    cl = extend_to_mask(cl, m)
    return anchor_base(cl, base_hint) if anchor else cl


# ----------------------------------------------------------------- distance map

# stands in for +inf so the parabola intersections stay finite
_FAR = 1e20


@numba.njit(cache=True)
def _edt_1d(f, out, v, z):
    """Lower envelope of parabolas (Felzenszwalb & Huttenlocher) for squared distances."""
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_sq(mask):
    H, W = mask.shape
    f = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            f[i, j] = 0.0 if mask[i, j] else _FAR
    n = max(H, W)
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1)
    col = np.empty(H)
    tmp = np.empty(H)
    for j in range(W):
        for i in range(H):
            col[i] = f[i, j]
        _edt_1d(col, tmp, v, z)
        for i in range(H):
            f[i, j] = tmp[i]
    row = np.empty(W)
    tmp2 = np.empty(W)
    for i in range(H):
        for j in range(W):
            row[j] = f[i, j]
        _edt_1d(row, tmp2, v, z)
        for j in range(W):
            f[i, j] = tmp2[j]
    return f


def distance_map(mask, gamma: float = 1.0) -> np.ndarray:
    """Euclidean distance (pixels) to the nearest positive pixel, divided by ``gamma``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    m = as_mask(mask)
    if not m.any():
        raise EmptyMaskError("distance map of an all-zero mask is undefined")
    return np.sqrt(_edt_sq(m.astype(np.bool_))) / gamma


# ----------------------------------------------------------------- I/O

def load_mask(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask image not found: {path}")
    return (np.asarray(Image.open(path).convert("L")) >= 128).astype(np.uint8)


def save_mask(mask, path) -> None:
    from PIL import Image

    Image.fromarray((as_mask(mask) * 255).astype(np.uint8), mode="L").save(Path(path))


def load_rgb(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    return np.asarray(Image.open(path).convert("RGB"))
