"""Perspective projection and soft silhouette rasterization.

Each face j contributes ``D_j(p) = sigmoid(delta_j(p) * d_j(p)^2 / sigma)`` to
pixel p, where d is the screen distance from the pixel centre to the triangle
boundary and delta is +1 inside, -1 outside.  Pixels aggregate
``S(p) = 1 - prod_j (1 - D_j(p))``.  A face only touches pixels inside its
screen bounding box grown by ``ceil(sqrt(20 sigma))`` pixels, beyond which
``D_j < sigmoid(-20)``.

The rasterizer is one autodiff op ("soft_rasterize") whose adjoint is written
out by hand: ``dS/dx_j = (1 - S) D_j`` with ``x_j = delta d^2 / sigma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Node, register_op, value_of
from .geometry import TriangleMesh

Z_NEAR = 1e-3
LOGIT_CUT = 20.0
# once prod (1 - D) drops below sigmoid(-LOGIT_CUT) the pixel is saturated; later faces are skipped
SATURATED = 2.0611536181902037e-09
DEGENERATE_AREA = 1e-12
SIGMA_OPTIM = 4.0
SIGMA_HARD = 1e-2
# no nnan/ninf: the kernels test for non-finite screen coordinates
_FASTMATH = {"nsz", "arcp", "contract", "afn", "reassoc"}


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def support_radius(sigma: float) -> int:
    return int(math.ceil(math.sqrt(sigma * LOGIT_CUT)))


def project(camera: CameraModel, points):
    """Pixel coordinates ``(u, v)`` of camera-frame points plus an in-front mask.

    Points at or behind the near plane are still projected (with their depth
    clamped) but flagged ``False`` so callers can drop them.
    """
    pts = points if isinstance(points, Node) else np.asarray(points, dtype=float)
    z_val = value_of(pts)[..., 2]
    valid = z_val > Z_NEAR
    z = pts[..., 2]
    if not np.all(valid):
        z = ad.maximum(z, Z_NEAR)
    u = camera.fx * pts[..., 0] / z + camera.cx
    v = camera.fy * pts[..., 1] / z + camera.cy
    uv = ad.stack([u, v], axis=-1)
    if not isinstance(points, Node):
        uv = value_of(uv)
    return uv, valid


# ----------------------------------------------------------------- kernels

@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH)
def _bbox(xs, ys, pad, H, W):
    umin = min(xs[0], xs[1], xs[2]) - pad
    umax = max(xs[0], xs[1], xs[2]) + pad
    vmin = min(ys[0], ys[1], ys[2]) - pad
    vmax = max(ys[0], ys[1], ys[2]) + pad
    # pixel (i, j) has its centre at (j + 0.5, i + 0.5)
    j0 = max(int(math.ceil(umin - 0.5)), 0)
    j1 = min(int(math.floor(umax - 0.5)), W - 1)
    i0 = max(int(math.ceil(vmin - 0.5)), 0)
    i1 = min(int(math.floor(vmax - 0.5)), H - 1)
    return i0, i1, j0, j1


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH)
def _face_setup(uv, faces, f, buf):
    """Fill buf for face f and return twice its signed area.

    Layout: vertices x0 y0 x1 y1 x2 y2, edges e_k = v_{k+1} - v_k, 1/|e_k|^2,
    unit inward edge normals n_k and offsets c_k so that n_k . p + c_k is the
    signed distance from p to edge line k (positive inside).
    """
    for k in range(3):
        buf[2 * k] = uv[faces[f, k], 0]
        buf[2 * k + 1] = uv[faces[f, k], 1]
    for k in range(3):
        kn = (k + 1) % 3
        buf[6 + 2 * k] = buf[2 * kn] - buf[2 * k]
        buf[7 + 2 * k] = buf[2 * kn + 1] - buf[2 * k + 1]
    # e0 x (v2 - v0) with v2 - v0 = -e2
    area2 = buf[7] * buf[10] - buf[6] * buf[11]
    sign = 1.0 if area2 > 0.0 else -1.0
    for k in range(3):
        ex = buf[6 + 2 * k]
        ey = buf[7 + 2 * k]
        den = ex * ex + ey * ey
        buf[12 + k] = 1.0 / den if den > 0.0 else 0.0
        inv = sign / math.sqrt(den) if den > 0.0 else 0.0
        nx = -ey * inv
        ny = ex * inv
        buf[15 + 2 * k] = nx
        buf[16 + 2 * k] = ny
        buf[21 + k] = -(nx * buf[2 * k] + ny * buf[2 * k + 1])
    return area2


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH, inline="always")
def _unpack(b):
    # face constants as a tuple so the pixel loop keeps them in registers
    return (b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7], b[8], b[9], b[10], b[11],
            b[12], b[13], b[14], b[15], b[16], b[17], b[18], b[19], b[20], b[21], b[22], b[23])


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH, inline="always")
def _seg2(rx, ry, ex, ey, inv_len2):
    """Squared distance from r to the segment 0..e, its foot parameter t and r - t e."""
    t = min(max((rx * ex + ry * ey) * inv_len2, 0.0), 1.0)
    dx = rx - t * ex
    dy = ry - t * ey
    return dx * dx + dy * dy, t, dx, dy


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH, inline="always")
def _signed_dist2(px, py, g, cut2):
    """Signed squared distance to the triangle boundary (+ inside) and nearest edge k.

    Returns -inf for outside points certainly farther than sqrt(cut2).  Inside a
    triangle the nearest boundary point is the foot on the nearest edge line;
    outside it lies on an edge whose line the point is outside of.
    """
    w0 = g[15] * px + g[16] * py + g[21]
    w1 = g[17] * px + g[18] * py + g[22]
    w2 = g[19] * px + g[20] * py + g[23]
    m = min(w0, min(w1, w2))
    if m >= 0.0:
        k = 0 if m == w0 else (1 if m == w1 else 2)
        return m * m, k
    if m * m > cut2:
        return -np.inf, 0
    best = np.inf
    k = 0
    if w0 < 0.0:
        best = _seg2(px - g[0], py - g[1], g[6], g[7], g[12])[0]
    if w1 < 0.0:
        d2 = _seg2(px - g[2], py - g[3], g[8], g[9], g[13])[0]
        if d2 < best:
            best = d2
            k = 1
    if w2 < 0.0:
        d2 = _seg2(px - g[4], py - g[5], g[10], g[11], g[14])[0]
        if d2 < best:
            best = d2
            k = 2
    return -best, k


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH)
def _raster_forward(uv, faces, active, sigma, pad, H, W):
    rest = np.ones((H, W))
    buf = np.empty(24)
    xs = np.empty(3)
    ys = np.empty(3)
    cut2 = LOGIT_CUT * sigma
    for f in range(faces.shape[0]):
        if not active[f]:
            continue
        area2 = _face_setup(uv, faces, f, buf)
        if not (abs(area2) >= 2.0 * DEGENERATE_AREA):
            continue
        for k in range(3):
            xs[k] = buf[2 * k]
            ys[k] = buf[2 * k + 1]
        i0, i1, j0, j1 = _bbox(xs, ys, pad, H, W)
        geo = _unpack(buf)
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                r = rest[i, j]
                if r < SATURATED:
                    continue
                x = _signed_dist2(j + 0.5, py, geo, cut2)[0] / sigma
                if x < -LOGIT_CUT:
                    continue
                # 1 - sigmoid(x)
                if x > 0.0:
                    e = math.exp(-x)
                    rest[i, j] = r * e / (1.0 + e)
                else:
                    rest[i, j] = r / (1.0 + math.exp(x))
    return rest


@numba.njit(cache=True, error_model="numpy", fastmath=_FASTMATH)
def _raster_backward(uv, faces, active, sigma, pad, rest, gimg):
    H, W = rest.shape
    guv = np.zeros(uv.shape)
    buf = np.empty(24)
    xs = np.empty(3)
    ys = np.empty(3)
    ga = np.zeros((3, 2))
    cut2 = LOGIT_CUT * sigma
    for f in range(faces.shape[0]):
        if not active[f]:
            continue
        area2 = _face_setup(uv, faces, f, buf)
        if not (abs(area2) >= 2.0 * DEGENERATE_AREA):
            continue
        for k in range(3):
            xs[k] = buf[2 * k]
            ys[k] = buf[2 * k + 1]
        i0, i1, j0, j1 = _bbox(xs, ys, pad, H, W)
        geo = _unpack(buf)
        ga[:, :] = 0.0
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                g = gimg[i, j]
                r = rest[i, j]
                if g == 0.0 or r < SATURATED:
                    continue
                px = j + 0.5
                sd, k = _signed_dist2(px, py, geo, cut2)
                x = sd / sigma
                if x < -LOGIT_CUT:
                    continue
                _, t, dx, dy = _seg2(px - buf[2 * k], py - buf[2 * k + 1],
                                     buf[6 + 2 * k], buf[7 + 2 * k], buf[12 + k])
                if x >= 0.0:
                    D = 1.0 / (1.0 + math.exp(-x))
                else:
                    ex = math.exp(x)
                    D = ex / (1.0 + ex)
                # dL/dx = g (1 - S) D and dx/d(d^2) = +-1/sigma
                c = g * r * D / sigma
                if sd < 0.0:
                    c = -c
                # d(d^2)/da = -2 (p - q)(1 - t), d(d^2)/db = -2 (p - q) t
                kb = (k + 1) % 3
                ga[k, 0] -= 2.0 * dx * (1.0 - t) * c
                ga[k, 1] -= 2.0 * dy * (1.0 - t) * c
                ga[kb, 0] -= 2.0 * dx * t * c
                ga[kb, 1] -= 2.0 * dy * t * c
        for k in range(3):
            guv[faces[f, k], 0] += ga[k, 0]
            guv[faces[f, k], 1] += ga[k, 1]
    return guv


@register_op("soft_rasterize")
def _soft_rasterize(uv, faces=None, active=None, sigma=SIGMA_OPTIM, shape=None):
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ad.ShapeError(f"soft_rasterize: expected (V, 2) screen coordinates, got {uv.shape}")
    H, W = shape
    pad = float(support_radius(sigma))
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    if faces.shape[0] == 0:
        rest = np.ones((H, W))
    else:
        rest = _raster_forward(uv, faces, active, float(sigma), pad, H, W)
    img = 1.0 - rest

    def vjp(g):
        if faces.shape[0] == 0:
            return (np.zeros_like(uv),)
        g = np.ascontiguousarray(g, dtype=np.float64)
        return (_raster_backward(uv, faces, active, float(sigma), pad, rest, g),)
    return img, vjp


def soft_rasterize(uv, faces, shape, sigma=SIGMA_OPTIM, active=None):
    faces = np.ascontiguousarray(np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if active is None:
        active = np.ones(faces.shape[0], dtype=np.bool_)
    return ad.record("soft_rasterize", [uv], faces=faces, active=np.ascontiguousarray(active, dtype=np.bool_),
                     sigma=float(sigma), shape=tuple(shape))


def render_silhouette(mesh: TriangleMesh, camera: CameraModel, sigma: float = SIGMA_OPTIM):
    """Soft silhouette of a camera-frame mesh, values in [0, 1], shape (H, W).

    Returns a node when the mesh vertices are on a tape, otherwise an array.
    Faces with any vertex at or behind the near plane are dropped whole.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if mesh.faces.shape[0] == 0:
        return np.zeros(camera.shape)
    uv, valid = project(camera, mesh.vertices)
    active = np.all(valid[mesh.faces], axis=1)
    img = soft_rasterize(uv, mesh.faces, camera.shape, sigma, active)
    if not isinstance(mesh.vertices, Node) or mesh.vertices.tape is None:
        return value_of(img)
    return img


def screen_distance(pixel, triangle):
    """(inside, distance) of a 2D point relative to a triangle's boundary, in pixels."""
    p = np.asarray(pixel, dtype=float)
    uv = np.ascontiguousarray(triangle, dtype=float).reshape(3, 2)
    buf = np.empty(24)
    _face_setup(uv, np.array([[0, 1, 2]]), 0, buf)
    sd = _signed_dist2(p[0], p[1], _unpack(buf), np.inf)[0]
    # boundary points count as inside
    return bool(sd >= 0.0), math.sqrt(abs(sd))


def save_image(img, path) -> None:
    """8-bit grayscale PNG/PGM (by extension) of values in [0, 1]."""
    from PIL import Image

    data = np.clip(np.rint(255.0 * np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path))
