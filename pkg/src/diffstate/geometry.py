"""Quadratic Bezier centerline and the tubular surface mesh swept along it.

Everything here accepts either plain arrays or autodiff nodes for the control
points and radii, so the same code builds meshes for plotting and for the
optimization tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, value_of

# ||p' x p''|| below this fraction of ||p'||^2 counts as a straight segment
DEGENERATE_TOL = 1e-9
UP = np.array([0.0, 0.0, 1.0])
UP_ALT = np.array([0.0, 1.0, 0.0])


@dataclass
class BezierState:
    """Control points ``control[k] = c_k`` (meters) and one radius per ring (meters)."""

    control: np.ndarray | Node
    radius: np.ndarray | Node

    def __post_init__(self):
        if not isinstance(self.control, Node):
            self.control = np.asarray(self.control, dtype=float)
        if not isinstance(self.radius, Node):
            self.radius = np.atleast_1d(np.asarray(self.radius, dtype=float))
            if np.any(self.radius <= 0):
                raise ValueError("radius profile entries must be positive")
        if value_of(self.control).shape != (3, 3):
            raise ValueError(f"control points must have shape (3, 3), got {value_of(self.control).shape}")

    @property
    def c0(self):
        return value_of(self.control)[0]

    @property
    def c1(self):
        return value_of(self.control)[1]

    @property
    def c2(self):
        return value_of(self.control)[2]

    @property
    def n_rings(self):
        return value_of(self.radius).shape[0]

    def numpy(self) -> "BezierState":
        return BezierState(value_of(self.control).copy(), value_of(self.radius).copy())


@dataclass
class TriangleMesh:
    vertices: np.ndarray | Node  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = value_of(self.vertices).shape[0]
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValueError("face index out of range")

    @property
    def vertex_array(self) -> np.ndarray:
        return value_of(self.vertices)

    @property
    def n_vertices(self):
        return self.vertex_array.shape[0]


def _check_s(s):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError(f"curve parameter must lie in [0, 1], got {s}")
    return s


def bernstein(s):
    """Rows ``[(1-s)^2, 2(1-s)s, s^2]`` so that ``p(s) = bernstein(s) @ control``."""
    s = np.atleast_1d(s)
    return np.stack([(1 - s) ** 2, 2 * (1 - s) * s, s ** 2], axis=-1)


def bernstein_d1(s):
    s = np.atleast_1d(s)
    return np.stack([-2 * (1 - s), 2 * (1 - s) - 2 * s, 2 * s], axis=-1)


BERNSTEIN_D2 = np.array([[2.0, -4.0, 2.0]])


def curve_points(control, s):
    """p(s) for an array of parameters; differentiable in ``control``."""
    out = ad.matmul(bernstein(s), control)
    return out if isinstance(control, Node) else value_of(out)


def curve_derivatives(control, s):
    """(p'(s), p''(s)) for an array of parameters, each shaped (len(s), 3)."""
    s = np.atleast_1d(s)
    d1 = ad.matmul(bernstein_d1(s), control)
    d2 = ad.matmul(np.repeat(BERNSTEIN_D2, s.shape[0], axis=0), control)
    return d1, d2


def bezier_point(curve: BezierState, s: float) -> np.ndarray:
    s = _check_s(s)
    return value_of(curve_points(curve.control, s))[0]


def bezier_derivatives(curve: BezierState, s: float):
    s = _check_s(s)
    d1, d2 = curve_derivatives(curve.control, s)
    return value_of(d1)[0], value_of(d2)[0]


def frenet_frames(control, s):
    """Tangent, normal and binormal at each parameter in ``s``.

    Returns ``(T, N, B, degenerate)`` where the first three are (n, 3) nodes and
    ``degenerate`` flags rings where the curve is locally straight and a frame
    built from a fixed up-axis is used instead.
    """
    s = np.atleast_1d(s)
    d1, d2 = curve_derivatives(control, s)
    speed = ad.norm(d1)
    T = d1 / ad.reshape(speed, (-1, 1))
    bvec = ad.cross(d1, d2)
    bnorm = ad.norm(bvec)

    sq_speed = value_of(speed) ** 2
    degenerate = value_of(bnorm) < DEGENERATE_TOL * sq_speed
    if not np.any(degenerate):
        B = bvec / ad.reshape(bnorm, (-1, 1))
        N = ad.cross(B, T)
        return T, N, B, degenerate

    # straight pieces: project the up axis out of the tangent
    t_val = value_of(T)
    up = np.where((np.abs(t_val @ UP) > 1.0 - 1e-6)[:, None], UP_ALT, UP)
    proj = up - ad.reshape(ad.dot(T, up), (-1, 1)) * T
    n_fb = proj / ad.reshape(ad.norm(proj), (-1, 1))
    b_fb = ad.cross(T, n_fb)
    if np.all(degenerate):
        return T, n_fb, b_fb, degenerate
    safe_bnorm = ad.maximum(bnorm, 1e-300)
    b_fr = bvec / ad.reshape(safe_bnorm, (-1, 1))
    n_fr = ad.cross(b_fr, T)
    mask = degenerate[:, None]
    N = ad.where(mask, n_fb, n_fr)
    B = ad.where(mask, b_fb, b_fr)
    return T, N, B, degenerate


def frenet_frame(curve: BezierState, s: float):
    """(T, N, B, degenerate) at one parameter value, as arrays."""
    s = _check_s(s)
    T, N, B, deg = frenet_frames(curve.control, s)
    return value_of(T)[0], value_of(N)[0], value_of(B)[0], bool(deg[0])


def ring_parameters(n_s: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_s)


def ring_angles(n_phi: int) -> np.ndarray:
    return np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)


def interp_radius(radius, s):
    """Linear interpolation of the per-ring radius profile at parameters ``s``."""
    n = value_of(radius).shape[0]
    s = np.atleast_1d(s)
    x = s * max(n - 1, 0)
    lo = np.clip(np.floor(x).astype(int), 0, max(n - 2, 0))
    w = x - lo
    rows = np.arange(s.shape[0])
    weights = np.zeros((s.shape[0], n))
    weights[rows, lo] = 1 - w
    weights[rows, np.minimum(lo + 1, n - 1)] += w
    out = ad.matmul(weights, ad.reshape(radius, (n, 1)))[:, 0]
    return out if isinstance(radius, Node) else value_of(out)


def tube_surface_point(curve: BezierState, s: float, phi: float) -> np.ndarray:
    s = _check_s(s)
    p = bezier_point(curve, float(s))
    _, N, B, _ = frenet_frame(curve, float(s))
    r = float(np.atleast_1d(interp_radius(value_of(curve.radius), s))[0])
    return p + r * (-N * np.cos(phi) + B * np.sin(phi))


def tube_faces(n_s: int, n_phi: int) -> np.ndarray:
    """Side-wall quads split in two plus a triangle fan at each end, outward wound."""
    i, j = np.meshgrid(np.arange(n_s - 1), np.arange(n_phi), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    jn = (j + 1) % n_phi
    a = i * n_phi + j
    b = i * n_phi + jn
    c = (i + 1) * n_phi + j
    d = (i + 1) * n_phi + jn
    side = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    start, end = n_s * n_phi, n_s * n_phi + 1
    jj = np.arange(n_phi)
    jjn = (jj + 1) % n_phi
    last = (n_s - 1) * n_phi
    cap0 = np.stack([np.full(n_phi, start), jj, jjn], 1)
    cap1 = np.stack([np.full(n_phi, end), last + jjn, last + jj], 1)
    return np.concatenate([side, cap0, cap1]).astype(np.int64)


def build_tube_mesh(curve: BezierState, n_s: int, n_phi: int) -> TriangleMesh:
    """Tube mesh: ``n_s * n_phi`` ring vertices followed by p(0) and p(1).

    Vertex ``i * n_phi + j`` sits on ring ``i`` at angle ``2 pi j / n_phi``.
    Differentiable in ``curve.control`` and ``curve.radius`` when those are nodes.
    """
    if n_s < 2:
        raise ValueError(f"need at least 2 rings, got n_s={n_s}")
    if n_phi < 3:
        raise ValueError(f"need at least 3 vertices per ring, got n_phi={n_phi}")
    if curve.n_rings != n_s:
        raise ValueError(f"radius profile has {curve.n_rings} entries but n_s={n_s}")
    s = ring_parameters(n_s)
    phi = ring_angles(n_phi)
    control, radius = curve.control, curve.radius
    P = curve_points(control, s)
    _, N, B, _ = frenet_frames(control, s)
    # (n_s, n_phi, 3) offsets in the normal plane
    dirs = ad.reshape(N, (n_s, 1, 3)) * (-np.cos(phi))[None, :, None] \
        + ad.reshape(B, (n_s, 1, 3)) * np.sin(phi)[None, :, None]
    rings = ad.reshape(P, (n_s, 1, 3)) + ad.reshape(radius, (n_s, 1, 1)) * dirs
    ends = curve_points(control, np.array([0.0, 1.0]))
    verts = ad.concat([ad.reshape(rings, (n_s * n_phi, 3)), ends], axis=0)
    if not isinstance(verts, Node) or verts.tape is None:
        verts = value_of(verts)
    return TriangleMesh(verts, tube_faces(n_s, n_phi))


def edge_counts(faces) -> dict:
    counts: dict = {}
    for f in np.asarray(faces):
        for k in range(3):
            e = tuple(sorted((int(f[k]), int(f[(k + 1) % 3]))))
            counts[e] = counts.get(e, 0) + 1
    return counts


def is_watertight(faces) -> bool:
    counts = edge_counts(faces)
    return bool(counts) and all(c == 2 for c in counts.values())


def signed_volume(vertices, faces) -> float:
    v = np.asarray(vertices)
    f = np.asarray(faces)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertex_array]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
