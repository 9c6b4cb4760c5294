"""Rigid manipulator mesh: DH forward kinematics, primitive link shapes with
per-vertex offsets, and the camera-from-base pose being estimated."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, value_of
from .geometry import TriangleMesh

SMALL_ANGLE = 1e-8


@dataclass
class Box:
    width: float
    height: float
    depth: float

    def __post_init__(self):
        if min(self.width, self.height, self.depth) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self}")

    @property
    def long_extent(self):
        return self.depth


@dataclass
class Cylinder:
    radius: float
    length: float
    segments: int = 16

    def __post_init__(self):
        if self.radius <= 0 or self.length <= 0:
            raise ValueError(f"cylinder dimensions must be positive, got {self}")
        if self.segments < 3:
            raise ValueError("cylinder needs at least 3 segments")


@dataclass
class DHLink:
    """One classic-DH row plus the primitive that stands in for the link body.

    ``attach`` maps primitive coordinates into the link's DH frame.  When not
    given it centres the primitive on the segment joining the previous frame
    origin to this one, with the primitive's z axis along that segment.
    """

    a: float
    alpha: float
    d: float
    theta_offset: float
    primitive: Box | Cylinder
    attach: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.attach is None:
            self.attach = default_attach(self.a, self.alpha, self.d)
        self.attach = np.asarray(self.attach, dtype=float)
        check_rigid(self.attach)


@dataclass
class PoseSE3:
    """Axis-angle rotation (rad) and translation (m); either may be an autodiff node."""

    rotation: np.ndarray | Node
    translation: np.ndarray | Node

    def __post_init__(self):
        if not isinstance(self.rotation, Node):
            self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        if not isinstance(self.translation, Node):
            self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def matrix(self) -> np.ndarray:
        return se3_exp(self)

    def numpy(self) -> "PoseSE3":
        return PoseSE3(value_of(self.rotation).copy(), value_of(self.translation).copy())

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        return cls(rotation_log(np.asarray(T)[:3, :3]), np.asarray(T)[:3, 3])


@dataclass
class KinematicChain:
    links: list[DHLink]
    end_effector: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self):
        return len(self.links)

    def primitive_meshes(self):
        return [primitive_mesh(link.primitive) for link in self.links]

    def vertex_counts(self):
        return [m.n_vertices for m in self.primitive_meshes()]


class VertexOffsets:
    """Per-link (n_k, 3) offset arrays, stored stacked as one (sum n_k, 3) buffer."""

    def __init__(self, per_link):
        self.per_link = [np.asarray(o, dtype=float).reshape(-1, 3) for o in per_link]

    @classmethod
    def zeros(cls, chain: KinematicChain):
        return cls([np.zeros((n, 3)) for n in chain.vertex_counts()])

    @classmethod
    def from_stacked(cls, stacked, counts):
        stacked = np.asarray(stacked, dtype=float)
        splits = np.cumsum(counts)[:-1]
        return cls(np.split(stacked, splits))

    def stacked(self):
        return np.concatenate(self.per_link, axis=0) if self.per_link else np.zeros((0, 3))

    @property
    def counts(self):
        return [o.shape[0] for o in self.per_link]


def check_rigid(T, tol=1e-9):
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise ValueError(f"expected a 4x4 transform, got {T.shape}")
    R = T[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation block is not a proper rotation")


def rotation_about(axis_angle) -> np.ndarray:
    return value_of(rotation_matrix(np.asarray(axis_angle, dtype=float)))


def default_attach(a, alpha, d) -> np.ndarray:
    # previous frame origin expressed in this link's frame
    prev = -np.array([a, d * np.sin(alpha), d * np.cos(alpha)])
    T = np.eye(4)
    T[:3, 3] = prev / 2.0
    length = np.linalg.norm(prev)
    if length < 1e-12:
        return T
    z = -prev / length
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(ez, z)
    s, c = np.linalg.norm(axis), float(ez @ z)
    if s < 1e-12:
        T[:3, :3] = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        T[:3, :3] = rotation_about(axis / s * np.arctan2(s, c))
    return T


def dh_matrix(a, alpha, d, theta) -> np.ndarray:
    """Classic DH link transform Rot_z(theta) Trans_z(d) Trans_x(a) Rot_x(alpha)."""
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def dh_forward(links, q) -> list[np.ndarray]:
    """Base-from-link transforms T^b_n for n = 1..len(links)."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.shape[0] != len(links):
        raise ValueError(f"got {q.shape[0]} joint values for {len(links)} links")
    out = []
    T = np.eye(4)
    for link, qk in zip(links, q):
        T = T @ dh_matrix(link.a, link.alpha, link.d, qk + link.theta_offset)
        out.append(T)
    return out


def primitive_mesh(shape) -> TriangleMesh:
    """Outward-wound closed mesh centred at the origin; cylinders run along z."""
    if isinstance(shape, Box):
        hx, hy, hz = shape.width / 2, shape.height / 2, shape.depth / 2
        verts = np.array([[sx * hx, sy * hy, sz * hz]
                          for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        # vertex index = 4*(x>0) + 2*(y>0) + (z>0)
        faces = np.array([
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ])
        return TriangleMesh(verts, faces)
    if isinstance(shape, Cylinder):
        n = shape.segments
        ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        # ring radius chosen so the polygon's area equals pi r^2
        rr = shape.radius * np.sqrt(2 * np.pi / (n * np.sin(2 * np.pi / n)))
        ring = np.stack([rr * np.cos(ang), rr * np.sin(ang)], 1)
        h = shape.length / 2
        bottom = np.column_stack([ring, np.full(n, -h)])
        top = np.column_stack([ring, np.full(n, h)])
        verts = np.concatenate([bottom, top, [[0, 0, -h], [0, 0, h]]])
        j = np.arange(n)
        jn = (j + 1) % n
        side = np.concatenate([np.stack([j, jn, n + jn], 1), np.stack([j, n + jn, n + j], 1)])
        cap0 = np.stack([np.full(n, 2 * n), jn, j], 1)
        cap1 = np.stack([np.full(n, 2 * n + 1), n + j, n + jn], 1)
        return TriangleMesh(verts, np.concatenate([side, cap0, cap1]))
    raise TypeError(f"unknown primitive {shape!r}")


def apply_offsets(mesh: TriangleMesh, offsets) -> TriangleMesh:
    """v = v_primitive + v_offset, vertex by vertex."""
    off_shape = value_of(offsets).shape
    if off_shape != mesh.vertex_array.shape:
        raise ValueError(f"offsets shape {off_shape} does not match mesh vertices {mesh.vertex_array.shape}")
    verts = mesh.vertices + offsets
    if isinstance(verts, Node) and verts.tape is None:
        verts = verts.value
    return TriangleMesh(verts, mesh.faces)


def _skew(w):
    z = np.zeros(())
    rows = [z, -w[2], w[1], w[2], z, -w[0], -w[1], w[0], z]
    return ad.reshape(ad.stack(rows), (3, 3))


def rotation_matrix(omega):
    """Rodrigues map exp([omega]_x); differentiable when ``omega`` is a node."""
    theta_sq = float(np.dot(value_of(omega), value_of(omega)))
    K = _skew(omega)
    K2 = ad.matmul(K, K)
    if np.sqrt(theta_sq) < SMALL_ANGLE:
        sq = ad.dot(omega, omega)
        A = 1.0 - sq / 6.0
        B = 0.5 - sq / 24.0
    else:
        theta = ad.norm(omega)
        A = ad.sin(theta) / theta
        B = (1.0 - ad.cos(theta)) / (theta * theta)
    R = np.eye(3) + A * K + B * K2
    return R if isinstance(omega, Node) else value_of(R)


def rotation_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return vee / 2.0
    if np.pi - theta < 1e-6:
        # axis from the symmetric part near a half turn
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        axis *= np.sign(axis @ vee) if abs(axis @ vee) > 0 else 1.0
        return axis * theta
    return vee * theta / (2.0 * np.sin(theta))


def rotation_angle_between(R1, R2) -> float:
    """Geodesic angle (rad) between two rotation matrices."""
    c = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def se3_exp(pose: PoseSE3) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation_about(value_of(pose.rotation))
    T[:3, 3] = value_of(pose.translation)
    return T


def link_transforms(chain: KinematicChain, q) -> list[np.ndarray]:
    """Base-from-primitive transforms: T^b_n composed with each link's attach."""
    return [T @ link.attach for T, link in zip(dh_forward(chain.links, q), chain.links)]


def assemble_robot_mesh(chain: KinematicChain, q, offsets, pose: PoseSE3) -> TriangleMesh:
    """Camera-frame mesh of all links: v_c = T^c_b T^b_n attach_n (v_prim + v_offset).

    ``offsets`` is a :class:`VertexOffsets` or a stacked (V, 3) array/node.
    Differentiable in the stacked offsets and in both pose components.
    """
    meshes = chain.primitive_meshes()
    counts = [m.n_vertices for m in meshes]
    if isinstance(offsets, VertexOffsets):
        if offsets.counts != counts:
            raise ValueError(f"offset counts {offsets.counts} do not match primitive vertex counts {counts}")
        offsets = offsets.stacked()
    if value_of(offsets).shape != (sum(counts), 3):
        raise ValueError(f"stacked offsets must have shape {(sum(counts), 3)}, got {value_of(offsets).shape}")

    transforms = link_transforms(chain, q)
    rots, trans, faces, base = [], [], [], 0
    for m, T, n in zip(meshes, transforms, counts):
        rots.append(np.broadcast_to(T[:3, :3], (n, 3, 3)))
        trans.append(np.broadcast_to(T[:3, 3], (n, 3)))
        faces.append(m.faces + base)
        base += n
    prim = np.concatenate([m.vertex_array for m in meshes])
    rots = np.concatenate(rots)
    trans = np.concatenate(trans)
    in_base = ad.matvec(rots, prim + offsets) + trans
    R = rotation_matrix(pose.rotation)
    verts = ad.matmul(in_base, ad.transpose(R)) + pose.translation
    if not isinstance(verts, Node) or verts.tape is None:
        verts = value_of(verts)
    return TriangleMesh(verts, np.concatenate(faces))


def end_effector_position(chain: KinematicChain, q, pose: PoseSE3) -> np.ndarray:
    T = se3_exp(pose) @ dh_forward(chain.links, q)[-1]
    return T[:3, :3] @ chain.end_effector + T[:3, 3]


# ----------------------------------------------------------------- description file

_LINK_KEYS = {"name", "dh", "primitive", "attach"}
_DH_KEYS = {"a", "alpha", "d", "theta_offset"}
_ATTACH_KEYS = {"position", "axis_angle"}
_PRIM_KEYS = {"box": {"type", "width", "height", "depth"},
              "cylinder": {"type", "radius", "length", "segments"}}
_TOP_KEYS = {"links", "end_effector"}


def _reject_unknown(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")


def chain_from_dict(desc: dict) -> KinematicChain:
    _reject_unknown(desc, _TOP_KEYS, "robot")
    if "links" not in desc or not desc["links"]:
        raise ValueError("robot: 'links' must be a non-empty list")
    links = []
    for k, item in enumerate(desc["links"]):
        where = f"links[{k}]"
        _reject_unknown(item, _LINK_KEYS, where)
        dh = item["dh"]
        _reject_unknown(dh, _DH_KEYS, where + ".dh")
        prim = dict(item["primitive"])
        kind = prim.get("type")
        if kind not in _PRIM_KEYS:
            raise ValueError(f"{where}.primitive: type must be 'box' or 'cylinder', got {kind!r}")
        _reject_unknown(prim, _PRIM_KEYS[kind], where + ".primitive")
        prim.pop("type")
        shape = Box(**prim) if kind == "box" else Cylinder(**prim)
        attach = None
        if "attach" in item:
            _reject_unknown(item["attach"], _ATTACH_KEYS, where + ".attach")
            attach = np.eye(4)
            attach[:3, :3] = rotation_about(item["attach"].get("axis_angle", [0.0, 0.0, 0.0]))
            attach[:3, 3] = item["attach"].get("position", [0.0, 0.0, 0.0])
        links.append(DHLink(float(dh.get("a", 0.0)), float(dh.get("alpha", 0.0)), float(dh.get("d", 0.0)),
                            float(dh.get("theta_offset", 0.0)), shape, attach, item.get("name", f"link{k + 1}")))
    ee = np.asarray(desc.get("end_effector", [0.0, 0.0, 0.0]), dtype=float).reshape(3)
    return KinematicChain(links, ee)


def chain_to_dict(chain: KinematicChain) -> dict:
    links = []
    for link in chain.links:
        if isinstance(link.primitive, Box):
            prim = {"type": "box", "width": link.primitive.width, "height": link.primitive.height,
                    "depth": link.primitive.depth}
        else:
            prim = {"type": "cylinder", "radius": link.primitive.radius, "length": link.primitive.length,
                    "segments": link.primitive.segments}
        links.append({
            "name": link.name,
            "dh": {"a": link.a, "alpha": link.alpha, "d": link.d, "theta_offset": link.theta_offset},
            "primitive": prim,
            "attach": {"position": link.attach[:3, 3].tolist(),
                       "axis_angle": rotation_log(link.attach[:3, :3]).tolist()},
        })
    return {"links": links, "end_effector": np.asarray(chain.end_effector).tolist()}


def load_robot(path) -> KinematicChain:
    return chain_from_dict(json.loads(Path(path).read_text()))


def save_robot(chain: KinematicChain, path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain), indent=2) + "\n")
