"""Synthetic frames with known ground truth: render, threshold, optionally corrupt."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import BezierState, build_tube_mesh, curve_points
from ..imageproc import load_mask, save_mask
from ..kinematics import (Cylinder, DHLink, KinematicChain, PoseSE3, VertexOffsets,
                          assemble_robot_mesh, end_effector_position, save_robot)
from ..renderer import SIGMA_HARD, CameraModel, project, render_silhouette
from . import formats
from .metrics import centerline_samples

# 320x240 test camera, roughly a 56 degree horizontal field of view
DEFAULT_CAMERA = CameraModel(300.0, 300.0, 160.0, 120.0, 320, 240)
SOFT_N_S = 100
SOFT_N_PHI = 40


@dataclass
class FrameRecord:
    """One frame: mask, camera and either a soft or a rigid ground truth."""

    frame_id: str
    camera: CameraModel
    mask: np.ndarray | None = None
    image_path: Path | None = None
    joints: np.ndarray | None = None
    curve: BezierState | None = None  # soft ground truth
    pose: PoseSE3 | None = None  # rigid ground truth
    centerline_3d: np.ndarray | None = None
    centerline_2d: np.ndarray | None = None
    end_effector: np.ndarray | None = None
    end_effector_2d: np.ndarray | None = None

    def __post_init__(self):
        if (self.curve is None) == (self.pose is None):
            raise ValueError("a frame carries exactly one of a soft or a rigid ground truth")
        if self.pose is not None and self.joints is None:
            raise ValueError("rigid frames need joint values")

    @property
    def kind(self) -> str:
        return "soft" if self.curve is not None else "rigid"


# ----------------------------------------------------------------- scenes

def default_chain() -> KinematicChain:
    """Three cylinder links: a vertical shoulder then a two-link planar arm."""
    return KinematicChain([
        DHLink(0.0, np.pi / 2, 0.3, 0.0, Cylinder(0.05, 0.3), name="shoulder"),
        DHLink(0.4, 0.0, 0.0, 0.0, Cylinder(0.04, 0.4), name="upper"),
        DHLink(0.3, 0.0, 0.0, 0.0, Cylinder(0.03, 0.3), name="fore"),
    ])


def sample_soft_curve(rng, depth=0.5, n_s=SOFT_N_S) -> BezierState:
    """A bent arm about 16 cm long lying roughly across the view at ``depth`` metres.

    The radius tapers from 12 mm at the base to 6 mm at the tip.
    """
    c0 = np.array([-0.08, 0.0, depth]) + rng.uniform(-0.02, 0.02, 3)
    c2 = np.array([0.08, 0.0, depth]) + rng.uniform(-0.03, 0.03, 3)
    c1 = 0.5 * (c0 + c2) + rng.uniform(-0.04, 0.04, 3) * [0.5, 1.0, 1.0]
    return BezierState(np.stack([c0, c1, c2]), np.linspace(0.012, 0.006, n_s))


def sample_rigid_state(rng, chain: KinematicChain):
    """Joint angles and a camera-from-base pose 1.5-2 m away, rotation uniform over SO(3)."""
    limits = np.array([np.pi, 0.8, 1.2])[: len(chain)]
    limits = np.pad(limits, (0, len(chain) - len(limits)), constant_values=1.0)
    q = rng.uniform(-1.0, 1.0, len(chain)) * limits
    rot = Rotation.random(random_state=rng).as_rotvec()
    t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.15, 0.15), rng.uniform(1.5, 2.0)])
    return q, PoseSE3(rot, t)


def perturb_curve(curve: BezierState, rng, fraction=0.2) -> BezierState:
    """Move c1 and c2 in random directions by up to ``fraction`` of the curve length."""
    p = curve_points(np.asarray(curve.control), np.linspace(0.0, 1.0, 200))
    length = float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))
    c = np.array(curve.control, dtype=float)
    for k in (1, 2):
        d = rng.normal(size=3)
        c[k] += d / np.linalg.norm(d) * rng.uniform(0.0, fraction * length)
    return BezierState(c, np.array(curve.radius))


# ----------------------------------------------------------------- rendering

def flip_pixels(mask, rate, rng) -> np.ndarray:
    """Flip each pixel independently with probability ``rate``."""
    mask = np.asarray(mask, dtype=np.uint8)
    if rate <= 0:
        return mask.copy()
    return np.where(rng.random(mask.shape) < rate, 1 - mask, mask).astype(np.uint8)


def hard_mask(mesh, camera: CameraModel) -> np.ndarray:
    return (render_silhouette(mesh, camera, SIGMA_HARD) > 0.5).astype(np.uint8)


def soft_frame(frame_id, curve: BezierState, camera: CameraModel, noise=0.0, rng=None,
               n_phi=SOFT_N_PHI) -> FrameRecord:
    mask = hard_mask(build_tube_mesh(curve, curve.n_rings, n_phi), camera)
    if noise > 0:
        mask = flip_pixels(mask, noise, rng)
    p3, p2 = centerline_samples(curve, camera)
    return FrameRecord(str(frame_id), camera, mask, curve=curve.numpy(), centerline_3d=p3, centerline_2d=p2)


def rigid_frame(frame_id, chain: KinematicChain, q, pose: PoseSE3, camera: CameraModel,
                noise=0.0, rng=None) -> FrameRecord:
    mask = hard_mask(assemble_robot_mesh(chain, q, VertexOffsets.zeros(chain), pose), camera)
    if noise > 0:
        mask = flip_pixels(mask, noise, rng)
    ee = end_effector_position(chain, q, pose)
    return FrameRecord(str(frame_id), camera, mask, joints=np.asarray(q, dtype=float), pose=pose.numpy(),
                       end_effector=ee, end_effector_2d=project(camera, ee[None])[0][0])


def synth_generate(scenario: str, count: int, camera: CameraModel = DEFAULT_CAMERA, noise=0.0,
                   seed=0, chain: KinematicChain | None = None, depth=0.5):
    """``count`` frames of the named scenario ("soft" or "rigid"); deterministic in ``seed``.

    Frame i draws its state from ``default_rng([seed, i])`` so any frame can be
    regenerated on its own.
    """
    if scenario not in ("soft", "rigid"):
        raise ValueError(f"scenario must be 'soft' or 'rigid', got {scenario!r}")
    if not 0.0 <= noise < 0.5:
        raise ValueError("flip rate must lie in [0, 0.5)")
    chain = chain or default_chain()
    frames = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        fid = f"{i:04d}"
        if scenario == "soft":
            frames.append(soft_frame(fid, sample_soft_curve(rng, depth), camera, noise, rng))
        else:
            q, pose = sample_rigid_state(rng, chain)
            frames.append(rigid_frame(fid, chain, q, pose, camera, noise, rng))
    return frames


# ----------------------------------------------------------------- dataset files

MANIFEST = "frames.csv"


def write_dataset(frames, out_dir, chain: KinematicChain | None = None) -> Path:
    """Write masks, ground truth, camera (and robot/joints for rigid frames) plus a manifest.

    Layout: ``camera.json``, ``frames.csv`` (frame, mask, truth), and per frame
    ``<id>_mask.png`` and ``<id>_truth.json``; rigid sets add ``robot.json``
    and ``joints.txt`` with one line per frame in manifest order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise ValueError("no frames to write")
    formats.save_camera(frames[0].camera, out / "camera.json")
    rows = [["frame", "mask", "truth"]]
    for fr in frames:
        mask_name, truth_name = f"{fr.frame_id}_mask.png", f"{fr.frame_id}_truth.json"
        save_mask(fr.mask, out / mask_name)
        if fr.kind == "soft":
            formats.save_soft_state(fr.curve, out / truth_name, {
                "centerline_3d": fr.centerline_3d.tolist(), "centerline_2d": fr.centerline_2d.tolist()})
        else:
            formats.save_pose_state(fr.pose, out / truth_name, extra={
                "end_effector": fr.end_effector.tolist(), "end_effector_2d": fr.end_effector_2d.tolist(),
                "joints": fr.joints.tolist()})
        rows.append([fr.frame_id, mask_name, truth_name])
    with open(out / MANIFEST, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    if frames[0].kind == "rigid":
        save_robot(chain or default_chain(), out / "robot.json")
        formats.save_joints(np.stack([fr.joints for fr in frames]), out / "joints.txt")
    return out


def read_dataset(path):
    """Frames from a directory written by :func:`write_dataset`, masks loaded."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise formats.DataError(f"dataset manifest not found: {manifest}")
    camera = formats.load_camera(root / "camera.json")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    frames = []
    for row in rows:
        mask_path = root / row["mask"]
        if not mask_path.is_file():
            raise formats.DataError(f"mask image not found: {mask_path}")
        truth = formats.load_state(root / row["truth"])
        common = dict(frame_id=row["frame"], camera=camera, mask=load_mask(mask_path), image_path=mask_path)
        if truth["kind"] == "soft":
            frames.append(FrameRecord(curve=truth["curve"], centerline_3d=truth.get("centerline_3d"),
                                      centerline_2d=truth.get("centerline_2d"), **common))
        else:
            frames.append(FrameRecord(pose=truth["pose"], joints=truth.get("joints"),
                                      end_effector=truth.get("end_effector"),
                                      end_effector_2d=truth.get("end_effector_2d"), **common))
    return frames
