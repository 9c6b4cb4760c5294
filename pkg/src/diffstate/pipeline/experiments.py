"""Synthetic recovery trials shared by the acceptance tests and scripts/.

Each trial renders a known state, hides it, estimates it back from the mask
and reports the errors against the hidden truth.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..imageproc import border_base_hint, clean_mask, extract_keypoints, mask_centerline
from ..kinematics import end_effector_position, rotation_angle_between
from ..losses import LossWeights
from ..optimizer import OptimConfig, RigidPoseProblem, SoftShapeProblem, estimate
from ..renderer import CameraModel, project
from .metrics import centerline_error, point_error
from .synth import DEFAULT_CAMERA, SOFT_N_PHI, SOFT_N_S, default_chain, perturb_curve, synth_generate

# render blur (px^2) used while optimizing: small enough that the blur does
# not bias the fit, large enough to give gradients a few pixels out
SHAPE_SIGMA = 0.05
POSE_SIGMA = 0.05

# pose loss variants of the convergence ablation
POSE_VARIANTS = {
    "mask": LossWeights(mask=1.0),
    "mask+dist": LossWeights(mask=1.0, dist=1.0),
    "mask+dist+app": LossWeights(mask=1.0, dist=1.0, app=1.0),
}


@dataclass
class TrialResult:
    frame_id: str
    e2d: float  # px: centerline (soft) or end-effector (rigid)
    e3d: float  # mm
    rot_deg: float = float("nan")
    loss: float = float("nan")
    seconds: float = 0.0


def shape_config(iterations=200, lr=0.2, sigma=SHAPE_SIGMA, seed=0, restarts=1) -> OptimConfig:
    return OptimConfig(iterations=iterations, lr_state=lr, lr_verts=lr, sigma=sigma, rng_seed=seed,
                       update="adam", restarts=restarts)


def pose_config(iterations=500, lr_state=1e-2, lr_verts=1e-4, sigma=POSE_SIGMA, seed=0, restarts=3) -> OptimConfig:
    return OptimConfig(iterations=iterations, lr_state=lr_state, lr_verts=lr_verts, sigma=sigma,
                       rng_seed=seed, update="adam", restarts=restarts)


def soft_trial(frame, keypoints=4, fix_base=True, random_init=False, config: OptimConfig | None = None,
               perturb_seed=0, n_s=SOFT_N_S, n_phi=SOFT_N_PHI, clean=False) -> TrialResult:
    """Recover one soft frame.

    With ``fix_base`` the true c0 is held and also anchors the centerline;
    otherwise the base end is taken from the left image border.  The start is
    either a random frustum init or the truth with c1, c2 moved by up to 20%
    of the curve length.  ``clean`` keeps only the mask's largest component.
    """
    camera = frame.camera
    truth = frame.curve
    config = config or shape_config()
    mask = clean_mask(frame.mask) if clean else frame.mask
    if fix_base:
        hint, anchor = project(camera, truth.control[:1])[0][0], True
    else:
        hint, anchor = border_base_hint(mask, "left"), False
    kp = None
    if keypoints > 0:
        kp = extract_keypoints(mask_centerline(mask, hint, anchor=anchor), keypoints)
    problem = SoftShapeProblem(camera, mask, kp, n_s=n_s, n_phi=n_phi, fix_base=fix_base,
                               base=truth.control[0] if fix_base else None)
    init = None
    if not random_init:
        init = problem.params_from(perturb_curve(truth, np.random.default_rng(perturb_seed)))
    t0 = time.perf_counter()
    res = estimate(problem, config, init)
    e2, e3 = centerline_error(problem.state(res.params), camera, frame.centerline_3d, frame.centerline_2d)
    return TrialResult(frame.frame_id, e2, e3, loss=res.best_loss, seconds=time.perf_counter() - t0)


def rigid_trial(frame, chain=None, weights: LossWeights | None = None, config: OptimConfig | None = None,
                offsets=True, offset_l2=0.0, init=None, clean=False) -> TrialResult:
    """Recover the camera-from-base pose of one rigid frame.

    Starts from random frustum inits unless ``init`` (a PoseSE3) is given.
    """
    chain = chain or default_chain()
    config = config or pose_config()
    mask = clean_mask(frame.mask) if clean else frame.mask
    problem = RigidPoseProblem(chain, frame.joints, frame.camera, mask, weights,
                               optimize_offsets=offsets, offset_l2=offset_l2)
    t0 = time.perf_counter()
    res = estimate(problem, config, None if init is None else problem.params_from(init))
    pose = problem.pose(res.params)
    ee = end_effector_position(chain, frame.joints, pose)
    e2, e3 = point_error(ee, frame.end_effector, frame.camera)
    rot = np.degrees(rotation_angle_between(pose.matrix()[:3, :3], frame.pose.matrix()[:3, :3]))
    return TrialResult(frame.frame_id, e2, e3, float(rot), res.best_loss, time.perf_counter() - t0)


def soft_frames(count=50, seed=0, camera: CameraModel = DEFAULT_CAMERA, noise=0.0, depth=0.5):
    return synth_generate("soft", count, camera, noise, seed, depth=depth)


def rigid_frames(count=50, seed=0, camera: CameraModel = DEFAULT_CAMERA, noise=0.0, chain=None):
    return synth_generate("rigid", count, camera, noise, seed, chain=chain)


def success_rate(flags) -> float:
    flags = list(flags)
    return sum(bool(f) for f in flags) / len(flags) if flags else float("nan")
