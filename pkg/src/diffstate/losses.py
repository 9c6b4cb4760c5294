"""Objective terms comparing a rendered silhouette with the reference mask.

Silhouettes may be autodiff nodes or arrays; masks and distance maps are
always plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, value_of
from .geometry import curve_points
from .renderer import CameraModel, project

BEHIND_CAMERA_PENALTY = 1e4
ARC_SAMPLES = 200


@dataclass
class LossWeights:
    mask: float = 1.0
    keypoint: float = 0.0
    dist: float = 0.0
    app: float = 0.0

    def __post_init__(self):
        w = [self.mask, self.keypoint, self.dist, self.app]
        if min(w) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(w) <= 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def shape_defaults(cls):
        return cls(mask=1.0, keypoint=100.0)

    @classmethod
    def pose_defaults(cls):
        return cls(mask=1.0, dist=1.0, app=1.0)


def _same_shape(name, S, M):
    if value_of(S).shape != np.shape(M):
        raise ValueError(f"{name}: silhouette shape {value_of(S).shape} != reference shape {np.shape(M)}")


def mask_loss(S, M):
    """Sum over pixels of (S - M)^2."""
    _same_shape("mask_loss", S, M)
    diff = S - np.asarray(M, dtype=float)
    return ad.total(diff * diff)


def dist_loss(S, D):
    """Sum over pixels of S * D: rendered mass weighted by distance to the mask."""
    _same_shape("dist_loss", S, D)
    return ad.total(S * np.asarray(D, dtype=float))


def appearance_loss(S, M):
    """|sum S - sum M|."""
    _same_shape("appearance_loss", S, M)
    return ad.absolute(ad.total(S) - float(np.sum(M)))


def projected_arclength_points(control, camera: CameraModel, fractions, n=ARC_SAMPLES):
    """Image points at the given fractions of the projected curve's arc length.

    The curve is sampled at n + 1 uniform parameters; the result is
    differentiable in ``control``.  Returns ``(points, all_in_front)``.
    """
    s = np.linspace(0.0, 1.0, n + 1)
    uv, valid = project(camera, curve_points(control, s))
    seg = ad.norm(uv[1:] - uv[:-1])
    cum = ad.matmul(np.tril(np.ones((n, n))), ad.reshape(seg, (n, 1)))
    cum = ad.reshape(cum, (n,))
    cum_v = value_of(cum)
    target = np.asarray(fractions, dtype=float) * cum_v[-1]
    k = np.clip(np.searchsorted(cum_v, target, side="left"), 0, n - 1)
    prev = ad.concat([np.zeros(1), cum[:-1]])[k]
    t = (fractions * cum[n - 1] - prev) / ad.maximum(seg[k], 1e-12)
    pts = uv[k] + ad.reshape(t, (-1, 1)) * (uv[k + 1] - uv[k])
    return pts, bool(np.all(valid))


def keypoint_loss(control, camera: CameraModel, fractions, targets, pairing="arclength"):
    """Sum of pixel distances between curve points and their 2D targets.

    ``pairing="arclength"`` matches target i with the point at fraction s_i of
    the projected curve's arc length, which is how the targets are sampled
    from the mask centreline; ``"parameter"`` uses p(s_i) directly.

    Returns ``(loss, flagged)``; keypoints behind the near plane contribute a
    constant penalty with no gradient and set ``flagged``.
    """
    fractions = np.atleast_1d(np.asarray(fractions, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    if fractions.shape[0] == 0 or fractions.shape[0] != targets.shape[0]:
        raise ValueError("need one target per keypoint fraction (K >= 1)")
    if pairing not in ("arclength", "parameter"):
        raise ValueError(f"unknown keypoint pairing {pairing!r}")
    if pairing == "arclength":
        uv, in_front = projected_arclength_points(control, camera, fractions)
        if in_front:
            return ad.total(ad.norm(uv - targets)), False
    # parameter pairing, also the fallback when part of the curve is behind the camera
    uv, valid = project(camera, curve_points(control, fractions))
    err = ad.norm(uv - targets)
    if np.all(valid):
        return ad.total(err), pairing == "arclength"
    penalty = BEHIND_CAMERA_PENALTY * np.count_nonzero(~valid)
    return ad.total(err * valid.astype(float)) + penalty, True


def shape_loss(S, M, control, camera, fractions, targets, w: LossWeights, pairing="arclength"):
    """lambda_mask * L_mask + lambda_keypoint * L_keypoint; returns (total, parts, flagged)."""
    parts = {"mask": mask_loss(S, M)}
    flagged = False
    total = w.mask * parts["mask"]
    if w.keypoint > 0 and len(np.atleast_1d(fractions)):
        parts["keypoint"], flagged = keypoint_loss(control, camera, fractions, targets, pairing)
        total = total + w.keypoint * parts["keypoint"]
    return total, parts, flagged


def pose_loss(S, M, D, w: LossWeights):
    """lambda_mask * L_mask + lambda_dist * L_dist + lambda_app * L_app; returns (total, parts)."""
    parts = {"mask": mask_loss(S, M), "dist": dist_loss(S, D), "app": appearance_loss(S, M)}
    total = w.mask * parts["mask"] + w.dist * parts["dist"] + w.app * parts["app"]
    return total, parts


def scalar(x) -> float:
    return float(value_of(x)) if isinstance(x, Node) else float(np.asarray(x))
