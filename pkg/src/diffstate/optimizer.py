"""Estimation loop: rebuild mesh, render, score, step; keep the best-loss state.

A problem exposes named parameter arrays split into a "state" group and a
"verts" group, each with its own learning rate, and an ``evaluate`` method
mapping (possibly taped) parameters to a scalar loss.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tape, value_of
from .geometry import BezierState, build_tube_mesh
from .imageproc import distance_map
from .kinematics import KinematicChain, PoseSE3, VertexOffsets, assemble_robot_mesh
from .losses import LossWeights, pose_loss, shape_loss
from .renderer import SIGMA_HARD, SIGMA_OPTIM, CameraModel, project, render_silhouette

DIVERGENCE_LIMIT = 1e12
MAX_HALVINGS = 3
MAX_INIT_REJECTIONS = 100
MIN_COVERAGE = 0.01
# soft-arm parameters live in cm (control points) and mm (radius) so that
# one learning rate suits both
CONTROL_UNIT = 0.01
RADIUS_UNIT = 0.001


class NumericalAbort(RuntimeError):
    """Non-finite loss/gradient or unrecoverable divergence."""

    def __init__(self, message, iteration, params):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
        self.params = params


class InitError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    iterations: int = 200
    lr_state: float = 0.2
    lr_verts: float = 0.2
    sigma: float = SIGMA_OPTIM
    rng_seed: int = 0
    update: str = "gd"  # "gd" or "adam"
    restarts: int = 1
    keep_renders: bool = False
    record_timing: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (self.lr_state > 0 and self.lr_verts > 0):
            raise ValueError("learning rates must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.update not in ("gd", "adam"):
            raise ValueError(f"unknown update rule {self.update!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class Evaluation:
    loss: object
    parts: dict
    silhouette: object
    flagged: bool = False


@dataclass
class EstimationResult:
    params: dict
    best_loss: float
    best_iteration: int
    trace: list
    trace_columns: list
    renders: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    restart: int = 0


def _frustum_point(camera, rng, z_lo, z_hi, margin=0.1):
    u = rng.uniform(margin, 1 - margin) * camera.width
    v = rng.uniform(margin, 1 - margin) * camera.height
    z = rng.uniform(z_lo, z_hi)
    return np.array([(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z])


def _coverage(img):
    return float(np.mean(np.asarray(img) > 0.5))


class SoftShapeProblem:
    """Bezier centreline and radius profile of a continuum arm from one mask.

    ``keypoints`` is ``(fractions, targets)`` with targets in pixels, or None.
    With ``fix_base`` the first control point stays at its initial value.
    """

    groups = {"control": "state", "radius": "verts"}

    def __init__(self, camera: CameraModel, mask, keypoints=None, weights: LossWeights | None = None,
                 n_s=100, n_phi=40, fix_base=False, base=None, default_radius=0.01,
                 pairing="arclength"):
        self.camera = camera
        self.mask = np.asarray(mask, dtype=float)
        if self.mask.shape != camera.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match camera {camera.shape}")
        self.weights = weights or LossWeights.shape_defaults()
        if keypoints is None:
            keypoints = (np.zeros(0), np.zeros((0, 2)))
        self.fractions = np.asarray(keypoints[0], dtype=float)
        self.targets = np.asarray(keypoints[1], dtype=float).reshape(-1, 2)
        self.n_s, self.n_phi = n_s, n_phi
        self.fix_base = fix_base
        self.base = None if base is None else np.asarray(base, dtype=float)
        if fix_base and self.base is None:
            raise ValueError("fix_base needs the base point")
        self.default_radius = default_radius
        self.pairing = pairing

    def params_from(self, curve: BezierState) -> dict:
        radius = np.asarray(curve.radius, dtype=float) / RADIUS_UNIT
        # inverse softplus
        raw = radius + np.log(-np.expm1(-radius))
        control = np.asarray(curve.control, dtype=float) / CONTROL_UNIT
        if self.fix_base:
            control = control[1:]
        return {"control": control, "radius": raw}

    def _control(self, params):
        c = params["control"] * CONTROL_UNIT
        if self.fix_base:
            c = ad.concat([self.base.reshape(1, 3), c], axis=0)
        return c

    def curve(self, params) -> BezierState:
        control = self._control(params)
        radius = ad.softplus(params["radius"]) * RADIUS_UNIT
        return BezierState(control, radius)

    def state(self, params) -> BezierState:
        return self.curve({k: value_of(v) for k, v in params.items()}).numpy()

    def evaluate(self, params, sigma) -> Evaluation:
        curve = self.curve(params)
        mesh = build_tube_mesh(curve, self.n_s, self.n_phi)
        S = render_silhouette(mesh, self.camera, sigma)
        loss, parts, flagged = shape_loss(S, self.mask, curve.control, self.camera,
                                          self.fractions, self.targets, self.weights, self.pairing)
        return Evaluation(loss, parts, S, flagged)

    def trace_columns(self):
        return ["L_mask", "L_keypoint"]

    def random_init(self, rng, z_range=(0.2, 2.0)) -> dict:
        for _ in range(MAX_INIT_REJECTIONS):
            c0 = self.base if self.fix_base else _frustum_point(self.camera, rng, *z_range)
            c2 = _frustum_point(self.camera, rng, *z_range)
            mid = _frustum_point(self.camera, rng, *z_range)
            c1 = 0.5 * (c0 + c2) + 0.5 * (mid - 0.5 * (c0 + c2))
            curve = BezierState(np.stack([c0, c1, c2]), np.full(self.n_s, self.default_radius))
            uv, valid = project(self.camera, curve.control[:1])
            if not valid.all() or not (0 <= uv[0, 0] < self.camera.width and 0 <= uv[0, 1] < self.camera.height):
                continue
            img = render_silhouette(build_tube_mesh(curve, self.n_s, self.n_phi), self.camera, SIGMA_HARD)
            if _coverage(img) >= MIN_COVERAGE:
                return self.params_from(curve)
        raise InitError(f"no soft-arm initialisation covered {MIN_COVERAGE:.0%} of the image "
                        f"after {MAX_INIT_REJECTIONS} samples")


class RigidPoseProblem:
    """Camera-from-base pose plus per-vertex link offsets from one mask."""

    groups = {"rotation": "state", "translation": "state", "offsets": "verts"}

    def __init__(self, chain: KinematicChain, q, camera: CameraModel, mask,
                 weights: LossWeights | None = None, gamma=100.0, optimize_offsets=True, offset_l2=0.0):
        self.chain = chain
        self.q = np.asarray(q, dtype=float)
        if self.q.shape[0] != len(chain):
            raise ValueError(f"got {self.q.shape[0]} joint values for {len(chain)} links")
        self.camera = camera
        self.mask = np.asarray(mask, dtype=float)
        if self.mask.shape != camera.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match camera {camera.shape}")
        self.weights = weights or LossWeights.pose_defaults()
        self.gamma = gamma
        self.dist = distance_map(self.mask, gamma)
        self.counts = chain.vertex_counts()
        if offset_l2 < 0:
            raise ValueError("offset_l2 must be nonnegative")
        # optional weight on the sum of squared offsets (metres^2); off by default
        self.offset_l2 = offset_l2
        if not optimize_offsets:
            self.groups = {"rotation": "state", "translation": "state"}

    def params_from(self, pose: PoseSE3, offsets: VertexOffsets | None = None) -> dict:
        p = {"rotation": np.array(value_of(pose.rotation), dtype=float),
             "translation": np.array(value_of(pose.translation), dtype=float)}
        if "offsets" in self.groups:
            p["offsets"] = (offsets.stacked() if offsets is not None
                            else np.zeros((sum(self.counts), 3)))
        return p

    def pose(self, params) -> PoseSE3:
        return PoseSE3(value_of(params["rotation"]).copy(), value_of(params["translation"]).copy())

    def offsets(self, params) -> VertexOffsets:
        if "offsets" not in params:
            return VertexOffsets.zeros(self.chain)
        return VertexOffsets.from_stacked(value_of(params["offsets"]), self.counts)

    def mesh(self, params):
        offsets = params.get("offsets", np.zeros((sum(self.counts), 3)))
        return assemble_robot_mesh(self.chain, self.q, offsets,
                                   PoseSE3(params["rotation"], params["translation"]))

    def evaluate(self, params, sigma) -> Evaluation:
        S = render_silhouette(self.mesh(params), self.camera, sigma)
        loss, parts = pose_loss(S, self.mask, self.dist, self.weights)
        if self.offset_l2 > 0 and "offsets" in params:
            parts["offset_l2"] = ad.total(params["offsets"] * params["offsets"])
            loss = loss + self.offset_l2 * parts["offset_l2"]
        return Evaluation(loss, parts, S)

    def trace_columns(self):
        return ["L_mask", "L_dist", "L_app"]

    def random_init(self, rng, z_range=(0.5, 3.0)) -> dict:
        for _ in range(MAX_INIT_REJECTIONS):
            t = _frustum_point(self.camera, rng, *z_range, margin=0.0)
            rot = Rotation.random(random_state=rng).as_rotvec()
            params = self.params_from(PoseSE3(rot, t))
            img = render_silhouette(self.mesh(params), self.camera, SIGMA_HARD)
            if _coverage(img) >= MIN_COVERAGE:
                return params
        raise InitError(f"no pose initialisation covered {MIN_COVERAGE:.0%} of the image "
                        f"after {MAX_INIT_REJECTIONS} samples")


def _copy(params):
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


def _finite(x):
    return bool(np.all(np.isfinite(x)))


class _Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.reset()

    def reset(self):
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, lrs):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p)) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, np.zeros_like(p)) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = p - lrs[k] * mhat / (np.sqrt(vhat) + self.eps)
        return out


def run_once(problem, config: OptimConfig, params0: dict) -> EstimationResult:
    """One pass of the loop from ``params0``; returns the best-loss parameters."""
    columns = ["iteration", "L"] + problem.trace_columns() + ["wall_ms"]
    params = _copy(params0)
    best_params = _copy(params)
    best_loss, best_iter = math.inf, -1
    lrs = {k: (config.lr_state if g == "state" else config.lr_verts) for k, g in problem.groups.items()}
    adam = _Adam() if config.update == "adam" else None
    trace, renders, flags = [], [], []
    halvings = 0
    if config.iterations == 0:
        flags.append("no iterations run")
    for it in range(config.iterations):
        t0 = time.perf_counter()
        tape = Tape()
        nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
        ev = problem.evaluate(nodes, config.sigma)
        L = float(value_of(ev.loss))
        if not math.isfinite(L):
            raise NumericalAbort("non-finite loss", it, best_params)
        grads = {}
        if L <= DIVERGENCE_LIMIT:
            g = ad.backward(ev.loss)
            grads = {k: g[n] for k, n in nodes.items()}
            if not all(_finite(v) for v in grads.values()):
                raise NumericalAbort("non-finite gradient", it, best_params)
        if ev.flagged and "keypoint behind camera" not in flags:
            flags.append("keypoint behind camera")
        if L < best_loss:
            best_loss, best_iter = L, it
            best_params = _copy(params)
        wall = (time.perf_counter() - t0) * 1e3 if config.record_timing else 0.0
        trace.append([it, L] + [float(value_of(ev.parts.get(c[2:], np.nan))) for c in columns[2:-1]] + [wall])
        if config.keep_renders:
            renders.append(np.array(value_of(ev.silhouette)))
        if L > DIVERGENCE_LIMIT:
            if halvings >= MAX_HALVINGS:
                raise NumericalAbort("loss diverged after halving learning rates", it, best_params)
            halvings += 1
            lrs = {k: v / 2 for k, v in lrs.items()}
            params = _copy(best_params)
            if adam is not None:
                adam.reset()
            flags.append(f"diverged at iteration {it}; learning rates halved")
            continue
        # both groups step from the same loss evaluation
        if adam is not None:
            params = adam.step(params, grads, lrs)
        else:
            params = {k: p - lrs[k] * grads[k] for k, p in params.items()}
    return EstimationResult(best_params, best_loss, best_iter, trace, columns, renders, flags)


def estimate(problem, config: OptimConfig, init: dict | None = None) -> EstimationResult:
    """Run ``config.restarts`` passes and keep the lowest-loss one.

    The first pass starts from ``init`` when given; other passes start from
    seeded random initialisations.
    """
    rng = np.random.default_rng(config.rng_seed)
    best = None
    for r in range(config.restarts):
        params0 = init if (r == 0 and init is not None) else problem.random_init(rng)
        res = run_once(problem, config, params0)
        res.restart = r
        if best is None or res.best_loss < best.best_loss:
            best = res
    return best


def write_trace(result: EstimationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.trace_columns)
        for row in result.trace:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
