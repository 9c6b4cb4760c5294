"""Command-line entry point.

    diffstate [global flags] <command> [command flags]

Exit codes: 0 success, 1 usage error, 2 bad or missing input data,
3 numerical abort during estimation.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..geometry import BezierState, build_tube_mesh
from ..imageproc import (EmptyMaskError, border_base_hint, clean_mask, color_segment, extract_keypoints,
                         load_mask, load_rgb, mask_centerline)
from ..kinematics import VertexOffsets, assemble_robot_mesh, end_effector_position, rotation_angle_between
from ..losses import LossWeights
from ..optimizer import (InitError, NumericalAbort, OptimConfig, RigidPoseProblem, SoftShapeProblem,
                         estimate, write_trace)
from ..renderer import SIGMA_HARD, project, render_silhouette, save_image
from . import formats, synth
from .experiments import POSE_SIGMA, SHAPE_SIGMA
from .formats import DataError
from .metrics import MetricReport, centerline_error, centerline_samples, point_error

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SHAPE_DEFAULTS = dict(iters=200, lr_state=0.2, lr_verts=0.2, sigma=SHAPE_SIGMA, restarts=1, seed=0,
                      update="adam", keypoints=4, n_s=100, n_phi=40, default_radius=0.01,
                      base_side="left", hsv_lo=None, hsv_hi=None, weights={})
POSE_DEFAULTS = dict(iters=500, lr_state=1e-2, lr_verts=1e-4, sigma=POSE_SIGMA, restarts=1, seed=0,
                     update="adam", gamma=100.0, offsets=True, offset_l2=0.0, weights={})
SYNTH_DEFAULTS = dict(seed=0, count=1, noise=0.0, depth=0.5)
RENDER_DEFAULTS = dict(sigma=SIGMA_HARD, n_phi=40)
EVAL_DEFAULTS = dict(pck_2d=[5.0, 10.0, 20.0, 50.0], pck_3d=[5.0, 10.0, 20.0, 50.0, 100.0, 200.0])

# flags shared by every command; values from the command line beat --config
GLOBAL_FLAGS = ["seed", "iters", "lr_state", "lr_verts", "sigma", "restarts", "out_dir"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(parser: argparse.ArgumentParser):
    g = parser.add_argument_group("global flags")
    sup = argparse.SUPPRESS
    g.add_argument("--config", type=Path, default=sup, help="JSON file of default settings")
    g.add_argument("--seed", type=int, default=sup, help="random seed")
    g.add_argument("--iters", type=int, default=sup, help="optimization iterations")
    g.add_argument("--lr-state", type=float, default=sup, help="learning rate of the state parameters")
    g.add_argument("--lr-verts", type=float, default=sup, help="learning rate of the vertex parameters")
    g.add_argument("--sigma", type=float, default=sup, help="render blur in px^2")
    g.add_argument("--restarts", type=int, default=sup, help="random restarts; the best is kept")
    g.add_argument("--out-dir", type=Path, default=sup, help="output directory (default: current)")
    g.add_argument("--update", choices=["gd", "adam"], default=sup, help="update rule")
    g.add_argument("--timing", action="store_true", default=sup, help="record wall_ms in loss traces")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffstate", description="Robot shape and pose estimation from silhouettes.")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("reconstruct-shape", help="fit a Bezier tube to a soft-arm mask")
    _global_flags(s)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--mask", type=Path, help="binary mask image")
    src.add_argument("--rgb", type=Path, help="colour image, segmented with hsv_lo/hsv_hi from --config")
    s.add_argument("--camera", type=Path, required=True)
    s.add_argument("--keypoints", type=int, default=argparse.SUPPRESS, help="centerline keypoints (0 = mask only)")
    s.add_argument("--base-side", choices=["left", "right", "top", "bottom"], default=argparse.SUPPRESS,
                   help="image border the arm enters from")
    s.add_argument("--fix-base", action="store_true", help="hold c0 at --base")
    s.add_argument("--base", type=float, nargs=3, metavar=("X", "Y", "Z"), help="known base point (m)")
    s.add_argument("--init", type=Path, help="initial shape state file instead of a random start")
    s.add_argument("--save-renders", action="store_true", help="write every iteration's silhouette")
    s.add_argument("--clean-mask", action="store_true", help="keep the largest component and fill its holes")

    e = sub.add_parser("estimate-pose", help="fit the camera-from-base pose of a rigid arm")
    _global_flags(e)
    e.add_argument("--mask", type=Path, required=True)
    e.add_argument("--robot", type=Path, required=True, help="robot description (JSON)")
    e.add_argument("--joints", type=Path, required=True, help="joint file, one frame per line")
    e.add_argument("--frame", type=int, default=0, help="line of the joint file to use")
    e.add_argument("--camera", type=Path, required=True)
    e.add_argument("--gamma", type=float, default=argparse.SUPPRESS, help="distance map scale")
    e.add_argument("--no-offsets", action="store_true", help="keep the primitive meshes fixed")
    e.add_argument("--init", type=Path, help="initial pose state file instead of a random start")
    e.add_argument("--save-renders", action="store_true")
    e.add_argument("--clean-mask", action="store_true", help="keep the largest component and fill its holes")

    m = sub.add_parser("make-synthetic", help="render a synthetic dataset with ground truth")
    _global_flags(m)
    m.add_argument("--scenario", choices=["soft", "rigid"], required=True)
    m.add_argument("--count", type=int, default=argparse.SUPPRESS)
    m.add_argument("--noise", type=float, default=argparse.SUPPRESS, help="pixel flip rate")
    m.add_argument("--camera", type=Path, help="camera file (default: built-in 320x240)")
    m.add_argument("--robot", type=Path, help="robot description for rigid scenes")
    m.add_argument("--depth", type=float, default=argparse.SUPPRESS, help="soft arm depth (m)")

    v = sub.add_parser("eval", help="compare estimates against ground truth")
    _global_flags(v)
    v.add_argument("--est", type=Path, nargs="+", required=True, help="estimated state files")
    v.add_argument("--gt", type=Path, nargs="+", required=True, help="ground-truth files, same order")
    v.add_argument("--camera", type=Path, required=True)
    v.add_argument("--robot", type=Path, help="robot description; needed when estimates lack end_effector")
    v.add_argument("--pck-2d", type=float, nargs="+", default=argparse.SUPPRESS)
    v.add_argument("--pck-3d", type=float, nargs="+", default=argparse.SUPPRESS)

    r = sub.add_parser("render-debug", help="render a state file to a PNG")
    _global_flags(r)
    r.add_argument("--state", type=Path, required=True)
    r.add_argument("--camera", type=Path, required=True)
    r.add_argument("--robot", type=Path, help="robot description for rigid states")
    r.add_argument("--joints", type=Path, help="joint file for rigid states")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--output", type=Path, help="image path (default: <out-dir>/render.png)")
    return p


# ----------------------------------------------------------------- settings

def settings(args, defaults: dict) -> dict:
    """defaults < --config file < command-line flags."""
    out = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        cfg = formats.load_config(cfg_path)
        unknown = sorted(set(cfg) - set(defaults) - {"out_dir", "update", "timing"})
        if unknown:
            raise DataError(f"config file {cfg_path}: unknown keys {unknown}")
        out.update(cfg)
    for key in list(defaults) + GLOBAL_FLAGS + ["update", "timing"]:
        if key in vars(args):
            out[key] = getattr(args, key)
    out.setdefault("out_dir", Path("."))
    out["out_dir"] = Path(out["out_dir"])
    out.setdefault("timing", False)
    return out


def optim_config(st: dict) -> OptimConfig:
    try:
        return OptimConfig(iterations=int(st["iters"]), lr_state=float(st["lr_state"]),
                           lr_verts=float(st["lr_verts"]), sigma=float(st["sigma"]),
                           rng_seed=int(st["seed"]), update=st["update"], restarts=int(st["restarts"]),
                           keep_renders=bool(st.get("save_renders", False)),
                           record_timing=bool(st["timing"]))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid optimization settings: {e}") from None


def weights(st: dict, base: LossWeights) -> LossWeights:
    w = dict(mask=base.mask, keypoint=base.keypoint, dist=base.dist, app=base.app)
    extra = st.get("weights") or {}
    unknown = set(extra) - set(w)
    if unknown:
        raise DataError(f"unknown loss weights {sorted(unknown)}")
    w.update({k: float(v) for k, v in extra.items()})
    return LossWeights(**w)


def _check_mask(mask, camera, path):
    if mask.shape != camera.shape:
        raise DataError(f"mask {path} is {mask.shape[1]}x{mask.shape[0]} but the camera is "
                        f"{camera.width}x{camera.height}")
    if not mask.any():
        raise DataError(f"mask {path} has no positive pixels")


def _save_renders(renders, out_dir):
    d = out_dir / "renders"
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(renders):
        save_image(img, d / f"iter_{i:04d}.png")


def _flag_report(result):
    for f in result.flags:
        print(f"note: {f}", file=sys.stderr)


# ----------------------------------------------------------------- commands

def cmd_reconstruct_shape(args) -> int:
    st = settings(args, SHAPE_DEFAULTS)
    st["save_renders"] = args.save_renders
    cfg = optim_config(st)
    camera = formats.load_camera(args.camera)
    if args.mask is not None:
        mask = _load_mask(args.mask)
    else:
        if st["hsv_lo"] is None or st["hsv_hi"] is None:
            raise UsageError("--rgb needs hsv_lo and hsv_hi in the --config file")
        if not args.rgb.is_file():
            raise DataError(f"image not found: {args.rgb}")
        mask = color_segment(load_rgb(args.rgb), st["hsv_lo"], st["hsv_hi"])
    _check_mask(mask, camera, args.mask or args.rgb)
    if args.clean_mask:
        mask = clean_mask(mask)
    if args.fix_base and args.base is None:
        raise UsageError("--fix-base needs --base X Y Z")
    base3d = np.array(args.base) if args.base is not None else None
    if base3d is not None:
        uv, ok = project(camera, base3d[None])
        if not ok[0]:
            raise DataError("--base lies behind the camera")
        hint, anchored = uv[0], True
    else:
        hint, anchored = border_base_hint(mask, st["base_side"]), False

    K = int(st["keypoints"])
    keypoints = None
    if K > 0:
        cl = mask_centerline(mask, hint, anchor=anchored)
        keypoints = extract_keypoints(cl, K)
    w = weights(st, LossWeights.shape_defaults())
    problem = SoftShapeProblem(camera, mask, keypoints, w, n_s=int(st["n_s"]), n_phi=int(st["n_phi"]),
                               fix_base=args.fix_base, base=base3d,
                               default_radius=float(st["default_radius"]))
    init = None
    if args.init is not None:
        state = formats.load_state(args.init)
        if state["kind"] != "soft":
            raise DataError(f"{args.init} is not a soft shape state")
        curve = state["curve"]
        if curve.n_rings != problem.n_s:
            curve = BezierState(curve.control, np.interp(np.linspace(0, 1, problem.n_s),
                                                         np.linspace(0, 1, curve.n_rings), curve.radius))
        if args.fix_base:
            curve = BezierState(np.vstack([base3d, curve.control[1:]]), curve.radius)
        init = problem.params_from(curve)

    result = estimate(problem, cfg, init)
    _flag_report(result)
    out = st["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    best = problem.state(result.params)
    formats.save_soft_state(best, out / "shape.json", {"loss": result.best_loss})
    write_trace(result, out / "loss.csv")
    save_image(render_silhouette(build_tube_mesh(best, problem.n_s, problem.n_phi), camera, SIGMA_HARD),
               out / "silhouette.png")
    if args.save_renders:
        _save_renders(result.renders, out)
    print(f"best loss {result.best_loss:.6g} at iteration {result.best_iteration}; wrote {out / 'shape.json'}")
    return EXIT_OK


def _load_mask(path):
    if not Path(path).is_file():
        raise DataError(f"mask image not found: {path}")
    return load_mask(path)


def _joint_row(path, frame, chain):
    joints = formats.load_joints(path)
    if not 0 <= frame < joints.shape[0]:
        raise DataError(f"{path} has {joints.shape[0]} frames; --frame {frame} is out of range")
    q = joints[frame]
    if q.shape[0] != len(chain):
        raise DataError(f"{path} has {q.shape[0]} joint values per frame but the robot has {len(chain)} links")
    return q


def cmd_estimate_pose(args) -> int:
    st = settings(args, POSE_DEFAULTS)
    st["save_renders"] = args.save_renders
    if args.no_offsets:
        st["offsets"] = False
    cfg = optim_config(st)
    camera = formats.load_camera(args.camera)
    chain = formats.load_chain(args.robot)
    q = _joint_row(args.joints, args.frame, chain)
    mask = _load_mask(args.mask)
    _check_mask(mask, camera, args.mask)
    if args.clean_mask:
        mask = clean_mask(mask)
    problem = RigidPoseProblem(chain, q, camera, mask, weights(st, LossWeights.pose_defaults()),
                               gamma=float(st["gamma"]), optimize_offsets=bool(st["offsets"]),
                               offset_l2=float(st["offset_l2"]))
    init = None
    if args.init is not None:
        state = formats.load_state(args.init)
        if state["kind"] != "rigid":
            raise DataError(f"{args.init} is not a rigid pose state")
        init = problem.params_from(state["pose"])

    result = estimate(problem, cfg, init)
    _flag_report(result)
    out = st["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    pose = problem.pose(result.params)
    offsets = problem.offsets(result.params)
    ee = end_effector_position(chain, q, pose)
    formats.save_pose_state(pose, out / "pose.json", offsets,
                            {"end_effector": ee.tolist(), "joints": q.tolist(), "loss": result.best_loss})
    write_trace(result, out / "loss.csv")
    save_image(render_silhouette(assemble_robot_mesh(chain, q, offsets, pose), camera, SIGMA_HARD),
               out / "silhouette.png")
    if args.save_renders:
        _save_renders(result.renders, out)
    print(f"best loss {result.best_loss:.6g} at iteration {result.best_iteration}; wrote {out / 'pose.json'}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    st = settings(args, SYNTH_DEFAULTS)
    camera = formats.load_camera(args.camera) if args.camera else synth.DEFAULT_CAMERA
    chain = formats.load_chain(args.robot) if args.robot else synth.default_chain()
    if int(st["count"]) < 1:
        raise UsageError("--count must be at least 1")
    try:
        frames = synth.synth_generate(args.scenario, int(st["count"]), camera, float(st["noise"]),
                                      int(st["seed"]), chain, float(st["depth"]))
    except ValueError as e:
        raise UsageError(str(e)) from None
    empty = [f.frame_id for f in frames if not f.mask.any()]
    if empty:
        raise DataError(f"frames {empty} rendered empty masks; check the camera")
    out = synth.write_dataset(frames, st["out_dir"], chain)
    print(f"wrote {len(frames)} {args.scenario} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    st = settings(args, EVAL_DEFAULTS)
    if len(args.est) != len(args.gt):
        raise UsageError(f"got {len(args.est)} estimates for {len(args.gt)} ground-truth files")
    camera = formats.load_camera(args.camera)
    chain = formats.load_chain(args.robot) if args.robot else None
    ids, e2, e3, rot = [], [], [], []
    kind = None
    for est_path, gt_path in zip(args.est, args.gt):
        est, gt = formats.load_state(est_path), formats.load_state(gt_path)
        if est["kind"] != gt["kind"]:
            raise DataError(f"{est_path} is a {est['kind']} state but {gt_path} is {gt['kind']}")
        if kind is not None and est["kind"] != kind:
            raise DataError("cannot mix soft and rigid frames in one report")
        kind = est["kind"]
        ids.append(Path(gt_path).stem.removesuffix("_truth"))
        if kind == "soft":
            g3 = gt.get("centerline_3d")
            g2 = gt.get("centerline_2d")
            if g3 is None and g2 is None:
                g3, _ = centerline_samples(gt["curve"], camera)
            a, b = centerline_error(est["curve"], camera, g3, g2)
        else:
            a, b = point_error(_end_effector(est, est_path, chain), _end_effector(gt, gt_path, chain), camera)
            rot.append(rotation_angle_between(est["pose"].matrix()[:3, :3], gt["pose"].matrix()[:3, :3]))
        e2.append(a)
        e3.append(b)
    extra = {"rot_deg": np.degrees(rot)} if kind == "rigid" else {}
    report = MetricReport.build(ids, e2, e3, extra, st["pck_2d"], st["pck_3d"])
    out = st["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    print(report.table())
    return EXIT_OK


def _end_effector(state, path, chain):
    if "end_effector" in state:
        return state["end_effector"]
    if chain is None or "joints" not in state:
        raise DataError(f"{path} has no end_effector; pass --robot and store joints in the file")
    return end_effector_position(chain, state["joints"], state["pose"])


def cmd_render_debug(args) -> int:
    st = settings(args, RENDER_DEFAULTS)
    camera = formats.load_camera(args.camera)
    state = formats.load_state(args.state)
    if state["kind"] == "soft":
        curve = state["curve"]
        mesh = build_tube_mesh(curve, curve.n_rings, int(st["n_phi"]))
    else:
        if args.robot is None:
            raise UsageError("rigid states need --robot")
        chain = formats.load_chain(args.robot)
        if args.joints is not None:
            q = _joint_row(args.joints, args.frame, chain)
        elif "joints" in state:
            q = state["joints"]
        else:
            raise UsageError("rigid states need --joints or joints stored in the state file")
        offsets = VertexOffsets.zeros(chain)
        if "offsets" in state:
            offsets = VertexOffsets(state["offsets"])
            if offsets.counts != chain.vertex_counts():
                raise DataError(f"{args.state}: offsets do not match the robot's primitive meshes")
        mesh = assemble_robot_mesh(chain, q, offsets, state["pose"])
    try:
        img = render_silhouette(mesh, camera, float(st["sigma"]))
    except ValueError as e:
        raise UsageError(str(e)) from None
    path = args.output or st["out_dir"] / "render.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(img, path)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "reconstruct-shape": cmd_reconstruct_shape,
    "estimate-pose": cmd_estimate_pose,
    "make-synthetic": cmd_make_synthetic,
    "eval": cmd_eval,
    "render-debug": cmd_render_debug,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("diffstate: a command is required (see --help)")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptyMaskError, FileNotFoundError, InitError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
