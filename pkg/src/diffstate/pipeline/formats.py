"""Readers and writers for the files the command line consumes and produces.

Camera, state, ground-truth and config files are JSON objects; joint files
are plain text with one frame per line.  Every reader raises ``DataError``
with the offending path on missing files or malformed content.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..geometry import BezierState
from ..kinematics import KinematicChain, PoseSE3, VertexOffsets, load_robot
from ..renderer import CameraModel

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


class DataError(ValueError):
    """Bad or missing input data (exit code 2 on the command line)."""


def _read_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{what} file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{what} file {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise DataError(f"{what} file {path} must hold a JSON object")
    return obj


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _floats(obj, key, shape, path):
    if key not in obj:
        raise DataError(f"{path}: missing field {key!r}")
    try:
        arr = np.asarray(obj[key], dtype=float)
    except (TypeError, ValueError):
        raise DataError(f"{path}: field {key!r} must be numeric") from None
    if shape is not None and arr.shape != shape:
        raise DataError(f"{path}: field {key!r} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: field {key!r} has non-finite entries")
    return arr


def _list(a):
    return np.asarray(a, dtype=float).tolist()


# ----------------------------------------------------------------- camera

def load_camera(path) -> CameraModel:
    obj = _read_json(path, "camera")
    missing = [k for k in CAMERA_KEYS if k not in obj]
    if missing:
        raise DataError(f"camera file {path} is missing {', '.join(missing)}")
    unknown = sorted(set(obj) - set(CAMERA_KEYS))
    if unknown:
        raise DataError(f"camera file {path} has unknown keys {unknown}")
    try:
        w, h = obj["width"], obj["height"]
        if int(w) != w or int(h) != h or w <= 0 or h <= 0:
            raise ValueError("width and height must be positive integers")
        return CameraModel(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]), int(w), int(h))
    except (TypeError, ValueError) as e:
        raise DataError(f"camera file {path}: {e}") from None


def save_camera(camera: CameraModel, path) -> None:
    _write_json({"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                 "width": camera.width, "height": camera.height}, path)


# ----------------------------------------------------------------- joints

def load_joints(path) -> np.ndarray:
    """(frames, joints) array in radians; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"joints file not found: {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            row = [float(x) for x in line.replace(",", " ").split()]
        except ValueError:
            raise DataError(f"{path}:{n}: joint values must be numbers") from None
        if not all(math.isfinite(x) for x in row):
            raise DataError(f"{path}:{n}: non-finite joint value")
        if rows and len(row) != len(rows[0]):
            raise DataError(f"{path}:{n}: expected {len(rows[0])} joint values, got {len(row)}")
        rows.append(row)
    if not rows:
        raise DataError(f"joints file {path} has no frames")
    return np.array(rows)


def save_joints(q, path) -> None:
    q = np.atleast_2d(np.asarray(q, dtype=float))
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in q))


# ----------------------------------------------------------------- robot

def load_chain(path) -> KinematicChain:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"robot description not found: {path}")
    try:
        return load_robot(path)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"robot description {path}: {e}") from None


# ----------------------------------------------------------------- states

def save_soft_state(curve: BezierState, path, extra: dict | None = None) -> None:
    obj = {"kind": "soft", "control": _list(curve.control), "radius": _list(curve.radius)}
    obj.update(extra or {})
    _write_json(obj, path)


def save_pose_state(pose: PoseSE3, path, offsets: VertexOffsets | None = None,
                    extra: dict | None = None) -> None:
    obj = {"kind": "rigid", "axis_angle": _list(pose.rotation), "translation": _list(pose.translation)}
    if offsets is not None:
        obj["offsets"] = [_list(o) for o in offsets.per_link]
    obj.update(extra or {})
    _write_json(obj, path)


def load_state(path) -> dict:
    """Soft or rigid state file as a dict with array values.

    Soft: ``curve`` (BezierState).  Rigid: ``pose`` (PoseSE3) and optionally
    ``offsets`` (list of per-link arrays).  Ground-truth extras such as
    ``end_effector`` or ``centerline_3d`` are passed through as arrays.
    """
    obj = _read_json(path, "state")
    kind = obj.get("kind")
    out = {"kind": kind}
    if kind == "soft":
        control = _floats(obj, "control", (3, 3), path)
        radius = _floats(obj, "radius", None, path)
        if radius.ndim != 1 or radius.size < 2 or np.any(radius <= 0):
            raise DataError(f"{path}: radius must be a list of at least 2 positive values")
        out["curve"] = BezierState(control, radius)
        for key in ("centerline_3d", "centerline_2d"):
            if key in obj:
                out[key] = _floats(obj, key, None, path)
    elif kind == "rigid":
        out["pose"] = PoseSE3(_floats(obj, "axis_angle", (3,), path), _floats(obj, "translation", (3,), path))
        if "offsets" in obj:
            try:
                out["offsets"] = [np.asarray(o, dtype=float).reshape(-1, 3) for o in obj["offsets"]]
            except (TypeError, ValueError):
                raise DataError(f"{path}: offsets must be lists of 3-vectors") from None
        for key in ("end_effector", "end_effector_2d", "joints"):
            if key in obj:
                out[key] = _floats(obj, key, None, path)
    else:
        raise DataError(f"{path}: 'kind' must be 'soft' or 'rigid', got {kind!r}")
    return out


# ----------------------------------------------------------------- config

def load_config(path) -> dict:
    return _read_json(path, "config")
