"""Reconstruction and pose error metrics, PCK curves and their CSV report."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BezierState, curve_points
from ..renderer import CameraModel, project

# ground-truth centerline samples written by the synthetic generator
GT_SAMPLES = 1000
EVAL_POINTS = 100


def _nearest_mean(points, reference) -> float:
    """Mean distance from each point to its nearest reference sample."""
    points = np.asarray(points, dtype=float)
    reference = np.asarray(reference, dtype=float)
    d2 = np.sum((points[:, None, :] - reference[None, :, :]) ** 2, axis=-1)
    return float(np.mean(np.sqrt(np.min(d2, axis=1))))


def centerline_error(est: BezierState, camera: CameraModel, gt_3d=None, gt_2d=None,
                     n_pts: int = EVAL_POINTS):
    """(e2D in px, e3D in mm) between an estimated curve and ground-truth samples.

    The estimate is sampled at ``n_pts`` uniform parameters and each sample is
    matched to its nearest ground-truth point.  A 2D reference defaults to the
    projection of the 3D one; a missing component yields NaN.
    """
    if gt_3d is None and gt_2d is None:
        raise ValueError("centerline_error needs 3D or 2D ground-truth samples")
    if n_pts < 2:
        raise ValueError("n_pts must be at least 2")
    p = curve_points(np.asarray(est.control, dtype=float), np.linspace(0.0, 1.0, n_pts))
    e3 = np.nan
    if gt_3d is not None:
        gt_3d = np.asarray(gt_3d, dtype=float).reshape(-1, 3)
        e3 = 1000.0 * _nearest_mean(p, gt_3d)
        if gt_2d is None:
            gt_2d = project(camera, gt_3d)[0]
    uv = project(camera, p)[0]
    e2 = _nearest_mean(uv, np.asarray(gt_2d, dtype=float).reshape(-1, 2))
    return e2, e3


def centerline_samples(curve: BezierState, camera: CameraModel, n: int = GT_SAMPLES):
    """Dense 3D centerline samples and their projections, as stored in ground-truth files."""
    p = curve_points(np.asarray(curve.control, dtype=float), np.linspace(0.0, 1.0, n))
    return p, project(camera, p)[0]


def point_error(est_3d, gt_3d, camera: CameraModel):
    """(2D px, 3D mm) error between two camera-frame points."""
    est_3d = np.asarray(est_3d, dtype=float)
    gt_3d = np.asarray(gt_3d, dtype=float)
    uv = project(camera, np.stack([est_3d, gt_3d]))[0]
    return float(np.linalg.norm(uv[0] - uv[1])), 1000.0 * float(np.linalg.norm(est_3d - gt_3d))


def pck(errors, thresholds):
    """[(threshold, fraction of errors <= threshold)] for sorted positive thresholds."""
    errors = np.asarray(errors, dtype=float).ravel()
    if errors.size == 0:
        raise ValueError("pck needs at least one error value")
    thresholds = np.asarray(thresholds, dtype=float).ravel()
    if np.any(thresholds <= 0) or np.any(np.diff(thresholds) < 0):
        raise ValueError("pck thresholds must be positive and sorted")
    return [(float(t), float(np.count_nonzero(errors <= t)) / errors.size) for t in thresholds]


@dataclass
class MetricReport:
    frame_ids: list
    e2d: np.ndarray  # px
    e3d: np.ndarray  # mm
    extra: dict = field(default_factory=dict)  # name -> per-frame array
    pck2d: list = field(default_factory=list)
    pck3d: list = field(default_factory=list)

    @classmethod
    def build(cls, frame_ids, e2d, e3d, extra=None, thresholds_2d=(), thresholds_3d=()):
        e2d = np.asarray(e2d, dtype=float)
        e3d = np.asarray(e3d, dtype=float)
        rep = cls(list(frame_ids), e2d, e3d, {k: np.asarray(v, dtype=float) for k, v in (extra or {}).items()})
        if len(thresholds_2d) and np.all(np.isfinite(e2d)):
            rep.pck2d = pck(e2d, thresholds_2d)
        if len(thresholds_3d) and np.all(np.isfinite(e3d)):
            rep.pck3d = pck(e3d, thresholds_3d)
        return rep

    def summary(self) -> dict:
        out = {}
        for name, v in [("e2d_px", self.e2d), ("e3d_mm", self.e3d)] + list(self.extra.items()):
            out[name] = (float(np.mean(v)), float(np.std(v))) if v.size else (np.nan, np.nan)
        return out

    def rows(self):
        """CSV rows: header, one row per frame, mean and std rows, then PCK rows."""
        names = ["e2d_px", "e3d_mm"] + list(self.extra)
        cols = [self.e2d, self.e3d] + list(self.extra.values())
        yield ["frame"] + names
        for i, fid in enumerate(self.frame_ids):
            yield [str(fid)] + [_fmt(c[i]) for c in cols]
        summ = self.summary()
        yield ["mean"] + [_fmt(summ[n][0]) for n in names]
        yield ["std"] + [_fmt(summ[n][1]) for n in names]
        for label, curve in (("pck2d_px", self.pck2d), ("pck3d_mm", self.pck3d)):
            for t, frac in curve:
                yield [f"{label}@{t:g}", _fmt(frac)] + [""] * (len(names) - 1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())

    def table(self) -> str:
        rows = list(self.rows())
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _fmt(x) -> str:
    return repr(float(x))
