"""Datasets, metrics, synthetic frames and the command line."""
from .formats import DataError, load_camera, load_joints, load_state, save_camera, save_joints
from .metrics import MetricReport, centerline_error, pck, point_error
from .synth import FrameRecord, default_chain, synth_generate

__all__ = ["DataError", "FrameRecord", "MetricReport", "centerline_error", "default_chain", "load_camera",
           "load_joints", "load_state", "pck", "point_error", "save_camera", "save_joints", "synth_generate"]
