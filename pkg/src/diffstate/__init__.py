"""Robot shape and pose estimation by fitting rendered silhouettes to masks.

Modules: ``autodiff`` (reverse-mode tape), ``geometry`` (Bezier tubes),
``kinematics`` (DH chains), ``renderer`` (soft silhouettes), ``imageproc``
(mask preprocessing), ``losses``, ``optimizer`` and ``pipeline`` (files,
metrics, synthetic data, command line).
"""
__version__ = "0.1.0"
