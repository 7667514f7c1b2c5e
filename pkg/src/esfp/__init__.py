"""Pose smoothing on a kinematic manifold and human-to-robot arm retargeting."""

__version__ = "0.1.0"
