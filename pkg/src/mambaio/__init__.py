"""Pedestrian inertial odometry with a dual-branch convolution / state-space regressor."""

__version__ = "0.1.0"
