"""Pinhole stereo rig geometry and planar robot-frame transforms.

Camera frame axes are (forward, left, up). The reference camera (the left
camera, image ``I1``) sits at the robot's planar origin facing along the
heading, so camera-frame points and robot-frame points coincide.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ZeroDisparity(ValueError):
    """Disparity 0 reprojects to a point at infinity."""


@dataclass(frozen=True)
class CameraRig:
    """Three-camera horizontally aligned rig.

    ``baseline_m`` is the left-to-right spacing; the centre camera sits at
    half of it. Pixel columns grow to the right and rows grow downward.
    """

    focal_length_px: float = 100.0
    baseline_m: float = 0.1
    cu: float = 80.0
    cv: float = 60.0
    width: int = 160
    height: int = 120
    d_max: int = 48

    def __post_init__(self):
        if self.focal_length_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal length and baseline must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError("principal point outside the image")
        if not (1 <= self.d_max < self.width):
            raise ValueError("d_max must satisfy 1 <= d_max < width")

    @property
    def fb(self) -> float:
        return self.focal_length_px * self.baseline_m

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def camera_offsets(self) -> tuple[float, float, float]:
        """Lateral (left-axis) offsets of cameras 1, 2, 3 in the robot frame."""
        b = self.baseline_m
        return (0.0, -b / 2.0, -b)


@dataclass(frozen=True)
class RobotPose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    t = float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)
    if t == -np.pi:
        t = np.pi
    return t


def reproject(rig: CameraRig, p, d) -> np.ndarray:
    """Camera-frame point ``(forward, left, up)`` of pixel ``p=(u, v)`` at disparity ``d``.

    ``d`` is the wide-baseline (camera 1 to camera 3) disparity.
    """
    u, v = p
    if d == 0:
        raise ZeroDisparity("disparity 0 is a point at infinity")
    if d < 0:
        raise ValueError(f"negative disparity {d}")
    forward = rig.fb / d
    f = rig.focal_length_px
    return np.array([forward, -(u - rig.cu) * forward / f, -(v - rig.cv) * forward / f])


def reproject_many(rig: CameraRig, u, v, d) -> np.ndarray:
    """Vectorised :func:`reproject`; returns an array of shape ``(..., 3)``.

    Callers must exclude ``d <= 0`` beforehand.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ZeroDisparity("disparity <= 0 in reproject_many")
    forward = rig.fb / d
    f = rig.focal_length_px
    return np.stack(
        np.broadcast_arrays(forward, -(u - rig.cu) * forward / f, -(v - rig.cv) * forward / f),
        axis=-1,
    )


def transform(pose: RobotPose, q) -> np.ndarray:
    """Robot-frame point(s) to world frame. Works on ``(3,)`` or ``(..., 3)``."""
    q = np.asarray(q, dtype=float)
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    out = np.empty_like(q)
    out[..., 0] = pose.x + c * q[..., 0] - s * q[..., 1]
    out[..., 1] = pose.y + s * q[..., 0] + c * q[..., 1]
    out[..., 2] = q[..., 2]
    return out


def inverse_transform(pose: RobotPose, w) -> np.ndarray:
    """World-frame point(s) to robot frame."""
    w = np.asarray(w, dtype=float)
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    dx = w[..., 0] - pose.x
    dy = w[..., 1] - pose.y
    out = np.empty_like(w)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = w[..., 2]
    return out


def pixel_position(pose: RobotPose, rig: CameraRig, p, d) -> np.ndarray:
    """World position of the scene point seen at pixel ``p`` with disparity ``d``."""
    return transform(pose, reproject(rig, p, d))
