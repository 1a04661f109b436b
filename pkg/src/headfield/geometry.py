"""Cameras, rays, Euler rotations and pinhole projection.

Conventions used everywhere in the package:

* ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``; a model point ``V`` maps to camera
  space as ``X = R V + t`` and the camera centre is ``-R.T @ t``.
* The camera looks down its +z axis. Image coordinates have their origin at
  the top-left corner, +x to the right and +y down. Pixel ``(col, row)`` is
  the unit square ``[col, col+1) x [row, row+1)``, so its centre sits at
  ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidRay, NonPositiveDepth, PixelOutOfBounds

DEPTH_EPS = 1e-8


def euler_to_rotation(pitch: float, yaw: float, roll: float) -> np.ndarray:
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def euler_to_rotation_torch(angles: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable version of :func:`euler_to_rotation`.

    ``angles`` has shape ``(..., 3)`` holding ``(pitch, yaw, roll)``.
    """
    pitch, yaw, roll = angles.unbind(-1)
    one, zero = torch.ones_like(pitch), torch.zeros_like(pitch)
    cx, sx = torch.cos(pitch), torch.sin(pitch)
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cz, sz = torch.cos(roll), torch.sin(roll)
    rx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1)
    ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1)
    rz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1)
    shape = angles.shape[:-1] + (3, 3)
    return rz.reshape(shape) @ ry.reshape(shape) @ rx.reshape(shape)


@dataclass(frozen=True)
class CameraPose:
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.pitch, self.yaw, self.roll)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.t

    def as_vector(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll, *self.translation], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec) -> "CameraPose":
        vec = [float(v) for v in vec]
        return cls(vec[0], vec[1], vec[2], tuple(vec[3:6]))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int) -> "Intrinsics":
        # focal = width gives roughly a 53 degree horizontal field of view
        return cls(float(width), float(width), width / 2.0, height / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise InvalidRay(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InvalidRay("ray direction must be unit length")

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def camera_center(pose: CameraPose) -> np.ndarray:
    return pose.center


def project(point, pose: CameraPose, K: Intrinsics) -> np.ndarray:
    """Pixel location of ``point`` (or an ``(n, 3)`` array of points)."""
    p = np.asarray(point, dtype=np.float64)
    cam = p @ pose.rotation.T + pose.t
    z = cam[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = K.fx * cam[..., 0] / z + K.cx
    v = K.fy * cam[..., 1] / z + K.cy
    return np.stack([u, v], -1)


def project_torch(points: torch.Tensor, rotation: torch.Tensor, translation: torch.Tensor,
                  K: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable projection; returns ``(pixels, depth)`` without depth checks."""
    cam = points @ rotation.transpose(-1, -2) + translation.unsqueeze(-2)
    z = cam[..., 2]
    u = K.fx * cam[..., 0] / z + K.cx
    v = K.fy * cam[..., 1] / z + K.cy
    return torch.stack([u, v], -1), z


def pixel_directions(pixels, pose: CameraPose, K: Intrinsics) -> np.ndarray:
    """Unit world-space directions of the rays through ``(n, 2)`` pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(pixels[..., 0] - K.cx) / K.fx,
                      (pixels[..., 1] - K.cy) / K.fy,
                      np.ones(pixels.shape[:-1])], -1)
    d = d_cam @ pose.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_centers(K: Intrinsics) -> np.ndarray:
    """``(height, width, 2)`` array of pixel-centre coordinates."""
    cols, rows = np.meshgrid(np.arange(K.width) + 0.5, np.arange(K.height) + 0.5)
    return np.stack([cols, rows], -1)


def ray_through_pixel(pixel, pose: CameraPose, K: Intrinsics, near: float, far: float) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u < K.width and 0.0 <= v < K.height):
        raise PixelOutOfBounds(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    direction = pixel_directions(np.array([u, v]), pose, K)
    return Ray(pose.center, direction, float(near), float(far))


def intersect_sphere(origins: np.ndarray, directions: np.ndarray, center, radius: float):
    """Entry/exit distances of unit-direction rays against a sphere.

    Returns ``(near, far, hit)``; ``near`` is clamped to be non-negative and
    entries for missed rays are meaningless.
    """
    oc = origins - np.asarray(center)
    b = np.sum(oc * directions, -1)
    c = np.sum(oc * oc, -1) - radius ** 2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > 1e-6
    return near, far, hit


def pose_to_dict(pose: CameraPose, K: Intrinsics) -> dict:
    return {"pitch": pose.pitch, "yaw": pose.yaw, "roll": pose.roll,
            "t": [float(x) for x in pose.translation],
            "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height}


def pose_from_dict(d: dict) -> tuple[CameraPose, Intrinsics]:
    pose = CameraPose(float(d["pitch"]), float(d["yaw"]), float(d["roll"]),
                      tuple(float(x) for x in d["t"]))
    K = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))
    return pose, K
