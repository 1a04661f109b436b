"""Two-part deformation: a per-frame rigid SE(3) motion and a learned offset.

A frame point ``x_p`` is registered rigidly, ``x_r = R_r x_p + t_r`` with
``(R_r, t_r) = exp(z_r)``, then displaced into the canonical space,
``x_c = x_r + offset(x_r, z_d)``. The topology net lifts ``x_r`` to the
ambient coordinate ``w_h``. Twists are ordered ``(omega, rho)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateJacobian

SERIES_EPS = 1e-6


def _hat(w: torch.Tensor) -> torch.Tensor:
    x, y, z = w.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([o, -z, y, z, o, -x, -y, x, o], -1).reshape(w.shape[:-1] + (3, 3))


def _coefficients(t2: torch.Tensor):
    """``sin t / t``, ``(1 - cos t) / t^2`` and ``(t - sin t) / t^3`` from ``t^2``, with
    small-angle series below ``SERIES_EPS``."""
    small = t2 < SERIES_EPS ** 2
    # the square root's gradient is undefined at zero; that branch is never used there
    t = torch.sqrt(torch.where(small, torch.ones_like(t2), t2))
    a = torch.where(small, 1.0 - t2 / 6.0, torch.sin(t) / t)
    b = torch.where(small, 0.5 - t2 / 24.0, 2.0 * torch.sin(0.5 * t) ** 2 / (t * t))
    c = torch.where(small, 1.0 / 6.0 - t2 / 120.0, (t - torch.sin(t)) / (t * t * t))
    return a, b, c


def se3_exp_torch(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched exponential ``(..., 6) -> (R (..., 3, 3), t (..., 3))``."""
    omega, rho = z[..., :3], z[..., 3:]
    a, b, c = (v[..., None, None] for v in _coefficients((omega * omega).sum(-1)))
    K = _hat(omega)
    K2 = K @ K
    eye = torch.eye(3, dtype=z.dtype).expand(K.shape)
    R = eye + a * K + b * K2
    V = eye + b * K + c * K2
    return R, (V @ rho.unsqueeze(-1)).squeeze(-1)


@dataclass(frozen=True)
class RigidRegistration:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x) -> np.ndarray:
        return np.asarray(x) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidRegistration":
        return RigidRegistration(self.rotation.T, -self.rotation.T @ self.translation)


def se3_exp(z) -> RigidRegistration:
    R, t = se3_exp_torch(torch.as_tensor(np.asarray(z, dtype=np.float64)))
    return RigidRegistration(R.numpy(), t.numpy())


def _rotation_log(R: np.ndarray) -> np.ndarray:
    # via the unit quaternion, which stays well conditioned up to theta = pi
    tr = np.trace(R)
    m = np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]])
    if m == 0:
        w = 0.5 * np.sqrt(1.0 + tr)
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (4 * w)
    else:
        i = m - 1
        j, k = (i + 1) % 3, (i + 2) % 3
        qi = 0.5 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        v = np.empty(3)
        v[i] = qi
        v[j] = (R[j, i] + R[i, j]) / (4 * qi)
        v[k] = (R[k, i] + R[i, k]) / (4 * qi)
        w = (R[k, j] - R[j, k]) / (4 * qi)
    if w < 0:
        w, v = -w, -v
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v  # first order, theta ~ 2|v|
    theta = 2.0 * np.arctan2(s, w)
    return theta * v / s


def se3_log(reg: RigidRegistration) -> np.ndarray:
    """Twist ``(omega, rho)`` with ``se3_exp(se3_log(T)) == T``."""
    R, t = np.asarray(reg.rotation, float), np.asarray(reg.translation, float)
    omega = _rotation_log(R)
    theta = np.linalg.norm(omega)
    K = _hat(torch.as_tensor(omega)).numpy()
    # coefficient (1 - (theta/2) cot(theta/2)) / theta^2 of K^2 in V^-1; the
    # half-angle form avoids the cancellation in 1 - cos(theta)
    if theta < 1e-3:
        coef = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta ** 2
    V_inv = np.eye(3) - 0.5 * K + coef * K @ K
    return np.concatenate([omega, V_inv @ t])


def pose_twist(R_src: np.ndarray, t_src: np.ndarray, R_dst: np.ndarray, t_dst: np.ndarray) -> np.ndarray:
    """Twist taking a point seen through camera ``src`` to the model frame of camera ``dst``.

    Both cameras map model points as ``X = R V + t``. A point ``x`` expressed
    in the model frame of ``src`` sits at ``R_src x + t_src`` in camera space,
    which is the model point ``R_dst^T (R_src x + t_src - t_dst)`` of ``dst``.
    """
    R = R_dst.T @ R_src
    t = R_dst.T @ (t_src - t_dst)
    return se3_log(RigidRegistration(R, t))


@dataclass
class DeformedPoint:
    x_p: torch.Tensor
    x_r: torch.Tensor
    x_c: torch.Tensor
    w_h: torch.Tensor
    v_c: torch.Tensor | None = None


def canonicalize(field, x_p: torch.Tensor, z_r: torch.Tensor, z_d: torch.Tensor) -> DeformedPoint:
    """Map frame points ``(..., 3)`` to the canonical space of ``field``.

    ``z_r`` is a single twist ``(6,)`` or one per point ``(..., 6)``.
    """
    R, t = se3_exp_torch(z_r)
    x_r = (R @ x_p.unsqueeze(-1)).squeeze(-1) + t
    x_c = x_r + field.offset_net(x_r, z_d)
    return DeformedPoint(x_p, x_r, x_c, field.topology_net(x_r, z_d))


def deformation_jvp(field, x_p, v, z_r, z_d):
    """``(x_c, J v)`` where ``J`` is the Jacobian of ``x_c`` w.r.t. ``x_p``."""
    R, t = se3_exp_torch(z_r)
    x_r = (R @ x_p.unsqueeze(-1)).squeeze(-1) + t
    dx_r = (R @ v.unsqueeze(-1)).squeeze(-1).expand_as(x_r)
    off, doff = field.offset_net(x_r, z_d, tangent=dx_r)
    return x_r + off, dx_r + doff


def warp_direction(field, x_p, v, z_r, z_d) -> torch.Tensor:
    """Canonical view direction ``normalize(J v)``."""
    _, jv = deformation_jvp(field, x_p, v, z_r, z_d)
    norm = jv.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-10).any()):
        raise DegenerateJacobian("deformation Jacobian collapses a view direction")
    return jv / norm
