"""SDF-driven volume rendering along deformed rays.

Densities come from the signed distance through a sigmoid of sharpness
``s``. Training uses the discrete interval opacity

    alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0),

and :func:`opaque_density` keeps the continuous form for reference checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .deformation import canonicalize, warp_direction

DEPTH_EPS = 1e-6


@dataclass
class RenderOutput:
    color: torch.Tensor      # (R, 3)
    opacity: torch.Tensor    # (R,) sum of weights
    semantics: torch.Tensor  # (R, K) weighted class probabilities
    depth: torch.Tensor      # (R,)
    weights: torch.Tensor    # (R, N-1) interval weights
    t: torch.Tensor          # (R, N) sample distances


@dataclass
class RaySamples:
    t: torch.Tensor          # (R, N) increasing
    near: torch.Tensor
    far: torch.Tensor


def opaque_density(f: torch.Tensor, t: torch.Tensor, s) -> torch.Tensor:
    """``sigma = max(-dPhi/dt / Phi, 0)`` with ``dPhi/dt`` by central differences over ``t``.

    ``t`` is either shared ``(N,)`` or one row per ray like ``f``.
    """
    phi = torch.sigmoid(s * f)
    if t.dim() == 1:
        dphi = torch.gradient(phi, spacing=(t,), dim=-1)[0]
    else:
        rows = [torch.gradient(p, spacing=(ti,))[0] for p, ti in
                zip(phi.reshape(-1, phi.shape[-1]), t.reshape(-1, t.shape[-1]))]
        dphi = torch.stack(rows).reshape(phi.shape)
    return torch.clamp(-dphi / phi, min=0.0)


def sdf_to_alpha(f_i: torch.Tensor, f_next: torch.Tensor, s) -> torch.Tensor:
    """Interval opacity; evaluated as ``1 - Phi(f_next)/Phi(f_i)`` in log space."""
    ratio = F.logsigmoid(s * f_next) - F.logsigmoid(s * f_i)
    return torch.clamp(-torch.expm1(ratio), min=0.0)


def transmittance_weights(alphas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``T_i = prod_{j<i} (1 - alpha_j)`` and ``w_i = T_i alpha_i`` along the last axis."""
    ones = torch.ones_like(alphas[..., :1])
    T = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], -1), -1)
    return T, T * alphas


def composite(weights: torch.Tensor, colors: torch.Tensor, t: torch.Tensor,
              probs: torch.Tensor | None = None) -> RenderOutput:
    """Accumulate per-interval colours ``(R, M, 3)``, class probabilities ``(R, M, K)``
    and distances ``(R, M)``."""
    opacity = weights.sum(-1)
    color = (weights[..., None] * colors).sum(-2)
    depth = (weights * t).sum(-1) / opacity.clamp_min(DEPTH_EPS)
    if probs is None:
        sem = weights.new_zeros(weights.shape[:-1] + (0,))
    else:
        sem = (weights[..., None] * probs).sum(-2)
    return RenderOutput(color, opacity, sem, depth, weights, t)


def _interval_mid(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (x[:, :-1] + x[:, 1:])


def stratified(near: torch.Tensor, far: torch.Tensor, n: int, generator: torch.Generator) -> torch.Tensor:
    u = torch.rand(len(near), n, generator=generator, dtype=torch.float64).to(near.dtype)
    frac = (torch.arange(n, dtype=near.dtype) + u) / n
    return near[:, None] + (far - near)[:, None] * frac


def inverse_cdf(bins: torch.Tensor, weights: torch.Tensor, n: int,
                generator: torch.Generator) -> torch.Tensor:
    """Draw ``n`` sorted samples per row from the piecewise-constant pdf on ``bins``.

    ``bins`` is ``(R, M+1)`` and ``weights`` is ``(R, M)``; rows with no mass
    fall back to uniform.
    """
    w = weights + 1e-12
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    cdf[:, -1] = 1.0
    u = torch.rand(len(bins), n, generator=generator, dtype=torch.float64).to(bins.dtype)
    u, _ = torch.sort(u, -1)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, cdf.shape[-1] - 1)
    c0, c1 = cdf.gather(-1, idx - 1), cdf.gather(-1, idx)
    b0, b1 = bins.gather(-1, idx - 1), bins.gather(-1, idx)
    frac = ((u - c0) / (c1 - c0).clamp_min(1e-12)).clamp(0.0, 1.0)
    return b0 + frac * (b1 - b0)


@dataclass
class RayBatch:
    """Rays in frame space plus the latent codes of the frame each ray belongs to."""

    origins: torch.Tensor   # (R, 3)
    dirs: torch.Tensor      # (R, 3) unit
    near: torch.Tensor      # (R,)
    far: torch.Tensor       # (R,)
    z_r: torch.Tensor       # (R, 6)
    z_d: torch.Tensor       # (R, d)
    z_cc: torch.Tensor      # (R, c)

    def __len__(self):
        return len(self.origins)


def _sdf_along(field, batch: RayBatch, t: torch.Tensor):
    x_p = batch.origins[:, None] + t[..., None] * batch.dirs[:, None]
    n = t.shape[1]
    rep = lambda z: z[:, None].expand(-1, n, -1)
    pt = canonicalize(field, x_p, rep(batch.z_r), rep(batch.z_d))
    d, _ = field.sdf_net(pt.x_c, pt.w_h)
    return d


def sample_hierarchical(field, batch: RayBatch, n_coarse: int = 64, n_fine: int = 64,
                        generator: torch.Generator | None = None) -> RaySamples:
    """Stratified coarse samples plus inverse-CDF fine samples, merged and sorted."""
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    t_c = stratified(batch.near, batch.far, n_coarse, generator)
    if n_fine <= 0:
        return RaySamples(t_c, batch.near, batch.far)
    with torch.no_grad():
        d = _sdf_along(field, batch, t_c)
        _, w = transmittance_weights(sdf_to_alpha(d[:, :-1], d[:, 1:], field.s.detach()))
    t_f = inverse_cdf(t_c, w, n_fine, generator)
    t, _ = torch.sort(torch.cat([t_c, t_f], -1), -1)
    return RaySamples(t, batch.near, batch.far)


def render_samples(field, batch: RayBatch, t: torch.Tensor) -> RenderOutput:
    """Evaluate every network at the samples ``t (R, N)`` and composite.

    Interval colours, class probabilities and distances are endpoint averages.
    """
    n = t.shape[1]
    x_p = batch.origins[:, None] + t[..., None] * batch.dirs[:, None]
    rep = lambda z: z[:, None].expand(-1, n, -1)
    z_r, z_d = rep(batch.z_r), rep(batch.z_d)
    pt = canonicalize(field, x_p, z_r, z_d)
    d, feat, grad = field.sdf_gradient(pt.x_c, pt.w_h)
    normal = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    v = batch.dirs[:, None].expand_as(x_p)
    v_c = warp_direction(field, x_p, v, z_r, z_d)
    color = field.radiance_net(pt.x_c, normal, v_c, feat, rep(batch.z_cc))
    probs = torch.softmax(field.semantic_net(pt.x_c, feat), -1)
    alpha = sdf_to_alpha(d[:, :-1], d[:, 1:], field.s)
    _, w = transmittance_weights(alpha)
    return composite(w, _interval_mid(color), _interval_mid(t), _interval_mid(probs))


def render_rays(field, batch: RayBatch, n_coarse: int = 64, n_fine: int = 64,
                generator: torch.Generator | None = None) -> RenderOutput:
    """Full chain: samples, deformation, networks, opacities, compositing."""
    samples = sample_hierarchical(field, batch, n_coarse, n_fine, generator)
    return render_samples(field, batch, samples.t)
