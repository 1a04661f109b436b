"""Training objectives and their weighted sum."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields as dc_fields

import torch

from .errors import EmptyMask

MASK_EPS = 1e-5
SEMANTIC_EPS = 1e-6


@dataclass
class LossWeights:
    rgb: float = 1.0
    creg: float = 0.1
    mask: float = 0.1
    eik: float = 0.3
    pg: float = 0.8
    se: float = 0.1

    def __post_init__(self):
        for f in dc_fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossBreakdown:
    rgb: float
    mask: float
    creg: float
    eik: float
    pg: float
    se: float
    total: float

    COLUMNS = ("rgb", "mask", "creg", "eik", "pg", "se", "total")

    def as_row(self, epoch: int) -> list:
        return [epoch] + [getattr(self, c) for c in self.COLUMNS]


def loss_rgb(rendered: torch.Tensor, observed: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked pixels and channels."""
    mask = mask.bool()
    if not bool(mask.any()):
        raise EmptyMask("no foreground pixel in the batch")
    return (rendered[mask] - observed[mask]).abs().mean()


def loss_mask(opacity: torch.Tensor, occupied: torch.Tensor, eps: float = MASK_EPS) -> torch.Tensor:
    """Binary cross-entropy between the accumulated weight and the silhouette."""
    o = opacity.clamp(eps, 1.0 - eps)
    y = occupied.to(o.dtype)
    return -(y * torch.log(o) + (1.0 - y) * torch.log(1.0 - o)).mean()


def loss_creg(z_r: torch.Tensor, z_cc: torch.Tensor) -> torch.Tensor:
    """Squared norms of the rigid and colour codes (summed over any leading frames)."""
    return (z_r ** 2).sum() + (z_cc ** 2).sum()


def eikonal_residual(grad: torch.Tensor) -> torch.Tensor:
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def loss_eikonal(grad_xp: torch.Tensor, grad_xc: torch.Tensor) -> torch.Tensor:
    """``(E(|grad_xp f| - 1)^2 + E(|grad_xc f| - 1)^2) / 2``.

    ``grad_xp`` is taken through the deformation chain at frame-space probes
    and ``grad_xc`` directly at canonical probes; see :func:`eikonal_gradients`.
    The two expectations are averaged, so a field scaled by ``k`` scores
    ``(k - 1)^2`` under an isometric deformation.
    """
    return 0.5 * (eikonal_residual(grad_xp) + eikonal_residual(grad_xc))


def eikonal_gradients(field, deform, x_p: torch.Tensor, create_graph=True):
    """Gradients of ``f`` w.r.t. frame probes ``x_p`` and their canonical images.

    ``deform(x_p)`` returns ``(x_c, w_h)``. Both gradients come from one
    evaluation: through the whole deformation chain for ``x_p``, and the
    partial derivative for ``x_c``.
    """
    with torch.enable_grad():
        x_p = x_p.detach().requires_grad_(True)
        x_c, w_h = deform(x_p)
        if not x_c.requires_grad:
            x_c = x_c.detach().requires_grad_(True)
        d, _ = field.sdf_net(x_c, w_h)
        g_p, g_c = torch.autograd.grad(d.sum(), [x_p, x_c], create_graph=create_graph)
    return g_p, g_c


def loss_proxy_geometry(sdf_values: torch.Tensor) -> torch.Tensor:
    """Mean ``|f|`` at deformed proxy samples."""
    return sdf_values.abs().mean()


def loss_semantic(semantics: torch.Tensor, opacity: torch.Tensor, labels: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the opacity-normalised class distribution over masked pixels."""
    mask = mask.bool() & (labels >= 0)
    if not bool(mask.any()):
        raise EmptyMask("no labelled foreground pixel in the batch")
    probs = semantics[mask] / opacity[mask].clamp_min(SEMANTIC_EPS)[:, None]
    picked = probs.gather(-1, labels[mask].long()[:, None])[:, 0]
    return -torch.log(picked.clamp_min(1e-12)).mean()


TERMS = ("rgb", "creg", "mask", "eik", "pg", "se")


def weighted_sum(values: dict, weights: LossWeights) -> float:
    return math.fsum(getattr(weights, n) * float(values.get(n, 0.0)) for n in TERMS)


def total_loss(terms: dict, weights: LossWeights) -> tuple[torch.Tensor, LossBreakdown]:
    """Differentiable weighted sum of the terms plus a float breakdown.

    Missing terms count as zero. The breakdown total is summed in double
    precision from the reported components.
    """
    total = None
    values = {}
    for name in TERMS:
        v = terms.get(name)
        values[name] = 0.0 if v is None else float(torch.as_tensor(v).detach())
        if v is None or getattr(weights, name) == 0.0:
            continue
        contrib = getattr(weights, name) * v
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros(())
    return total, LossBreakdown(total=weighted_sum(values, weights), **values)


class LossLog:
    """Append-only CSV of per-epoch loss breakdowns."""

    def __init__(self, path, append: bool = False):
        self.path = path
        if append and os.path.exists(path):
            return
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(("epoch",) + LossBreakdown.COLUMNS)

    def append(self, epoch: int, b: LossBreakdown) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(b.as_row(epoch))
