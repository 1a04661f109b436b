"""The five trainable networks and the annealed positional encoding.

All MLPs share one implementation that can push a tangent vector through the
network alongside the primal values, which the deformation uses to warp view
directions without building a full Jacobian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

SOFTPLUS_BETA = 100.0
HIDDEN_SKIP = 4


@dataclass(frozen=True)
class PosEncConfig:
    n_freqs: int
    include_identity: bool = True
    alpha: float | None = None  # None means fully open (alpha = n_freqs)

    def __post_init__(self):
        if self.n_freqs < 0:
            raise ValueError("n_freqs must be non-negative")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def out_dim(self, n: int) -> int:
        return n * (int(self.include_identity) + 2 * self.n_freqs)


def anneal_weights(n_freqs: int, alpha) -> torch.Tensor:
    """Window ``w_k = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2`` for each band."""
    k = torch.arange(n_freqs, dtype=torch.float64)
    a = torch.as_tensor(alpha, dtype=torch.float64)
    return 0.5 * (1.0 - torch.cos(math.pi * (a - k).clamp(0.0, 1.0)))


def pos_encode(x, cfg: PosEncConfig, tangent: torch.Tensor | None = None):
    """Encode ``x (..., n)`` as ``[x, w_k sin(2^k pi x), w_k cos(2^k pi x), ...]``.

    With ``tangent`` given, returns ``(encoded, d encoded)`` for the
    directional derivative along ``tangent``.
    """
    x = torch.as_tensor(x)
    alpha = cfg.n_freqs if cfg.alpha is None else cfg.alpha
    w = anneal_weights(cfg.n_freqs, alpha).to(x.dtype)
    parts = [x] if cfg.include_identity else []
    dparts = [tangent] if cfg.include_identity and tangent is not None else []
    for k in range(cfg.n_freqs):
        freq = (2.0 ** k) * math.pi
        s, c = torch.sin(freq * x), torch.cos(freq * x)
        parts += [w[k] * s, w[k] * c]
        if tangent is not None:
            dparts += [w[k] * freq * c * tangent, -w[k] * freq * s * tangent]
    enc = torch.cat(parts, -1) if parts else x[..., :0]
    if tangent is None:
        return enc
    return enc, torch.cat(dparts, -1)


def anneal_alpha(n_freqs: int, epoch: int, anneal_epochs: int) -> float:
    """Schedule ``alpha = L * epoch / N_anneal`` (fully open once it reaches ``L``)."""
    if anneal_epochs <= 0:
        return float(n_freqs)
    return float(n_freqs) * min(epoch / anneal_epochs, 1.0)


class MLP(nn.Module):
    """Plain MLP with the input re-concatenated before hidden layer ``skip``."""

    def __init__(self, d_in: int, width: int, n_layers: int, d_out: int,
                 skip: int | None = HIDDEN_SKIP, activation: str = "relu"):
        super().__init__()
        self.d_in, self.skip, self.activation = d_in, skip, activation
        layers = []
        for i in range(n_layers):
            fan_in = d_in if i == 0 else width
            if skip is not None and i == skip and i > 0:
                fan_in += d_in
            fan_out = d_out if i == n_layers - 1 else width
            layers.append(nn.Linear(fan_in, fan_out))
        self.layers = nn.ModuleList(layers)
        self.skip_scale = 1.0

    def _act(self, h):
        if self.activation == "softplus":
            return F.softplus(h, beta=SOFTPLUS_BETA)
        return torch.relu(h)

    def _act_grad(self, h):
        if self.activation == "softplus":
            return torch.sigmoid(SOFTPLUS_BETA * h)
        return (h > 0).to(h.dtype)

    def forward(self, x: torch.Tensor, tangent: torch.Tensor | None = None):
        h, dh = x, tangent
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if self.skip is not None and i == self.skip and i > 0:
                h = torch.cat([h, x], -1) * self.skip_scale
                if dh is not None:
                    dh = torch.cat([dh, tangent], -1) * self.skip_scale
            pre = layer(h)
            if dh is not None:
                dh = dh @ layer.weight.T
            if i < last:
                h = self._act(pre)
                if dh is not None:
                    dh = dh * self._act_grad(pre)
            else:
                h = pre
        return h if tangent is None else (h, dh)

    def zero_output(self):
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)


def geometric_init(mlp: MLP, n_identity: int) -> None:
    """Sphere-style initialisation of a softplus MLP.

    Hidden layers follow the usual geometric scheme (only the first
    ``n_identity`` input columns, the raw point, get weight) so the features
    start as smooth radial functions. The first output row, the residual on
    top of the analytic sphere, starts at exactly zero; the feature rows keep
    a small random init.
    """
    n = len(mlp.layers)
    for i, layer in enumerate(mlp.layers):
        out_dim, in_dim = layer.weight.shape
        with torch.no_grad():
            if i == n - 1:
                nn.init.normal_(layer.weight, 0.0, 1.0 / math.sqrt(in_dim))
                nn.init.zeros_(layer.bias)
                layer.weight[0] = 0.0
                continue
            nn.init.constant_(layer.bias, 0.0)
            nn.init.normal_(layer.weight, 0.0, math.sqrt(2.0) / math.sqrt(out_dim))
            if i == 0:
                layer.weight[:, n_identity:] = 0.0
            elif mlp.skip is not None and i == mlp.skip:
                # the re-concatenated input occupies the trailing columns
                layer.weight[:, in_dim - mlp.d_in + n_identity:] = 0.0
    mlp.skip_scale = 1.0 / math.sqrt(2.0)


def sphere_sdf(x: torch.Tensor, radius: float) -> torch.Tensor:
    # tiny epsilon keeps the gradient finite at the origin
    return torch.sqrt((x * x).sum(-1) + 1e-12) - radius


@dataclass(frozen=True)
class FieldDims:
    """Latent sizes and encoding frequencies; widths and depths are fixed."""

    z_d: int = 8
    z_cc: int = 16
    z_cg: int = 64
    n_classes: int = 4
    freq_point: int = 6
    freq_ambient: int = 1
    freq_dir: int = 4
    ambient: int = 2
    radius: float = 1.0

    @classmethod
    def paper(cls, **kw) -> "FieldDims":
        return cls(**{"z_d": 100, "z_cc": 64, "z_cg": 256, **kw})

    @classmethod
    def desk(cls, **kw) -> "FieldDims":
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {"paper": FieldDims.paper, "desk": FieldDims.desk}


@dataclass
class FieldOutput:
    sdf: torch.Tensor
    feature: torch.Tensor
    normal: torch.Tensor
    color: torch.Tensor
    logits: torch.Tensor


class HeadField(nn.Module):
    """Offset, topology, SDF, radiance and semantic networks plus sharpness.

    ``progress`` (epoch / anneal epochs, clamped to [0, 1]) sets the anneal
    parameter of every encoding to ``L * progress``.
    """

    GROUPS = ("offset", "topology", "sdf", "radiance", "semantic")

    def __init__(self, dims: FieldDims = FieldDims(), init_s: float = 10.0, sdf_override=None):
        super().__init__()
        self.dims = dims
        # analytic replacement for the SDF network, used by reference checks
        self.sdf_override = sdf_override
        pe_p = PosEncConfig(dims.freq_point).out_dim(3)
        pe_w = PosEncConfig(dims.freq_ambient).out_dim(dims.ambient)
        pe_v = PosEncConfig(dims.freq_dir).out_dim(3)
        self.offset = MLP(pe_p + dims.z_d, 128, 7, 3)
        self.topology = MLP(pe_p + dims.z_d, 64, 7, dims.ambient)
        self.sdf = MLP(pe_p + pe_w, 512, 8, 1 + dims.z_cg, activation="softplus")
        self.radiance = MLP(pe_p + 3 + pe_v + dims.z_cg + dims.z_cc, 512, 4, 3, skip=None)
        self.semantic = MLP(pe_p + dims.z_cg, 512, 4, dims.n_classes, skip=None)
        self.offset.zero_output()
        self.topology.zero_output()
        geometric_init(self.sdf, 3)
        self.log_s = nn.Parameter(torch.tensor(math.log(init_s)))
        self.progress = 1.0

    # encodings -----------------------------------------------------------
    def _pe(self, x, n_freqs, tangent=None):
        cfg = PosEncConfig(n_freqs, alpha=n_freqs * min(max(self.progress, 0.0), 1.0))
        return pos_encode(x, cfg, tangent)

    # networks --------------------------------------------------------------
    def offset_net(self, x_r, z_d, tangent=None):
        z_d = z_d.expand(*x_r.shape[:-1], -1)
        if tangent is None:
            return self.offset(torch.cat([self._pe(x_r, self.dims.freq_point), z_d], -1))
        enc, denc = self._pe(x_r, self.dims.freq_point, tangent)
        return self.offset(torch.cat([enc, z_d], -1),
                           torch.cat([denc, torch.zeros_like(z_d)], -1))

    def topology_net(self, x_r, z_d):
        z_d = z_d.expand(*x_r.shape[:-1], -1)
        return self.topology(torch.cat([self._pe(x_r, self.dims.freq_point), z_d], -1))

    def sdf_net(self, x_c, w_h):
        """Signed distance ``(...,)`` and geometry feature ``(..., z_cg)``.

        The network predicts a residual over the radius-``r0`` sphere, so a
        fresh field is exactly ``|x| - r0``.
        """
        if self.sdf_override is not None:
            d = self.sdf_override(x_c)
            return d, d.new_zeros(d.shape + (self.dims.z_cg,))
        h = self.sdf(torch.cat([self._pe(x_c, self.dims.freq_point),
                                self._pe(w_h, self.dims.freq_ambient)], -1))
        return sphere_sdf(x_c, self.dims.radius) + h[..., 0], h[..., 1:]

    def radiance_net(self, x_c, n_c, v_c, z_cg, z_cc):
        z_cc = z_cc.expand(*x_c.shape[:-1], -1)
        h = self.radiance(torch.cat([self._pe(x_c, self.dims.freq_point), n_c,
                                     self._pe(v_c, self.dims.freq_dir), z_cg, z_cc], -1))
        return torch.sigmoid(h)

    def semantic_net(self, x_c, z_cg):
        return self.semantic(torch.cat([self._pe(x_c, self.dims.freq_point), z_cg], -1))

    def sdf_gradient(self, x_c, w_h, create_graph=True):
        """``(sdf, feature, grad)`` with the gradient taken w.r.t. ``x_c`` only."""
        with torch.enable_grad():
            x = x_c if x_c.requires_grad else x_c.detach().requires_grad_(True)
            d, feat = self.sdf_net(x, w_h)
            (g,) = torch.autograd.grad(d.sum(), x, create_graph=create_graph)
        return d, feat, g

    def evaluate(self, x_c, w_h, v_c, z_cc) -> FieldOutput:
        d, feat, g = self.sdf_gradient(x_c, w_h)
        n = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        return FieldOutput(d, feat, n, self.radiance_net(x_c, n, v_c, feat, z_cc),
                           self.semantic_net(x_c, feat))

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)

    # flat parameter views -------------------------------------------------
    def group_parameters(self, name: str) -> list:
        return list(getattr(self, name).parameters())

    def flat_params(self) -> dict:
        """Flat float64 vector per network plus ``log_s``."""
        out = {g: torch.cat([p.detach().reshape(-1) for p in self.group_parameters(g)])
               .double().numpy() for g in self.GROUPS}
        out["log_s"] = np.array([float(self.log_s.detach())])
        return out

    def layer_shapes(self) -> dict:
        return {g: [list(p.shape) for p in self.group_parameters(g)] for g in self.GROUPS}

    def load_flat(self, flat: dict) -> None:
        with torch.no_grad():
            for g in self.GROUPS:
                vec = torch.as_tensor(flat[g])
                params = self.group_parameters(g)
                if vec.numel() != sum(p.numel() for p in params):
                    raise ValueError(f"parameter count mismatch for {g}")
                start = 0
                for p in params:
                    p.copy_(vec[start:start + p.numel()].reshape(p.shape).to(p.dtype))
                    start += p.numel()
            self.log_s.copy_(torch.as_tensor(flat["log_s"]).reshape(()).to(self.log_s.dtype))
