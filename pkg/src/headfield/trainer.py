"""Per-subject optimisation, checkpoints, mesh extraction and reenactment.

Frame ``j`` is modelled in the head frame of its fitted proxy pose: rays are
cast from the camera centre of ``tau_j`` expressed in model coordinates, so
the rigid code ``z_r`` starts at zero and only has to absorb the residual the
proxy fit left behind.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import anatomy
from .deformation import canonicalize
from .errors import ConfigMismatch, CorruptCheckpoint, DimensionMismatch, NonFiniteLoss
from .fields import FieldDims, HeadField, PROFILES
from .geometry import CameraPose, Intrinsics, intersect_sphere, pixel_centers, pixel_directions
from .losses import (LossBreakdown, LossLog, LossWeights, eikonal_gradients, loss_creg,
                     loss_eikonal, loss_mask, loss_proxy_geometry, loss_rgb, loss_semantic,
                     total_loss)
from .mesh import TriangleMesh, marching_cubes
from .proxy import ProxyBasis, ProxyParams, proxy_vertices, sample_proxy_points
from .render import RayBatch, render_samples, sample_hierarchical
from .serialization import read_container, write_container

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HFC1"


@dataclass
class TrainConfig:
    epochs: int = 300
    rays_per_step: int = 128
    n_coarse: int = 64
    n_fine: int = 64
    lr_net: float = 5e-4
    lr_latent: float = 1e-3
    lr_sharpness: float = 2e-2
    lr_floor: float = 0.05
    anneal_epochs: int = 400
    weights: LossWeights = field(default_factory=LossWeights)
    profile: str = "desk"
    z_cc: int | None = None
    z_cg: int | None = None
    seed: int = 0
    inside_fraction: float = 0.75
    proxy_points: int = 256
    eikonal_points: int = 256
    eikonal_sigma: float = 0.05
    bound_scale: float = 1.3
    grid_resolution: int = 64
    init_s: float = 10.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("rays_per_step", "n_coarse", "proxy_points", "eikonal_points",
                     "grid_resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.n_fine < 0:
            raise ValueError("epochs and n_fine must be non-negative")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if not 0.0 < self.inside_fraction <= 1.0:
            raise ValueError("inside_fraction must be in (0, 1]")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 2000, "rays_per_step": 256, "profile": "paper", **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dims(self, z_d: int, n_classes: int) -> FieldDims:
        extra = {k: v for k, v in (("z_cc", self.z_cc), ("z_cg", self.z_cg)) if v is not None}
        return PROFILES[self.profile](z_d=z_d, n_classes=n_classes, **extra)

    def hash(self, dims: FieldDims) -> str:
        blob = json.dumps({"config": self.to_dict(), "dims": dims.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


class LatentRegistry(nn.Module):
    """Per-frame codes: trainable ``z_r`` and ``z_cc``, frozen ``z_d``."""

    def __init__(self, z_d: np.ndarray, z_cc_dim: int, z_r: np.ndarray | None = None):
        super().__init__()
        n = len(z_d)
        self.z_r = nn.Parameter(torch.zeros(n, 6) if z_r is None else torch.as_tensor(z_r).float())
        self.z_cc = nn.Parameter(torch.zeros(n, z_cc_dim))
        self.register_buffer("z_d", torch.as_tensor(np.asarray(z_d)).float())

    def __len__(self):
        return self.z_d.shape[0]


# ---------------------------------------------------------------------------
# scene preparation

@dataclass
class FrameRays:
    origins: torch.Tensor    # (P, 3) model-frame ray origins for every pixel
    dirs: torch.Tensor       # (P, 3)
    near: torch.Tensor       # (P,)
    far: torch.Tensor        # (P,)
    rgb: torch.Tensor        # (P, 3)
    mask: torch.Tensor       # (P,) bool
    labels: torch.Tensor     # (P,) long, -1 background
    inside: torch.Tensor     # indices of foreground pixels
    outside: torch.Tensor    # indices of background pixels whose ray meets the bounds
    proxy_pool: torch.Tensor  # (M, 3) proxy surface samples outside the hair
    center: np.ndarray
    radius: float


@dataclass
class Scene:
    frames: list
    poses: list              # fitted CameraPose per frame
    intrinsics: list
    z_d: np.ndarray
    n_classes: int
    box_min: np.ndarray
    box_max: np.ndarray

    def __len__(self):
        return len(self.frames)


def prepare_scene(dataset, basis: ProxyBasis, params: ProxyParams, config: TrainConfig,
                  pool_size: int = 4096) -> Scene:
    if len(dataset.frames) != params.n_frames:
        raise DimensionMismatch("proxy and dataset frame counts differ")
    frames, poses, Ks = [], [], []
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for j, fr in enumerate(dataset.frames):
        pose, K = params.pose(j), fr.intrinsics
        verts = proxy_vertices(params, basis, j)
        center = 0.5 * (verts.min(0) + verts.max(0))
        radius = config.bound_scale * float(np.linalg.norm(verts - center, axis=-1).max())
        lo, hi = np.minimum(lo, verts.min(0)), np.maximum(hi, verts.max(0))
        pix = pixel_centers(K).reshape(-1, 2)
        dirs = pixel_directions(pix, pose, K)
        origins = np.broadcast_to(pose.center, dirs.shape)
        near, far, hit = intersect_sphere(origins, dirs, center, radius)
        mask = fr.mask.reshape(-1)
        if np.any(mask & ~hit):
            log.warning("frame %d: %d foreground pixels miss the ray bounds", j,
                        int(np.sum(mask & ~hit)))
        inside = np.nonzero(mask & hit)[0]
        outside = np.nonzero(~mask & hit)[0]
        pool, _ = sample_proxy_points(params, basis, j, pool_size, seed=config.seed + j,
                                      exclude_regions=(anatomy.HAIR,))
        f32 = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
        frames.append(FrameRays(
            f32(origins), f32(dirs), f32(np.where(hit, near, 0.0)), f32(np.where(hit, far, 1.0)),
            f32(fr.image.reshape(-1, 3)), torch.as_tensor(mask),
            torch.as_tensor(fr.labels.reshape(-1)), torch.as_tensor(inside),
            torch.as_tensor(outside), f32(pool), center, radius))
        poses.append(pose)
        Ks.append(K)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * config.bound_scale
    return Scene(frames, poses, Ks, params.alpha_exp.copy(), dataset.n_classes,
                 mid - half, mid + half)


# ---------------------------------------------------------------------------
# batches and the objective

@dataclass
class StepBatch:
    rays: RayBatch
    frame_of_ray: torch.Tensor
    t: torch.Tensor
    rgb: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor
    proxy_x: torch.Tensor
    proxy_frame: torch.Tensor
    eik_x: torch.Tensor
    eik_frame: torch.Tensor


def step_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + epoch) % (2 ** 63))


def _randint(high: int, n: int, g: torch.Generator) -> torch.Tensor:
    return torch.randint(high, (n,), generator=g)


def draw_batch(scene: Scene, field_: HeadField, latents: LatentRegistry, config: TrainConfig,
               g: torch.Generator) -> StepBatch:
    """Rays across all frames (frame-uniform, then 3:1 inside/outside pixels),
    proxy samples and eikonal probes, with sample depths fixed up front."""
    n = len(scene)
    R = config.rays_per_step
    n_in = max(1, int(round(R * config.inside_fraction)))
    frame_of = _randint(n, R, g)
    pix = torch.empty(R, dtype=torch.long)
    for r in range(R):
        fr = scene.frames[int(frame_of[r])]
        pool = fr.inside if (r < n_in or len(fr.outside) == 0) else fr.outside
        pix[r] = pool[int(_randint(len(pool), 1, g))]
    gather = lambda name: torch.stack([getattr(scene.frames[int(f)], name)[int(p)]
                                       for f, p in zip(frame_of, pix)])
    rays = RayBatch(gather("origins"), gather("dirs"), gather("near"), gather("far"),
                    latents.z_r[frame_of], latents.z_d[frame_of], latents.z_cc[frame_of])
    with torch.no_grad():
        detached = RayBatch(rays.origins, rays.dirs, rays.near, rays.far,
                            rays.z_r.detach(), rays.z_d, rays.z_cc.detach())
        t = sample_hierarchical(field_, detached, config.n_coarse, config.n_fine, g).t

    proxy_frame = _randint(n, config.proxy_points, g)
    proxy_x = torch.stack([scene.frames[int(f)].proxy_pool[int(_randint(
        len(scene.frames[int(f)].proxy_pool), 1, g))] for f in proxy_frame])

    n_uniform = config.eikonal_points // 2
    eik_frame = _randint(n, config.eikonal_points, g)
    dirs = torch.randn(n_uniform, 3, generator=g)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    radii = torch.rand(n_uniform, generator=g) ** (1.0 / 3.0)
    centers = torch.stack([torch.as_tensor(scene.frames[int(f)].center, dtype=torch.float32)
                           for f in eik_frame[:n_uniform]])
    rad = torch.tensor([scene.frames[int(f)].radius for f in eik_frame[:n_uniform]])
    uniform = centers + (dirs * (radii * rad)[:, None])
    near_pts = torch.stack([scene.frames[int(f)].proxy_pool[int(_randint(
        len(scene.frames[int(f)].proxy_pool), 1, g))] for f in eik_frame[n_uniform:]])
    near_pts = near_pts + config.eikonal_sigma * torch.randn(near_pts.shape, generator=g)
    eik_x = torch.cat([uniform, near_pts])

    return StepBatch(rays, frame_of, t, gather("rgb"), gather("mask"), gather("labels"),
                     proxy_x, proxy_frame, eik_x, eik_frame)


def batch_loss(field_: HeadField, latents: LatentRegistry, batch: StepBatch,
               weights: LossWeights) -> tuple[torch.Tensor, LossBreakdown]:
    """The full objective on a batch whose sample depths are already fixed.

    Pure in (parameters, codes, batch), which is what the gradient checks rely on.
    """
    f = batch.frame_of_ray
    rays = RayBatch(batch.rays.origins, batch.rays.dirs, batch.rays.near, batch.rays.far,
                    latents.z_r[f], latents.z_d[f], latents.z_cc[f])
    out = render_samples(field_, rays, batch.t)
    terms = {
        "rgb": loss_rgb(out.color, batch.rgb, batch.mask),
        "mask": loss_mask(out.opacity, batch.mask),
        "creg": loss_creg(latents.z_r[f], latents.z_cc[f]) / len(f),
    }
    if weights.se > 0:
        terms["se"] = loss_semantic(out.semantics, out.opacity, batch.labels, batch.mask)
    if weights.pg > 0:
        pf = batch.proxy_frame
        pt = canonicalize(field_, batch.proxy_x, latents.z_r[pf], latents.z_d[pf])
        d, _ = field_.sdf_net(pt.x_c, pt.w_h)
        terms["pg"] = loss_proxy_geometry(d)
    if weights.eik > 0:
        ef = batch.eik_frame

        def deform(x):
            p = canonicalize(field_, x, latents.z_r[ef], latents.z_d[ef])
            return p.x_c, p.w_h

        terms["eik"] = loss_eikonal(*eikonal_gradients(field_, deform, batch.eik_x))
    return total_loss(terms, weights)


# ---------------------------------------------------------------------------
# state, optimisation, checkpoints

@dataclass
class TrainState:
    field: HeadField
    latents: LatentRegistry
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    scene: Scene
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def progress(self) -> float:
        if self.config.anneal_epochs <= 0:
            return 1.0
        return min(self.epoch / self.config.anneal_epochs, 1.0)


def _optimizer(field_: HeadField, latents: LatentRegistry, config: TrainConfig):
    # log_s gets its own rate: at the network rate it could only drift by a
    # few tenths over a short run and the surface would stay blurred
    nets = [p for p in field_.parameters() if p is not field_.log_s]
    return torch.optim.Adam([
        {"params": nets, "lr": config.lr_net, "base_lr": config.lr_net},
        {"params": [field_.log_s], "lr": config.lr_sharpness, "base_lr": config.lr_sharpness},
        {"params": [latents.z_r, latents.z_cc], "lr": config.lr_latent,
         "base_lr": config.lr_latent},
    ])


def init_state(scene: Scene, config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    dims = config.dims(scene.z_d.shape[1], scene.n_classes)
    field_ = HeadField(dims, init_s=config.init_s)
    latents = LatentRegistry(scene.z_d, dims.z_cc)
    state = TrainState(field_, latents, _optimizer(field_, latents, config), config, scene)
    field_.progress = state.progress
    return state


def _lr_factor(epoch: int, config: TrainConfig) -> float:
    if config.epochs <= 0:
        return 1.0
    cos = 0.5 * (1.0 + math.cos(math.pi * min(epoch / config.epochs, 1.0)))
    return config.lr_floor + (1.0 - config.lr_floor) * cos


def train_step(state: TrainState, batch: StepBatch | None = None) -> LossBreakdown:
    """One Adam update of all networks, ``log_s``, ``z_r`` and ``z_cc``."""
    cfg = state.config
    state.field.progress = state.progress
    if batch is None:
        batch = draw_batch(state.scene, state.field, state.latents, cfg,
                           step_generator(cfg.seed, state.epoch))
    for group in state.optimizer.param_groups:
        group["lr"] = group["base_lr"] * _lr_factor(state.epoch, cfg)
    state.optimizer.zero_grad(set_to_none=True)
    total, breakdown = batch_loss(state.field, state.latents, batch, cfg.weights)
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"epoch {state.epoch}: non-finite loss {breakdown}")
    total.backward()
    state.optimizer.step()
    state.epoch += 1
    state.field.progress = state.progress
    state.history.append(breakdown)
    return breakdown


def flush_denormals() -> None:
    """Flush subnormal floats to zero; tiny activations otherwise slow the CPU down badly."""
    # numpy computes its float limits lazily and warns if that happens after the switch
    np.finfo(np.float32), np.finfo(np.float64)
    torch.set_flush_denormal(True)


def train(scene: Scene, config: TrainConfig, state: TrainState | None = None,
          log_path=None, stop_at: int | None = None) -> TrainState:
    """Run (or resume) the optimisation up to ``config.epochs`` (or ``stop_at``)."""
    flush_denormals()
    resuming = state is not None
    state = state or init_state(scene, config)
    csv = LossLog(log_path, append=resuming) if log_path else None
    end = config.epochs if stop_at is None else min(stop_at, config.epochs)
    while state.epoch < end:
        epoch = state.epoch
        b = train_step(state)
        if csv:
            csv.append(epoch, b)
        if epoch % 25 == 0:
            log.info("epoch %d total %.5f rgb %.5f mask %.5f eik %.5f pg %.5f se %.5f",
                     epoch, b.total, b.rgb, b.mask, b.eik, b.pg, b.se)
    return state


def _scene_arrays(scene: Scene) -> tuple[dict, dict]:
    meta = {"poses": [p.as_vector().tolist() for p in scene.poses],
            "intrinsics": [[K.fx, K.fy, K.cx, K.cy, K.width, K.height] for K in scene.intrinsics],
            "n_classes": scene.n_classes}
    arrays = {"scene/box_min": scene.box_min, "scene/box_max": scene.box_max}
    return meta, arrays


@dataclass
class Checkpoint:
    """Everything needed to resume training or query the trained subject."""

    config: TrainConfig
    dims: FieldDims
    epoch: int
    params: dict            # network name -> flat float64 vector, plus log_s
    z_r: np.ndarray
    z_d: np.ndarray
    z_cc: np.ndarray
    poses: list
    intrinsics: list
    box_min: np.ndarray
    box_max: np.ndarray
    optimizer: dict | None = None
    layer_shapes: dict | None = None

    @property
    def config_hash(self) -> str:
        return self.config.hash(self.dims)

    def arrays(self) -> dict:
        out = {f"params/{k}": v for k, v in self.params.items()}
        out.update({"latent/z_r": self.z_r, "latent/z_d": self.z_d, "latent/z_cc": self.z_cc,
                    "scene/box_min": self.box_min, "scene/box_max": self.box_max})
        for k, v in (self.optimizer or {}).items():
            out[f"adam/{k}"] = v
        return out

    def build_field(self) -> HeadField:
        f = HeadField(self.dims, init_s=self.config.init_s)
        f.load_flat(self.params)
        f.progress = 1.0 if self.config.anneal_epochs <= 0 else \
            min(self.epoch / self.config.anneal_epochs, 1.0)
        return f

    def latents(self) -> LatentRegistry:
        lat = LatentRegistry(self.z_d, self.dims.z_cc, self.z_r)
        with torch.no_grad():
            lat.z_cc.copy_(torch.as_tensor(self.z_cc))
        return lat


def _adam_arrays(state: TrainState) -> dict:
    out = {}
    params = list(state.field.parameters()) + [state.latents.z_r, state.latents.z_cc]
    opt_state = state.optimizer.state
    for i, p in enumerate(params):
        st = opt_state.get(p)
        if not st:
            continue
        out[f"{i}/step"] = np.array([float(st["step"])])
        out[f"{i}/exp_avg"] = st["exp_avg"].detach().double().numpy().reshape(-1)
        out[f"{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().double().numpy().reshape(-1)
    return out


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    s = state.scene
    return Checkpoint(state.config, state.field.dims, state.epoch, state.field.flat_params(),
                      state.latents.z_r.detach().double().numpy().copy(),
                      state.latents.z_d.double().numpy().copy(),
                      state.latents.z_cc.detach().double().numpy().copy(),
                      list(s.poses), list(s.intrinsics), s.box_min.copy(), s.box_max.copy(),
                      _adam_arrays(state), state.field.layer_shapes())


def state_from_checkpoint(ckpt: Checkpoint, scene: Scene) -> TrainState:
    """Rebuild a resumable training state (networks, codes and Adam moments)."""
    field_ = ckpt.build_field()
    latents = ckpt.latents()
    opt = _optimizer(field_, latents, ckpt.config)
    params = list(field_.parameters()) + [latents.z_r, latents.z_cc]
    for i, p in enumerate(params):
        if f"{i}/step" not in (ckpt.optimizer or {}):
            continue
        opt.state[p] = {
            "step": torch.tensor(float(ckpt.optimizer[f"{i}/step"][0])),
            "exp_avg": torch.as_tensor(ckpt.optimizer[f"{i}/exp_avg"]).to(p.dtype).reshape(p.shape),
            "exp_avg_sq": torch.as_tensor(ckpt.optimizer[f"{i}/exp_avg_sq"]).to(p.dtype).reshape(p.shape),
        }
    state = TrainState(field_, latents, opt, ckpt.config, scene, ckpt.epoch)
    field_.progress = state.progress
    return state


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {"kind": "headfield-checkpoint", "version": 1, "epoch": ckpt.epoch,
            "config": ckpt.config.to_dict(), "dims": ckpt.dims.to_dict(),
            "config_hash": ckpt.config_hash, "layer_shapes": ckpt.layer_shapes,
            "poses": [p.as_vector().tolist() for p in ckpt.poses],
            "intrinsics": [[K.fx, K.fy, K.cx, K.cy, K.width, K.height] for K in ckpt.intrinsics]}
    write_container(path, CHECKPOINT_MAGIC, meta, ckpt.arrays())


def load_checkpoint(path, expect: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; with ``expect`` given, refuse a different configuration."""
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = TrainConfig.from_dict(meta["config"])
        dims = FieldDims(**meta["dims"])
        ckpt = Checkpoint(
            config, dims, int(meta["epoch"]),
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("params/")},
            arrays["latent/z_r"], arrays["latent/z_d"], arrays["latent/z_cc"],
            [CameraPose.from_vector(v) for v in meta["poses"]],
            [Intrinsics(fx, fy, cx, cy, int(w), int(h)) for fx, fy, cx, cy, w, h in meta["intrinsics"]],
            arrays["scene/box_min"], arrays["scene/box_max"],
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam/")},
            meta.get("layer_shapes"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    if ckpt.config_hash != meta.get("config_hash"):
        raise CorruptCheckpoint("stored configuration hash does not match its contents")
    if expect is not None and not force:
        want = expect.hash(expect.dims(dims.z_d, dims.n_classes))
        if want != ckpt.config_hash:
            raise ConfigMismatch("checkpoint was trained with a different configuration")
    return ckpt


# ---------------------------------------------------------------------------
# extraction and reenactment

def _grid_axes(box_min, box_max, resolution):
    return [np.linspace(box_min[i], box_max[i], resolution) for i in range(3)]


@torch.no_grad()
def frame_sdf(field_: HeadField, points: np.ndarray, z_r, z_d, chunk: int = 16384) -> np.ndarray:
    """``f(canonicalize(x))`` at model-frame points of one frame."""
    z_r = torch.as_tensor(np.asarray(z_r), dtype=torch.float32)
    z_d = torch.as_tensor(np.asarray(z_d), dtype=torch.float32)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        x = torch.as_tensor(points[s:s + chunk], dtype=torch.float32)
        pt = canonicalize(field_, x, z_r, z_d)
        d, _ = field_.sdf_net(pt.x_c, pt.w_h)
        out[s:s + chunk] = d.double().numpy()
    return out


def extract_mesh(sdf_fn, box_min, box_max, resolution: int = 64, coarse: int = 4) -> TriangleMesh:
    """Zero level set of ``sdf_fn`` on a ``resolution^3`` grid over the box.

    A grid ``coarse`` times sparser is evaluated first; only fine nodes whose
    coarse cell may contain the surface are evaluated exactly, the rest take
    the coarse sign. Exact wherever the field is 1-Lipschitz.
    """
    axes = _grid_axes(box_min, box_max, resolution)
    spacing = np.array([a[1] - a[0] for a in axes])
    idx = np.arange(0, resolution + coarse - 1, coarse).clip(max=resolution - 1)
    idx = np.unique(idx)
    cg = np.stack(np.meshgrid(*[a[idx] for a in axes], indexing="ij"), -1)
    cvals = sdf_fn(cg.reshape(-1, 3)).reshape(cg.shape[:3])
    # nearest coarse node for every fine node
    pick = np.abs(idx[:, None] - np.arange(resolution)[None]).argmin(0)
    approx = cvals[np.ix_(pick, pick, pick)]
    band = np.abs(approx) <= coarse * np.linalg.norm(spacing) * 1.5
    fine = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    grid = approx.copy()
    if band.any():
        grid[band] = sdf_fn(fine[band])
    return marching_cubes(grid, 0.0, spacing, box_min)


def extract_frame_mesh(ckpt: Checkpoint, j: int, field_: HeadField | None = None,
                       resolution: int | None = None, camera_space: bool = True,
                       z_r=None, z_d=None, pose: CameraPose | None = None) -> TriangleMesh:
    """Mesh of frame ``j`` (camera space of its fitted pose by default)."""
    field_ = field_ or ckpt.build_field()
    z_r = ckpt.z_r[j] if z_r is None else z_r
    z_d = ckpt.z_d[j] if z_d is None else z_d
    res = resolution or ckpt.config.grid_resolution
    mesh = extract_mesh(lambda x: frame_sdf(field_, x, z_r, z_d), ckpt.box_min, ckpt.box_max, res)
    if camera_space and not mesh.is_empty:
        pose = pose or ckpt.poses[j]
        mesh = mesh.transformed(pose.rotation, pose.t)
    return mesh


def reenact(ckpt: Checkpoint, driving: list, resolution: int | None = None) -> list:
    """Meshes for a driving sequence of ``(CameraPose, alpha_exp)`` pairs.

    The rigid code comes from the training frame whose fitted pose is closest
    to the driving pose, so driving with the training sequence itself
    reproduces the per-frame extractions exactly.
    """
    field_ = ckpt.build_field()
    out = []
    trained = np.stack([p.as_vector() for p in ckpt.poses])
    for pose, a_exp in driving:
        a_exp = np.asarray(a_exp, dtype=np.float64)
        if a_exp.shape != (ckpt.z_d.shape[1],):
            raise DimensionMismatch(f"driving expression has {a_exp.shape}, "
                                    f"checkpoint expects ({ckpt.z_d.shape[1]},)")
        nearest = int(np.argmin(np.linalg.norm(trained - pose.as_vector(), axis=1)))
        out.append(extract_frame_mesh(ckpt, nearest, field_, resolution, z_r=ckpt.z_r[nearest],
                                      z_d=a_exp, pose=pose))
    return out
