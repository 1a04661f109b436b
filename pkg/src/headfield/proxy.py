"""Linear blendshape head prior, SH shading and inverse-rendering fit.

The proxy is a template mesh with identity, expression and albedo bases.
Per sequence we fit shared identity/albedo coefficients and per-frame
expression, camera pose and spherical-harmonics lighting against the input
frames and their 2D landmarks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import anatomy
from .errors import DimensionMismatch, Diverged, EmptyCoverage
from .geometry import CameraPose, Intrinsics, euler_to_rotation_torch, project_torch
from .serialization import read_container, write_container

log = logging.getLogger(__name__)

SH_COEFFS = 9
WEIGHT_IMAGE, WEIGHT_LAND, WEIGHT_REG = 50.0, 5.0, 0.1


# ---------------------------------------------------------------------------
# mesh helpers

def icosphere(level: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward-facing (counter-clockwise) triangles."""
    p = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
             [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache, new_faces = {}, []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def vertex_normals(verts: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Area-weighted vertex normals (works on numpy-converted torch tensors)."""
    v0, v1, v2 = verts[..., faces[:, 0], :], verts[..., faces[:, 1], :], verts[..., faces[:, 2], :]
    fn = torch.cross(v1 - v0, v2 - v0, dim=-1)
    n = torch.zeros_like(verts)
    for k in range(3):
        n = n.index_add(-2, faces[:, k], fn)
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=-1)


# ---------------------------------------------------------------------------
# basis and parameters

@dataclass
class ProxyBasis:
    """Blendshape head model.

    Basis arrays are stored as ``(n_v, 3, d)``; every column is rescaled to
    unit Frobenius norm on construction. ``regions`` holds the semantic class
    of each vertex, used to keep prior-geometry samples off the hair.
    Skinning is linear blend skinning over root-parented joints; with the
    default single root joint and identity rotations it is the identity map.
    """

    template: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    tex_mean: np.ndarray
    tex_basis: np.ndarray
    landmarks: np.ndarray
    regions: np.ndarray | None = None
    joint_regressor: np.ndarray | None = None
    skin_weights: np.ndarray | None = None

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64)
        n_v = len(self.template)
        if self.faces.min() < 0 or self.faces.max() >= n_v:
            raise ValueError("face index out of range")
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if counts.max() > 2:
            raise ValueError("mesh is not manifold: an edge is shared by more than two faces")
        self.shape_basis = _unit_columns(self.shape_basis, n_v)
        self.expr_basis = _unit_columns(self.expr_basis, n_v)
        self.tex_basis = _unit_columns(self.tex_basis, n_v)
        self.tex_mean = np.asarray(self.tex_mean, dtype=np.float64).reshape(n_v, 3)
        if self.joint_regressor is None:
            self.joint_regressor = np.full((1, n_v), 1.0 / n_v)
        if self.skin_weights is None:
            self.skin_weights = np.ones((n_v, 1))
        if self.regions is not None:
            self.regions = np.asarray(self.regions, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.template)

    @property
    def d_id(self) -> int:
        return self.shape_basis.shape[-1]

    @property
    def d_exp(self) -> int:
        return self.expr_basis.shape[-1]

    @property
    def d_tex(self) -> int:
        return self.tex_basis.shape[-1]

    def arrays(self) -> dict:
        out = {"template": self.template, "faces": self.faces, "shape_basis": self.shape_basis,
               "expr_basis": self.expr_basis, "tex_mean": self.tex_mean,
               "tex_basis": self.tex_basis, "landmarks": self.landmarks,
               "joint_regressor": self.joint_regressor, "skin_weights": self.skin_weights}
        if self.regions is not None:
            out["regions"] = self.regions
        return out


def _unit_columns(basis, n_v):
    b = np.asarray(basis, dtype=np.float64).reshape(n_v, 3, -1)
    norms = np.linalg.norm(b.reshape(-1, b.shape[-1]), axis=0)
    if np.any(norms == 0):
        raise ValueError("basis column with zero norm")
    # leave already-normalised columns untouched so a save/load round trip is exact
    return b / np.where(np.abs(norms - 1.0) <= 1e-12, 1.0, norms)


def _sh_radial_fields(dirs: np.ndarray) -> np.ndarray:
    """Bands 1 and 2 of the real SH, used as smooth identity deformations."""
    return sh_basis(dirs)[:, 1:]


def synthetic_basis(level: int = 4, seed: int = 0) -> ProxyBasis:
    """Sphere-like head proxy with d_id = 8, d_exp = 8, d_tex = 4, 16 landmarks."""
    verts, faces = icosphere(level)
    dirs = verts
    shape_cols = dirs[:, :, None] * _sh_radial_fields(dirs)[:, None, :]
    expr_cols = np.stack([dirs * anatomy.expression_bump(dirs, k)[:, None]
                          for k in range(len(anatomy.EXPRESSION_FIELDS))], -1)
    # albedo PCA over a sampled population of the synthetic colour model
    rng = np.random.default_rng(seed)
    samples = np.stack([anatomy.albedo_at(dirs, f).ravel()
                        for f in rng.standard_normal((256, 4))])
    mean = samples.mean(0)
    _, _, vt = np.linalg.svd(samples - mean, full_matrices=False)
    tex_cols = vt[:4].T.reshape(len(verts), 3, 4)
    landmarks = np.array([int(np.argmax(dirs @ d)) for d in anatomy.LANDMARK_DIRECTIONS])
    return ProxyBasis(verts, faces, shape_cols, expr_cols, mean.reshape(-1, 3), tex_cols,
                      landmarks, regions=anatomy.region_labels(dirs))


@dataclass
class ProxyParams:
    """Fitted proxy parameters for an ``N``-frame sequence.

    ``poses`` rows are ``(pitch, yaw, roll, tx, ty, tz)``; ``sh`` is
    ``(N, 9, 3)``, nine SH coefficients per colour channel.
    """

    alpha_id: np.ndarray
    alpha_tex: np.ndarray
    alpha_exp: np.ndarray
    poses: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.alpha_id = np.asarray(self.alpha_id, dtype=np.float64)
        self.alpha_tex = np.asarray(self.alpha_tex, dtype=np.float64)
        self.alpha_exp = np.atleast_2d(np.asarray(self.alpha_exp, dtype=np.float64))
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=np.float64))
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, SH_COEFFS, 3)
        n = len(self.alpha_exp)
        if len(self.poses) != n or len(self.sh) != n:
            raise DimensionMismatch("per-frame fields must all have the same length")

    @property
    def n_frames(self) -> int:
        return len(self.alpha_exp)

    def pose(self, j: int) -> CameraPose:
        return CameraPose.from_vector(self.poses[j])

    @classmethod
    def zeros(cls, basis: ProxyBasis, n_frames: int, distance: float = 2.5) -> "ProxyParams":
        poses = np.zeros((n_frames, 6))
        poses[:, 5] = distance
        return cls(np.zeros(basis.d_id), np.zeros(basis.d_tex), np.zeros((n_frames, basis.d_exp)),
                   poses, np.zeros((n_frames, SH_COEFFS, 3)))

    def copy(self) -> "ProxyParams":
        return ProxyParams(self.alpha_id.copy(), self.alpha_tex.copy(), self.alpha_exp.copy(),
                           self.poses.copy(), self.sh.copy())


@dataclass(frozen=True)
class ShadingSample:
    albedo: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise ValueError("shading normal must be unit length")


# ---------------------------------------------------------------------------
# forward model

def evaluate_geometry(basis: ProxyBasis, alpha_id, alpha_exp, joint_rotations=None) -> np.ndarray:
    alpha_id = np.asarray(alpha_id, dtype=np.float64)
    alpha_exp = np.asarray(alpha_exp, dtype=np.float64)
    if alpha_id.shape != (basis.d_id,) or alpha_exp.shape != (basis.d_exp,):
        raise DimensionMismatch(
            f"expected coefficients of length {basis.d_id}/{basis.d_exp}, "
            f"got {alpha_id.shape}/{alpha_exp.shape}")
    shaped = basis.template + basis.shape_basis @ alpha_id + basis.expr_basis @ alpha_exp
    if joint_rotations is None:
        return shaped
    return _skin(shaped, basis, np.asarray(joint_rotations, dtype=np.float64))


def _skin(verts, basis, rotations):
    joints = basis.joint_regressor @ verts
    posed = np.einsum("kab,vkb->vka", rotations, verts[:, None, :] - joints[None]) + joints[None]
    return np.einsum("vk,vka->va", basis.skin_weights, posed)


def sh_basis(normals):
    """Real SH basis up to band 2 for unit normals (numpy or torch, ``(..., 3)``)."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    lib = torch if isinstance(normals, torch.Tensor) else np
    c0 = 0.5 / math.sqrt(math.pi)
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    c2 = 0.5 * math.sqrt(15.0 / math.pi)
    c20 = 0.25 * math.sqrt(5.0 / math.pi)
    c22 = 0.25 * math.sqrt(15.0 / math.pi)
    return lib.stack([c0 * lib.ones_like(x), c1 * y, c1 * z, c1 * x,
                      c2 * x * y, c2 * y * z, c20 * (3 * z * z - 1), c2 * x * z,
                      c22 * (x * x - y * y)], -1)


def shade(albedo, normals, sh):
    """``albedo * (sh^T phi(n))`` per channel; ``sh`` is ``(9, 3)``.

    An explicit sum rather than a matrix product, so one vertex shades to the
    same bits alone or inside a batch.
    """
    return albedo * (sh_basis(normals)[..., :, None] * sh).sum(-2)


def shade_vertex(sample: ShadingSample, sh) -> np.ndarray:
    return shade(np.asarray(sample.albedo, dtype=np.float64),
                 np.asarray(sample.normal, dtype=np.float64), np.asarray(sh, dtype=np.float64))


# ---------------------------------------------------------------------------
# energy

@dataclass
class ProxyFrame:
    """Observations of one frame used by the fit."""

    image: np.ndarray
    mask: np.ndarray
    landmarks: np.ndarray
    intrinsics: Intrinsics
    landmark_visible: np.ndarray | None = None

    def __post_init__(self):
        if self.landmark_visible is None:
            self.landmark_visible = np.ones(len(self.landmarks), dtype=bool)


class _Model:
    """Torch view of the basis plus the flat parameter packing used by the fit."""

    def __init__(self, basis: ProxyBasis, n_frames: int):
        self.basis = basis
        self.n = n_frames
        t = lambda a: torch.as_tensor(a, dtype=torch.float64)
        self.template = t(basis.template)
        self.faces = torch.as_tensor(basis.faces)
        self.S = t(basis.shape_basis)
        self.E = t(basis.expr_basis)
        self.A = t(basis.tex_mean)
        self.B = t(basis.tex_basis)
        self.lm = torch.as_tensor(basis.landmarks)
        sizes = [basis.d_id, basis.d_tex, n_frames * basis.d_exp, n_frames * 6,
                 n_frames * SH_COEFFS * 3]
        self.slices, start = [], 0
        for s in sizes:
            self.slices.append(slice(start, start + s))
            start += s
        self.size = start

    def probe_groups(self) -> list:
        """Coordinate sets with no Hessian coupling: shared coefficients one
        by one, per-frame slots batched across frames."""
        groups = [torch.tensor([i]) for i in range(self.slices[2].start)]
        for sl in self.slices[2:]:
            per_frame = (sl.stop - sl.start) // self.n
            block = torch.arange(sl.start, sl.stop).reshape(self.n, per_frame)
            groups.extend(block[:, k] for k in range(per_frame))
        return groups

    def pack(self, p: ProxyParams) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in map(torch.as_tensor, (
            p.alpha_id, p.alpha_tex, p.alpha_exp, p.poses, p.sh))]).to(torch.float64)

    def unpack(self, x: torch.Tensor):
        b, n = self.basis, self.n
        parts = [x[s] for s in self.slices]
        return (parts[0], parts[1], parts[2].reshape(n, b.d_exp), parts[3].reshape(n, 6),
                parts[4].reshape(n, SH_COEFFS, 3))

    def to_params(self, x: torch.Tensor) -> ProxyParams:
        return ProxyParams(*[p.detach().numpy().copy() for p in self.unpack(x)])

    def vertices(self, a_id, a_exp):
        return self.template + self.S @ a_id + torch.einsum("vcd,nd->nvc", self.E, a_exp)


def _bilinear(image: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` (H, W, C) at continuous pixel coordinates (centres at +0.5)."""
    h, w = image.shape[:2]
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = torch.floor(x.detach()).clamp(0, w - 2)
    y0 = torch.floor(y.detach()).clamp(0, h - 2)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    xi, yi = x0.long(), y0.long()
    c00, c01 = image[yi, xi], image[yi, xi + 1]
    c10, c11 = image[yi + 1, xi], image[yi + 1, xi + 1]
    return (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
            + c10 * (1 - fx) * fy + c11 * fx * fy)


def _coverage(uv, depth, normals, verts, center, mask: torch.Tensor) -> torch.Tensor:
    """Vertices that face the camera and whose bilinear footprint is all foreground."""
    h, w = mask.shape
    x, y = uv[:, 0] - 0.5, uv[:, 1] - 0.5
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & (depth > 1e-8)
    facing = ((center - verts) * normals).sum(-1) > 0
    xi = torch.floor(x).clamp(0, w - 2).long()
    yi = torch.floor(y).clamp(0, h - 2).long()
    fg = (mask[yi, xi] * mask[yi, xi + 1] * mask[yi + 1, xi] * mask[yi + 1, xi + 1]) > 0.5
    return inside & facing & fg


class _Observations:
    def __init__(self, frames):
        self.images = [torch.as_tensor(f.image, dtype=torch.float64) for f in frames]
        self.masks = [torch.as_tensor(f.mask, dtype=torch.float64) for f in frames]
        self.lms = [torch.as_tensor(f.landmarks, dtype=torch.float64) for f in frames]
        self.vis = [torch.as_tensor(np.asarray(f.landmark_visible, dtype=bool)) for f in frames]
        self.K = [f.intrinsics for f in frames]


def _energy(model: _Model, obs: _Observations, x: torch.Tensor, frames_idx=None):
    a_id, a_tex, a_exp, poses, sh = model.unpack(x)
    verts = model.vertices(a_id, a_exp)
    normals = vertex_normals(verts, model.faces)
    albedo = model.A + model.B @ a_tex
    rot = euler_to_rotation_torch(poses[:, :3])
    trans = poses[:, 3:]
    e_image = x.new_zeros(())
    e_land = x.new_zeros(())
    for j in (range(model.n) if frames_idx is None else frames_idx):
        uv, depth = project_torch(verts[j], rot[j], trans[j], obs.K[j])
        center = -(rot[j].T @ trans[j])
        with torch.no_grad():
            cov = _coverage(uv, depth, normals[j], verts[j], center, obs.masks[j])
        if not bool(cov.any()):
            raise EmptyCoverage(f"proxy covers no foreground pixel in frame {j}")
        rendered = shade(albedo[cov], normals[j][cov], sh[j])
        observed = _bilinear(obs.images[j], uv[cov])
        e_image = e_image + ((observed - rendered) ** 2).sum() / cov.sum()
        vis = obs.vis[j]
        e_land = e_land + ((obs.lms[j][vis] - uv[model.lm][vis]) ** 2).sum()
    e_reg = (a_id ** 2).sum() + (a_exp ** 2).sum() + (a_tex ** 2).sum()
    total = WEIGHT_IMAGE * e_image + WEIGHT_LAND * e_land + WEIGHT_REG * e_reg
    return total, e_image, e_land, e_reg


def proxy_energy(params: ProxyParams, frames, basis: ProxyBasis):
    """``(E_total, E_image, E_land, E_reg)`` as floats."""
    model = _Model(basis, params.n_frames)
    if len(frames) != params.n_frames:
        raise DimensionMismatch("frame count does not match the parameters")
    with torch.no_grad():
        terms = _energy(model, _Observations(frames), model.pack(params))
    return tuple(float(t) for t in terms)


def proxy_energy_grad(params: ProxyParams, frames, basis: ProxyBasis):
    """Total energy and its gradient, packed like :class:`ProxyParams`."""
    model = _Model(basis, params.n_frames)
    x = model.pack(params).requires_grad_(True)
    total = _energy(model, _Observations(frames), x)[0]
    (g,) = torch.autograd.grad(total, x)
    return float(total.detach()), model.to_params(g)


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitConfig:
    iters: int = 500
    rel_tol: float = 1e-6
    distance: float = 2.5
    rigid_iters: int = 60
    precond_every: int = 25
    armijo: float = 1e-4
    max_backtracks: int = 30


def _descend(fn, x, iters, rel_tol, precond, cfg: FitConfig, precond_every=None):
    """Diagonally preconditioned gradient descent with Armijo backtracking.

    ``fn(x)`` returns a scalar tensor; ``precond(x)`` returns positive
    per-coordinate step scales. Iterations only ever accept decreases.
    """
    x = x.detach().clone()
    scale = precond(x)
    step = 1.0
    f = None
    for it in range(iters):
        if precond_every and it and it % precond_every == 0:
            scale = precond(x)
        xg = x.clone().requires_grad_(True)
        f = fn(xg)
        if not torch.isfinite(f):
            raise Diverged("proxy energy became non-finite")
        (g,) = torch.autograd.grad(f, xg)
        d = -scale * g
        slope = float((g * d).sum())
        if slope >= 0 or not math.isfinite(slope):
            break
        step = min(1.0, step * 2.0)
        accepted = False
        with torch.no_grad():
            for _ in range(cfg.max_backtracks):
                trial = x + step * d
                try:
                    ft = fn(trial)
                except EmptyCoverage:
                    ft = torch.tensor(math.inf)
                if torch.isfinite(ft) and float(ft) <= float(f) + cfg.armijo * step * slope:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            break
        x = trial
        f = f.detach()
        if abs(float(f) - float(ft)) <= rel_tol * max(abs(float(f)), 1e-12):
            break
    return x


def _hessian_diag(fn, x, floor, groups=None, chunk=16):
    """Inverse absolute Hessian diagonal of ``fn`` at ``x``, floored.

    ``groups`` lists index sets whose coordinates never interact (e.g. the
    same parameter slot in different frames); each set is probed with a
    single Hessian-vector product. By default every coordinate is probed on
    its own.
    """
    n = len(x)
    if groups is None:
        groups = [torch.tensor([i]) for i in range(n)]
    xg = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(xg), xg, create_graph=True)
    diag = torch.empty(n, dtype=x.dtype)
    for start in range(0, len(groups), chunk):
        block = groups[start:start + chunk]
        probes = torch.zeros(len(block), n, dtype=x.dtype)
        for row, idx in enumerate(block):
            probes[row, idx] = 1.0
        (hv,) = torch.autograd.grad(g, xg, probes, is_grads_batched=True, retain_graph=True)
        for row, idx in enumerate(block):
            diag[idx] = hv[row, idx]
    return 1.0 / diag.abs().clamp_min(floor)


def _fit_rigid(model: _Model, obs: _Observations, j: int, pose0: torch.Tensor, cfg: FitConfig):
    """Landmark-only rigid pose of frame ``j`` with the template geometry."""
    lm = model.template[model.lm]
    target, vis, K = obs.lms[j], obs.vis[j], obs.K[j]
    if not bool(vis.any()):
        return pose0

    def fn(p):
        uv, _ = project_torch(lm, euler_to_rotation_torch(p[:3]), p[3:], K)
        return WEIGHT_LAND * ((target[vis] - uv[vis]) ** 2).sum()

    return _descend(fn, pose0, cfg.rigid_iters, 1e-10, lambda p: _hessian_diag(fn, p, 1e-3),
                    cfg, precond_every=10)


def fit_proxy(frames, basis: ProxyBasis, config: FitConfig | None = None) -> ProxyParams:
    """Fit the proxy to a frame sequence.

    Initialization: all coefficients and lighting zero, Euler angles zero and
    translation ``(0, 0, distance)``. A rigid landmark pass then warm-starts
    each frame from its predecessor, followed by joint descent on the full
    energy. The returned parameters never have a higher energy than the
    initialization.
    """
    cfg = config or FitConfig()
    if not frames:
        raise ValueError("need at least one frame")
    init = ProxyParams.zeros(basis, len(frames), cfg.distance)
    if cfg.iters <= 0:
        return init
    model = _Model(basis, len(frames))
    obs = _Observations(frames)
    x0 = model.pack(init)
    e0 = float(_energy(model, obs, x0)[0])

    x = x0.clone()
    pose_sl = model.slices[3]
    poses = x[pose_sl].reshape(-1, 6).clone()
    prev = poses[0]
    for j in range(model.n):
        prev = _fit_rigid(model, obs, j, prev, cfg)
        poses[j] = prev
    x[pose_sl] = poses.reshape(-1)
    # first-band ambient light so the photometric term starts from a sane scale
    sh_sl = model.slices[4]
    sh = x[sh_sl].reshape(-1, SH_COEFFS, 3)
    for j, img in enumerate(obs.images):
        fg = obs.masks[j] > 0.5
        if fg.any():
            sh[j, 0] = img[fg].mean(0) / (0.6 * 0.5 / math.sqrt(math.pi))
    x[sh_sl] = sh.reshape(-1)

    fn = lambda v: _energy(model, obs, v)[0]
    groups = model.probe_groups()
    x = _descend(fn, x, cfg.iters, cfg.rel_tol, lambda v: _hessian_diag(fn, v, 1e-2, groups), cfg,
                 precond_every=cfg.precond_every)
    e1 = float(_energy(model, obs, x)[0])
    log.info("proxy fit: energy %.6g -> %.6g", e0, e1)
    if not math.isfinite(e1):
        raise Diverged("proxy energy became non-finite")
    if e1 > e0:
        return init
    return model.to_params(x)


def landmark_errors(params: ProxyParams, frames, basis: ProxyBasis) -> np.ndarray:
    """Per-landmark reprojection errors (pixels) over visible landmarks of all frames."""
    errs = []
    for j, fr in enumerate(frames):
        verts = evaluate_geometry(basis, params.alpha_id, params.alpha_exp[j])
        pose = params.pose(j)
        cam = verts[basis.landmarks] @ pose.rotation.T + pose.t
        uv = np.stack([fr.intrinsics.fx * cam[:, 0] / cam[:, 2] + fr.intrinsics.cx,
                       fr.intrinsics.fy * cam[:, 1] / cam[:, 2] + fr.intrinsics.cy], -1)
        vis = np.asarray(fr.landmark_visible, dtype=bool)
        errs.append(np.linalg.norm(uv[vis] - fr.landmarks[vis], axis=-1))
    return np.concatenate(errs)


def photometric_rmse(params: ProxyParams, frames, basis: ProxyBasis) -> float:
    """Root-mean-square per-channel residual over the covered vertices of all frames."""
    model = _Model(basis, params.n_frames)
    obs = _Observations(frames)
    x = model.pack(params)
    a_id, a_tex, a_exp, poses, sh = model.unpack(x)
    verts = model.vertices(a_id, a_exp)
    normals = vertex_normals(verts, model.faces)
    albedo = model.A + model.B @ a_tex
    rot = euler_to_rotation_torch(poses[:, :3])
    sq, count = 0.0, 0
    for j in range(model.n):
        uv, depth = project_torch(verts[j], rot[j], poses[j, 3:], obs.K[j])
        center = -(rot[j].T @ poses[j, 3:])
        cov = _coverage(uv, depth, normals[j], verts[j], center, obs.masks[j])
        r = _bilinear(obs.images[j], uv[cov]) - shade(albedo[cov], normals[j][cov], sh[j])
        sq += float((r ** 2).sum())
        count += r.numel()
    return math.sqrt(sq / max(count, 1))


# ---------------------------------------------------------------------------
# sampling

def proxy_vertices(params: ProxyParams, basis: ProxyBasis, j: int) -> np.ndarray:
    return evaluate_geometry(basis, params.alpha_id, params.alpha_exp[j])


def sample_proxy_points(params: ProxyParams, basis: ProxyBasis, j: int, count: int,
                        seed: int = 0, mode: str = "area", exclude_regions=()):
    """Samples on the frame-``j`` proxy surface paired with its expression code.

    ``mode="area"`` draws area-weighted uniform samples; ``mode="vertex"``
    with ``count == n_v`` returns the vertices themselves. Faces whose three
    vertices all belong to ``exclude_regions`` are skipped.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    verts = proxy_vertices(params, basis, j)
    z_d = params.alpha_exp[j].copy()
    if mode == "vertex":
        if count != basis.n_vertices:
            raise ValueError("vertex mode needs count == n_v")
        return verts, z_d
    faces = basis.faces
    if exclude_regions and basis.regions is not None:
        excluded = np.isin(basis.regions[faces], list(exclude_regions)).all(axis=1)
        faces = faces[~excluded]
    rng = np.random.default_rng(seed)
    areas = face_areas(verts, faces)
    idx = rng.choice(len(faces), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], -1)
    tri = verts[faces[idx]]
    return np.einsum("nk,nkc->nc", bary, tri), z_d


# ---------------------------------------------------------------------------
# persistence

def save_proxy(path, basis: ProxyBasis, params: ProxyParams, intrinsics: list[Intrinsics]) -> None:
    arrays = {f"basis/{k}": v for k, v in basis.arrays().items()}
    arrays.update({"params/alpha_id": params.alpha_id, "params/alpha_tex": params.alpha_tex,
                   "params/alpha_exp": params.alpha_exp, "params/poses": params.poses,
                   "params/sh": params.sh})
    meta = {"kind": "headfield-proxy", "version": 1,
            "intrinsics": [[K.fx, K.fy, K.cx, K.cy, K.width, K.height] for K in intrinsics]}
    write_container(path, b"HFP1", meta, arrays)


def load_proxy(path):
    """Returns ``(basis, params, intrinsics)``."""
    meta, arrays = read_container(path, b"HFP1")
    b = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("basis/")}
    for key in ("faces", "landmarks", "regions"):
        if key in b:
            b[key] = b[key].astype(np.int64)
    basis = ProxyBasis(**b)
    p = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("params/")}
    params = ProxyParams(**p)
    intrinsics = [Intrinsics(fx, fy, cx, cy, int(w), int(h))
                  for fx, fy, cx, cy, w, h in meta["intrinsics"]]
    return basis, params, intrinsics
