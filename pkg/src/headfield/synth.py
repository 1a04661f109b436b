"""Ground-truth head scenes and the on-disk dataset format.

A scene is a unit sphere with radial expression bumps, smoothly united with
an ellipsoidal hair cap. Frames are sphere traced, shaded with the same SH
model the proxy uses, and written as::

    frames/%04d.png   8-bit RGB, premultiplied by the mask
    masks/%04d.png    8-bit, 255 inside the head
    labels/%04d.png   8-bit, 0 background, class + 1 elsewhere
    depth/%04d.png    16-bit camera-space z in millimetres (0 = no hit)
    manifest.json

The manifest holds one record per frame with the camera, 2D landmarks and
their visibility, and the ground-truth expression code when known.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import anatomy
from .errors import ManifestInvalid
from .geometry import (CameraPose, Intrinsics, intersect_sphere, pixel_centers, pixel_directions,
                       pose_from_dict, pose_to_dict)
from .proxy import icosphere, shade

DEFAULT_SH = np.array([
    [2.60, 2.55, 2.50],
    [-0.30, -0.30, -0.30],
    [-0.48, -0.48, -0.46],
    [0.06, 0.06, 0.06],
    [0.04, 0.04, 0.04],
    [-0.05, -0.05, -0.05],
    [0.05, 0.05, 0.05],
    [0.0, 0.0, 0.0],
    [0.04, 0.04, 0.04],
])


@dataclass
class SynthSceneSpec:
    radius: float = 1.0
    cap_center: tuple = (0.0, -0.35, 0.2)
    cap_axes: tuple = (0.9, 0.8, 0.95)
    blend: float = 0.08
    expression_scale: tuple = (0.8, 0.8)
    n_frames: int = 12
    orbit_degrees: tuple = (0.0, 120.0)
    pitch_degrees: float = 6.0
    distance: float = 3.0
    image_size: int = 64
    seed: int = 0
    albedo_factors: tuple = (0.4, -0.5, 0.6, 0.3)
    sh: list = field(default_factory=lambda: DEFAULT_SH.tolist())
    basis_level: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSceneSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("cap_center", "cap_axes", "expression_scale", "orbit_degrees",
                    "albedo_factors"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)

    def expression_code(self, j: int) -> np.ndarray:
        phase = 2.0 * np.pi * j / max(self.n_frames, 1)
        a, b = self.expression_scale
        return np.array([a * np.sin(phase), b * np.sin(phase + np.pi / 2)])

    def pose(self, j: int) -> CameraPose:
        lo, hi = np.radians(self.orbit_degrees)
        frac = j / max(self.n_frames - 1, 1)
        yaw = lo + (hi - lo) * frac
        pitch = np.radians(self.pitch_degrees) * np.sin(2 * np.pi * frac)
        return CameraPose(float(pitch), float(yaw), 0.0, (0.0, 0.0, float(self.distance)))

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.default(self.image_size, self.image_size)


# ---------------------------------------------------------------------------
# analytic geometry

def ellipsoid_sdf(x: np.ndarray, center, axes) -> np.ndarray:
    """Exact signed distance to an axis-aligned ellipsoid.

    Solves for the Lagrange multiplier of the closest-point problem by
    bisection, which converges for points both inside and outside.
    """
    a = np.asarray(axes, dtype=np.float64)
    p = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(center))
    p = np.maximum(p, 1e-12)
    a2 = a * a
    lo = np.full(p.shape[:-1], -a2.min() * (1.0 - 1e-15))
    hi = np.full(p.shape[:-1], a.max() * np.linalg.norm(p, axis=-1) + 1e-12)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        f = np.sum((a * p / (mid[..., None] + a2)) ** 2, -1) - 1.0
        pos = f > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    t = 0.5 * (lo + hi)
    closest = a2 * p / (t[..., None] + a2)
    dist = np.linalg.norm(p - closest, axis=-1)
    inside = np.sum((p / a) ** 2, -1) < 1.0
    return np.where(inside, -dist, dist)


def smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def _window(r):
    s = np.clip((r - 0.3) / 0.3, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _bump_field(x, k):
    r = np.linalg.norm(x, axis=-1)
    d = x / np.maximum(r, 1e-12)[..., None]
    return _window(r) * anatomy.expression_bump(d, k) * anatomy.EXPRESSION_FIELDS[k][2]


@functools.lru_cache(maxsize=None)
def _bump_gradient_bound(k: int) -> float:
    """Numerical sup of the gradient norm of a windowed bump, with 10% margin."""
    rng = np.random.default_rng(1234 + k)
    x = rng.uniform(-2.0, 2.0, size=(200_000, 3))
    h = 1e-5
    grad = np.stack([(_bump_field(x + h * e, k) - _bump_field(x - h * e, k)) / (2 * h)
                     for e in np.eye(3)], -1)
    return 1.1 * float(np.linalg.norm(grad, axis=-1).max())


def head_sdf(x, code, radius):
    """Displaced-sphere part of the scene, divided by its Lipschitz bound."""
    code = np.asarray(code, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    disp = np.zeros(x.shape[:-1])
    lip = 1.0
    for k, c in enumerate(code):
        if c != 0.0:
            disp = disp + c * _bump_field(x, k)
            lip += abs(c) * _bump_gradient_bound(k)
    return (np.linalg.norm(x, axis=-1) - radius - disp) / lip


def scene_sdf(x, code, spec: SynthSceneSpec) -> np.ndarray:
    """Signed distance of the composed scene; metric exactly when ``code`` is zero."""
    head = head_sdf(x, code, spec.radius)
    cap = ellipsoid_sdf(x, spec.cap_center, spec.cap_axes)
    return smooth_min(head, cap, spec.blend)


def scene_normals(x, code, spec: SynthSceneSpec, h: float = 1e-6) -> np.ndarray:
    grad = np.stack([(scene_sdf(x + h * e, code, spec) - scene_sdf(x - h * e, code, spec))
                     / (2 * h) for e in np.eye(3)], -1)
    return grad / np.linalg.norm(grad, axis=-1, keepdims=True)


def sphere_trace(origins, directions, code, spec: SynthSceneSpec, bound: float = 1.6,
                 max_steps: int = 300, tol: float = 1e-7):
    """Ray distances to the first surface hit; returns ``(t, hit)``."""
    near, far, hit = intersect_sphere(origins, directions, np.zeros(3), bound)
    t = near.copy()
    active = hit.copy()
    done = np.zeros_like(hit)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d = scene_sdf(origins[idx] + t[idx, None] * directions[idx], code, spec)
        converged = np.abs(d) < tol
        done[idx[converged]] = True
        t[idx] += np.where(converged, 0.0, d)
        escaped = t[idx] > far[idx]
        active[idx[converged | escaped]] = False
    return t, done


# ---------------------------------------------------------------------------
# rendering and dataset I/O

@functools.lru_cache(maxsize=None)
def landmark_directions(level: int) -> np.ndarray:
    """Landmark anchor directions snapped onto the proxy template vertices."""
    verts, _ = icosphere(level)
    return np.array([verts[int(np.argmax(verts @ d))] for d in anatomy.LANDMARK_DIRECTIONS])


def landmark_anchors(spec: SynthSceneSpec, code) -> np.ndarray:
    dirs = landmark_directions(spec.basis_level)
    return dirs * (spec.radius + anatomy.expression_displacement(dirs, code))[:, None]


@dataclass
class RenderedFrame:
    rgb: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    landmarks: np.ndarray
    landmark_visible: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics
    code: np.ndarray


def render_frame(spec: SynthSceneSpec, j: int) -> RenderedFrame:
    pose, K = spec.pose(j), spec.intrinsics()
    code = spec.expression_code(j)
    pix = pixel_centers(K).reshape(-1, 2)
    dirs = pixel_directions(pix, pose, K)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    t, hit = sphere_trace(origins, dirs, code, spec)
    n_pix = len(pix)
    points = np.zeros((n_pix, 3))
    normals = np.zeros((n_pix, 3))
    rgb = np.zeros((n_pix, 3))
    labels = np.zeros(n_pix, dtype=np.int64)
    depth = np.zeros(n_pix)
    p = origins[hit] + t[hit, None] * dirs[hit]
    n = scene_normals(p, code, spec)
    points[hit], normals[hit] = p, n
    rgb[hit] = shade(anatomy.albedo_at(p, spec.albedo_factors), n, np.asarray(spec.sh))
    labels[hit] = anatomy.region_labels(p) + 1
    depth[hit] = (p @ pose.rotation.T + pose.t)[:, 2]

    anchors = landmark_anchors(spec, code)
    cam = anchors @ pose.rotation.T + pose.t
    uv = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], -1)
    to_anchor = anchors - pose.center
    dist = np.linalg.norm(to_anchor, axis=-1)
    lt, lhit = sphere_trace(np.broadcast_to(pose.center, anchors.shape).copy(),
                            to_anchor / dist[:, None], code, spec)
    facing = np.sum(scene_normals(anchors, code, spec) * -to_anchor, -1) > 0
    in_img = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
    visible = lhit & (np.abs(lt - dist) < 1e-3) & facing & in_img

    shape = (K.height, K.width)
    return RenderedFrame(rgb.reshape(*shape, 3), hit.reshape(shape), labels.reshape(shape),
                         depth.reshape(shape), points.reshape(*shape, 3),
                         normals.reshape(*shape, 3), uv, visible, pose, K, code)


def generate_dataset(spec: SynthSceneSpec, out_dir) -> dict:
    """Render every frame of ``spec`` into ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    for sub in ("frames", "masks", "labels", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for j in range(spec.n_frames):
        fr = render_frame(spec, j)
        name = f"{j:04d}.png"
        rgb8 = np.round(np.clip(fr.rgb, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb8, "RGB").save(out / "frames" / name)
        Image.fromarray(fr.mask.astype(np.uint8) * 255, "L").save(out / "masks" / name)
        Image.fromarray(fr.labels.astype(np.uint8), "L").save(out / "labels" / name)
        depth_mm = np.round(fr.depth * 1000.0).astype(np.uint16)
        Image.fromarray(depth_mm).save(out / "depth" / name)
        records.append({
            "image": f"frames/{name}", "mask": f"masks/{name}", "label": f"labels/{name}",
            "depth": f"depth/{name}", "camera": pose_to_dict(fr.pose, fr.intrinsics),
            "landmarks": fr.landmarks.tolist(),
            "landmark_visible": [bool(v) for v in fr.landmark_visible],
            "gt_expression": fr.code.tolist(),
        })
    manifest = {"version": 1, "n_classes": anatomy.N_CLASSES,
                "class_names": list(anatomy.CLASS_NAMES), "depth_scale": 1000.0,
                "scene": spec.to_dict(), "frames": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class FrameData:
    image: np.ndarray          # (H, W, 3) float in [0, 1]
    mask: np.ndarray           # (H, W) bool
    labels: np.ndarray         # (H, W) int, class index or -1 for background
    depth: np.ndarray | None   # (H, W) camera z in scene units, 0 where empty
    pose: CameraPose
    intrinsics: Intrinsics
    landmarks: np.ndarray
    landmark_visible: np.ndarray
    gt_expression: np.ndarray | None = None


@dataclass
class Dataset:
    frames: list
    n_classes: int
    root: Path
    manifest: dict

    def __len__(self):
        return len(self.frames)

    def proxy_frames(self):
        from .proxy import ProxyFrame
        return [ProxyFrame(f.image, f.mask.astype(np.float64), f.landmarks, f.intrinsics,
                           f.landmark_visible) for f in self.frames]


def _read_png(path: Path, record_no: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise ManifestInvalid(f"frame {record_no}: missing {what} file {path}")
    with Image.open(path) as im:
        return np.array(im)


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ManifestInvalid(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
        records = manifest["frames"]
        n_classes = int(manifest["n_classes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestInvalid(f"unreadable manifest: {exc}") from exc
    scale = float(manifest.get("depth_scale", 1000.0))
    frames, size = [], None
    for i, rec in enumerate(records):
        try:
            pose, K = pose_from_dict(rec["camera"])
            lms = np.asarray(rec["landmarks"], dtype=np.float64).reshape(-1, 2)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestInvalid(f"frame {i}: bad camera or landmarks ({exc})") from exc
        img = _read_png(root / rec["image"], i, "image")
        mask = _read_png(root / rec["mask"], i, "mask") > 127
        label = _read_png(root / rec["label"], i, "label").astype(np.int64) - 1
        depth = None
        if rec.get("depth"):
            depth = _read_png(root / rec["depth"], i, "depth").astype(np.float64) / scale
        if img.ndim != 3 or img.shape[2] < 3:
            raise ManifestInvalid(f"frame {i}: image must be RGB")
        shape = img.shape[:2]
        if size is None:
            size = shape
        if shape != size or mask.shape != shape or label.shape != shape or \
                (depth is not None and depth.shape != shape):
            raise ManifestInvalid(f"frame {i}: inconsistent image sizes")
        if (K.width, K.height) != (shape[1], shape[0]):
            raise ManifestInvalid(f"frame {i}: intrinsics do not match image size")
        if np.any((label >= 0) != mask):
            raise ManifestInvalid(f"frame {i}: labels and mask disagree")
        if label.max() >= n_classes:
            raise ManifestInvalid(f"frame {i}: label outside the {n_classes} classes")
        vis = np.asarray(rec.get("landmark_visible", [True] * len(lms)), dtype=bool)
        if len(vis) != len(lms):
            raise ManifestInvalid(f"frame {i}: landmark visibility length mismatch")
        gt = rec.get("gt_expression")
        image = img[..., :3].astype(np.float64) / 255.0
        image = image * mask[..., None]
        frames.append(FrameData(image, mask, label, depth, pose, K, lms, vis,
                                None if gt is None else np.asarray(gt, dtype=np.float64)))
    if not frames:
        raise ManifestInvalid("manifest lists no frames")
    return Dataset(frames, n_classes, root, manifest)
