"""Iso-surface extraction, OBJ export and the alignment plus Chamfer protocol."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import DegenerateConfiguration, EmptySet
from .geometry import CameraPose, Intrinsics


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ R.T + t, self.faces.copy())


def marching_cubes(grid: np.ndarray, iso: float = 0.0, spacing=1.0, origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Triangulate the ``iso`` level of ``grid[i, j, k]`` sampled at ``origin + spacing * (i, j, k)``.

    Faces are oriented so their normals point toward increasing values.
    Degenerate faces are dropped; a grid without a crossing gives an empty mesh.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError("grid must be at least 2x2x2")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid has non-finite values")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    if not (grid.min() < iso < grid.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=tuple(spacing),
                                                gradient_direction="descent",
                                                allow_degenerate=False)
    mesh = TriangleMesh(verts + np.asarray(origin, dtype=np.float64), faces)
    keep = mesh.face_areas() > 0.0
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every edge shared by exactly two faces."""
    if mesh.is_empty:
        return False
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise EmptySet("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    idx = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.faces[idx]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


# ---------------------------------------------------------------------------
# alignment and distance

@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x) -> np.ndarray:
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(self.scale * other.scale, self.rotation @ other.rotation,
                                   self.scale * self.rotation @ other.translation + self.translation)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def umeyama(src: np.ndarray, dst: np.ndarray, weights=None) -> SimilarityTransform:
    """Least-squares similarity taking corresponding ``src`` points onto ``dst``."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    mu_s, mu_d = w @ src, w @ dst
    xs, xd = src - mu_s, dst - mu_d
    var_s = w @ np.sum(xs * xs, -1)
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    if var_s < 1e-18 or S[1] < 1e-12 * max(S[0], 1e-300):
        raise DegenerateConfiguration("points are coincident or collinear")
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(np.sum(S * D) / var_s)
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def align_7dof(source, target, correspondences: bool = False, max_iters: int = 100,
               tol: float = 1e-8) -> SimilarityTransform:
    """Similarity alignment of ``source`` onto ``target``.

    With ``correspondences`` the rows pair up and the closed form is used.
    Otherwise closest points are re-assigned symmetrically (source to
    target and target to source) until the RMS stops changing.
    """
    source, target = np.asarray(source, float), np.asarray(target, float)
    if len(source) < 3 or len(target) < 3:
        raise DegenerateConfiguration("need at least three points")
    if correspondences:
        return umeyama(source, target)
    tree_t = cKDTree(target)
    T = SimilarityTransform.identity()
    prev = None
    for _ in range(max_iters):
        moved = T.apply(source)
        d_st, i_st = tree_t.query(moved)
        d_ts, i_ts = cKDTree(moved).query(target)
        rms = np.sqrt(0.5 * (np.mean(d_st ** 2) + np.mean(d_ts ** 2)))
        if prev is not None and abs(prev - rms) <= tol * max(prev, 1e-300):
            break
        prev = rms
        src = np.concatenate([source, source[i_ts]])
        dst = np.concatenate([target[i_st], target])
        w = np.concatenate([np.full(len(source), 0.5 / len(source)),
                            np.full(len(target), 0.5 / len(target))])
        T = umeyama(src, dst, w)
    return T


def chamfer(a, b) -> float:
    """``0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|)``."""
    a, b = np.asarray(a, float).reshape(-1, 3), np.asarray(b, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance of an empty set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


# ---------------------------------------------------------------------------
# depth clouds and visibility

def depth_to_points(depth: np.ndarray, mask: np.ndarray, K: Intrinsics, supersample: int = 1) -> np.ndarray:
    """Back-project masked depth pixels to camera-space points.

    With ``supersample > 1`` every quad of four neighbouring foreground pixel
    centres is additionally filled with an ``s x s`` lattice of bilinearly
    interpolated depths, which keeps the cloud's own sampling gap from
    dominating the Chamfer distance.
    """
    valid = mask & (depth > 0)
    rows, cols = np.nonzero(valid)
    u, v, z = cols + 0.5, rows + 0.5, depth[rows, cols]
    if supersample > 1:
        quad = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:] & valid[1:, 1:]
        qr, qc = np.nonzero(quad)
        f = (np.arange(supersample) + 0.5) / supersample
        fy, fx = [a.reshape(-1) for a in np.meshgrid(f, f, indexing="ij")]
        d00, d01 = depth[qr, qc][:, None], depth[qr, qc + 1][:, None]
        d10, d11 = depth[qr + 1, qc][:, None], depth[qr + 1, qc + 1][:, None]
        zq = (d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy)
              + d10 * (1 - fx) * fy + d11 * fx * fy)
        u = np.concatenate([u, (qc[:, None] + 0.5 + fx).reshape(-1)])
        v = np.concatenate([v, (qr[:, None] + 0.5 + fy).reshape(-1)])
        z = np.concatenate([z, zq.reshape(-1)])
    x = (u - K.cx) / K.fx * z
    y = (v - K.cy) / K.fy * z
    return np.stack([x, y, z], -1)


def visible_samples(mesh_cam: TriangleMesh, K: Intrinsics, count: int = 10_000, seed: int = 0,
                    tol: float = 0.05, zbuffer_samples: int = 200_000) -> np.ndarray:
    """``count`` area-weighted samples of the camera-visible part of a camera-space mesh.

    A dense sample set fills a per-pixel z-buffer; candidate samples within
    ``tol`` of it count as visible. Fewer than ``count`` points come back only
    when little of the mesh is visible.
    """
    dense = sample_surface(mesh_cam, zbuffer_samples, seed + 1)

    def pixels(p):
        z = p[:, 2]
        ok = z > 1e-8
        u = np.floor(K.fx * p[:, 0] / np.where(ok, z, 1) + K.cx).astype(np.int64)
        v = np.floor(K.fy * p[:, 1] / np.where(ok, z, 1) + K.cy).astype(np.int64)
        ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        return u, v, ok

    zbuf = np.full((K.height, K.width), np.inf)
    u, v, ok = pixels(dense)
    np.minimum.at(zbuf, (v[ok], u[ok]), dense[ok, 2])
    keep = np.zeros(len(dense), dtype=bool)
    keep[ok] = dense[ok, 2] <= zbuf[v[ok], u[ok]] + tol
    frac = max(keep.mean(), 1e-3)
    pts = sample_surface(mesh_cam, int(np.ceil(1.2 * count / frac)) + 16, seed)
    u, v, ok = pixels(pts)
    keep = np.zeros(len(pts), dtype=bool)
    keep[ok] = pts[ok, 2] <= zbuf[v[ok], u[ok]] + tol
    return pts[keep][:count]


@dataclass
class FrameScore:
    frame: int
    chamfer: float
    chamfer_unaligned: float
    scale: float


def score_frame(mesh_cam: TriangleMesh, depth: np.ndarray, mask: np.ndarray, K: Intrinsics,
                frame: int = 0, count: int = 10_000, seed: int = 0,
                supersample: int = 4) -> FrameScore:
    """Visible mesh samples versus the depth cloud: 7-DoF ICP, then Chamfer."""
    cloud = depth_to_points(depth, mask, K, supersample)
    pts = visible_samples(mesh_cam, K, count, seed)
    if len(pts) == 0 or len(cloud) == 0:
        raise EmptySet(f"frame {frame}: nothing to compare")
    T = align_7dof(pts, cloud)
    return FrameScore(frame, chamfer(T.apply(pts), cloud), chamfer(pts, cloud), T.scale)


def camera_mesh(mesh: TriangleMesh, pose: CameraPose) -> TriangleMesh:
    return mesh.transformed(pose.rotation, pose.t)
