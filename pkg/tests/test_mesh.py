import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from conftest import floats
from headfield.errors import DegenerateConfiguration, EmptySet
from headfield.mesh import (SimilarityTransform, TriangleMesh, align_7dof, camera_mesh, chamfer,
                            depth_to_points, is_watertight, marching_cubes, read_obj,
                            sample_surface, umeyama, visible_samples, write_obj)


def sphere_grid(h, r=1.0, lo=-1.5):
    n = int(round(-2 * lo / h)) + 1
    ax = lo + h * np.arange(n)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.sqrt(x * x + y * y + z * z) - r, ax


# ---------------------------------------------------------------------------
# extraction

def test_sphere_oracle():
    h = 1 / 32
    grid, ax = sphere_grid(h)
    mesh = marching_cubes(grid, spacing=h, origin=(ax[0],) * 3)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=-1) - 1.0)
    assert err.max() <= 2 * h
    assert is_watertight(mesh)
    assert np.all(mesh.face_areas() > 0)
    # outward normals: the face normal points away from the centre
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.mean(np.sum(n * v.mean(1), -1) > 0) > 0.99


def test_all_positive_is_empty():
    mesh = marching_cubes(np.ones((5, 5, 5)))
    assert mesh.is_empty and len(mesh.vertices) == 0


def test_negation_flips_orientation_only():
    grid, ax = sphere_grid(1 / 8)
    a = marching_cubes(grid, spacing=1 / 8)
    b = marching_cubes(-grid, spacing=1 / 8)
    key = lambda m: m.vertices[np.lexsort(m.vertices.T[::-1])]
    assert a.vertices.shape == b.vertices.shape
    assert np.abs(key(a) - key(b)).max() <= 1e-9
    facing = lambda m: np.sum(np.cross(*(m.vertices[m.faces][:, k] - m.vertices[m.faces][:, 0]
                                          for k in (1, 2))) * (m.vertices[m.faces].mean(1) - 1.5), -1)
    assert np.mean(facing(a) > 0) > 0.99 and np.mean(facing(b) < 0) > 0.99


def test_extraction_rejects_bad_grids():
    with pytest.raises(ValueError):
        marching_cubes(np.ones((1, 4, 4)))
    g = np.ones((3, 3, 3))
    g[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        marching_cubes(g)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_positive_boundary_is_watertight(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(9, 9, 9))
    g[0], g[-1], g[:, 0], g[:, -1], g[:, :, 0], g[:, :, -1] = (abs(g[0]) + 0.1, abs(g[-1]) + 0.1,
        abs(g[:, 0]) + 0.1, abs(g[:, -1]) + 0.1, abs(g[:, :, 0]) + 0.1, abs(g[:, :, -1]) + 0.1)
    g[4, 4, 4] = -1.0
    mesh = marching_cubes(g)
    assert is_watertight(mesh)


def test_obj_round_trip(tmp_path):
    grid, ax = sphere_grid(1 / 4)
    mesh = marching_cubes(grid, spacing=0.25, origin=(ax[0],) * 3)
    p = tmp_path / "m.obj"
    write_obj(p, mesh)
    text = p.read_text().splitlines()
    assert text[0].startswith("v ") and any(l.startswith("f ") for l in text)
    assert min(int(x) for l in text if l.startswith("f ") for x in l.split()[1:]) == 1
    back = read_obj(p)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.abs(back.vertices - mesh.vertices).max() <= 1e-8


def test_face_index_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_surface_samples_on_surface():
    grid, ax = sphere_grid(1 / 16)
    mesh = marching_cubes(grid, spacing=1 / 16, origin=(ax[0],) * 3)
    pts = sample_surface(mesh, 5000, seed=1)
    assert np.abs(np.linalg.norm(pts, axis=-1) - 1).max() <= 2 / 16
    # area weighting spreads samples evenly across octants
    counts = np.bincount(((pts > 0) * [1, 2, 4]).sum(-1), minlength=8)
    assert counts.min() > 0.8 * 5000 / 8
    assert np.array_equal(pts, sample_surface(mesh, 5000, seed=1))
    with pytest.raises(EmptySet):
        sample_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


# ---------------------------------------------------------------------------
# alignment

def random_similarity(seed):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=seed).as_matrix()
    return SimilarityTransform(float(rng.uniform(0.5, 2.0)), R, rng.normal(size=3))


def test_umeyama_identity(rng):
    x = rng.normal(size=(50, 3))
    T = align_7dof(x, x, correspondences=True)
    assert abs(T.scale - 1) <= 1e-9
    assert np.abs(T.rotation - np.eye(3)).max() <= 1e-9 and np.abs(T.translation).max() <= 1e-9


def test_umeyama_recovers_known(rng):
    x = rng.normal(size=(40, 3))
    R0 = Rotation.random(random_state=3).as_matrix()
    t0 = np.array([0.3, -1.0, 2.0])
    T = align_7dof(x, 2.0 * x @ R0.T + t0, correspondences=True)
    assert abs(T.scale - 2.0) <= 1e-8
    assert np.abs(T.rotation - R0).max() <= 1e-8 and np.abs(T.translation - t0).max() <= 1e-8
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)


def test_umeyama_reflection_guard(rng):
    x = rng.normal(size=(30, 3))
    T = umeyama(x, x * [1, 1, -1])
    assert np.linalg.det(T.rotation) > 0


def test_degenerate_configurations():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        align_7dof(line, line, correspondences=True)
    with pytest.raises(DegenerateConfiguration):
        align_7dof(np.ones((5, 3)), np.ones((5, 3)), correspondences=True)
    with pytest.raises(DegenerateConfiguration):
        align_7dof(np.zeros((2, 3)), np.zeros((2, 3)))


@pytest.fixture(scope="module")
def blob():
    grid, ax = sphere_grid(1 / 12)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    # an ellipsoid with a bump, so no rotation maps it onto itself
    g = np.sqrt((x / 1.0) ** 2 + (y / 0.7) ** 2 + (z / 0.5) ** 2) - 1.0 \
        - 0.3 * np.exp(-((x - 0.6) ** 2 + (y - 0.4) ** 2 + z ** 2) / 0.05)
    mesh = marching_cubes(g, spacing=1 / 12, origin=(ax[0],) * 3)
    return sample_surface(mesh, 3000, seed=0)


def _sym_rms(a, b):
    from scipy.spatial import cKDTree
    return np.sqrt(0.5 * (np.mean(cKDTree(b).query(a)[0] ** 2) + np.mean(cKDTree(a).query(b)[0] ** 2)))


def test_icp_recovers_small_similarity(blob):
    R0 = Rotation.from_rotvec([0.1, -0.05, 0.08]).as_matrix()
    target = 1.1 * blob @ R0.T + [0.05, -0.02, 0.03]
    T = align_7dof(blob, target)
    assert chamfer(T.apply(blob), target) <= 1e-3
    assert abs(T.scale - 1.1) <= 1e-2


def test_icp_monotone(blob):
    R0 = Rotation.from_rotvec([0.2, 0.1, -0.1]).as_matrix()
    target = 0.9 * blob[::2] @ R0.T + [0.1, 0.0, -0.1]
    rms = [_sym_rms(blob, target)]
    for k in range(1, 12):
        rms.append(_sym_rms(align_7dof(blob, target, max_iters=k).apply(blob), target))
    assert all(b <= a + 1e-12 for a, b in zip(rms, rms[1:]))


def test_alignment_invariant_to_pre_similarity(blob):
    target = 1.2 * blob @ Rotation.from_rotvec([0.3, -0.2, 0.1]).as_matrix().T + 0.2
    P = random_similarity(5)
    direct = align_7dof(blob, target, correspondences=True)
    via = align_7dof(P.apply(blob), target, correspondences=True).compose(P)
    assert np.abs(via.apply(blob) - direct.apply(blob)).max() <= 1e-6
    # with closest-point pairing, for a pre-motion inside the basin of convergence
    near = SimilarityTransform(1.05, Rotation.from_rotvec([0.05, 0.02, -0.03]).as_matrix(),
                               np.array([0.02, -0.01, 0.0]))
    sub = blob[::3]
    icp = align_7dof(near.apply(sub), sub).compose(near)
    assert np.abs(icp.apply(sub) - sub).max() <= 1e-6


# ---------------------------------------------------------------------------
# Chamfer

def test_chamfer_examples(rng):
    a = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    assert chamfer(a, a) == 0.0
    assert chamfer(a, a + [0.01, 0, 0]) == pytest.approx(0.01, abs=1e-12)
    b = rng.normal(size=(40, 3))
    assert chamfer(a, b) == chamfer(b, a)
    with pytest.raises(EmptySet):
        chamfer(a, np.zeros((0, 3)))


@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 30))
def test_chamfer_pseudometric(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(a, b) >= 0 and chamfer(a, b) == chamfer(b, a) and chamfer(a, a) == 0


# ---------------------------------------------------------------------------
# depth clouds and the protocol

def test_depth_back_projection():
    from headfield.geometry import Intrinsics
    K = Intrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)
    depth = np.full((16, 16), 2.0)
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    pts = depth_to_points(depth, mask, K)
    assert len(pts) == 64 and np.allclose(pts[:, 2], 2.0)
    assert np.allclose(pts[0], [(4.5 - 8) / 20 * 2, (4.5 - 8) / 20 * 2, 2.0])
    dense = depth_to_points(depth, mask, K, supersample=3)
    assert len(dense) == 64 + 49 * 9 and np.allclose(dense[:, 2], 2.0)


def test_visible_samples_front_half():
    from headfield.geometry import Intrinsics
    grid, ax = sphere_grid(1 / 16, r=0.5)
    mesh = marching_cubes(grid, spacing=1 / 16, origin=(ax[0],) * 3)
    mesh = mesh.transformed(np.eye(3), np.array([0.0, 0.0, 3.0]))
    K = Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)
    pts = visible_samples(mesh, K, 2000, seed=0)
    assert len(pts) == 2000
    assert np.all(pts[:, 2] <= 3.0 + 0.06)


def test_gt_meshes_self_consistent(small_dataset):
    from headfield.evaluation import evaluate_meshes
    from headfield.synth import SynthSceneSpec, scene_sdf
    from headfield.trainer import extract_mesh
    spec = SynthSceneSpec.from_dict(small_dataset.manifest["scene"])
    lo, hi, res = np.full(3, -1.5), np.full(3, 1.5), 64
    meshes = []
    for j, fr in enumerate(small_dataset.frames):
        code = spec.expression_code(j)
        m = extract_mesh(lambda x: scene_sdf(x, code, spec), lo, hi, res)
        meshes.append(camera_mesh(m, fr.pose))
    report = evaluate_meshes(meshes, small_dataset, count=3000)
    assert len(report.frames) == len(small_dataset.frames)
    assert report.mean <= 2 * 3.0 / (res - 1)
