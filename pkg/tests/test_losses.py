import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import directional_fd_check, floats, perturb_, tiny_config
from headfield.errors import EmptyMask
from headfield.fields import FieldDims, HeadField
from headfield.losses import (LossBreakdown, LossLog, LossWeights, eikonal_gradients,
                              loss_creg, loss_eikonal, loss_mask, loss_proxy_geometry, loss_rgb,
                              loss_semantic, total_loss, weighted_sum)

D = torch.float64
TERMS = ("rgb", "creg", "mask", "eik", "pg", "se")


def test_rgb_examples():
    a = torch.rand(10, 3, dtype=D)
    m = torch.ones(10, dtype=torch.bool)
    assert float(loss_rgb(a, a, m)) == 0.0
    assert float(loss_rgb(a + 0.1, a, m)) == pytest.approx(0.1, abs=1e-12)
    b = torch.rand(10, 3, dtype=D)
    assert float(loss_rgb(a, b, m)) == float(loss_rgb(b, a, m))


def test_rgb_ignores_background_and_rejects_empty():
    a, b = torch.zeros(4, 3, dtype=D), torch.zeros(4, 3, dtype=D)
    b[2:] = 5.0
    m = torch.tensor([True, True, False, False])
    assert float(loss_rgb(a, b, m)) == 0.0
    with pytest.raises(EmptyMask):
        loss_rgb(a, b, torch.zeros(4, dtype=torch.bool))


def test_mask_examples():
    occ = torch.tensor([1, 0, 1, 0, 1], dtype=torch.bool)
    assert float(loss_mask(occ.to(D), occ)) <= 1.1e-5
    assert float(loss_mask(torch.full((5,), 0.5, dtype=D), occ)) == pytest.approx(math.log(2), abs=1e-12)


def test_mask_monotone():
    occ = torch.ones(1, dtype=torch.bool)
    vals = [float(loss_mask(torch.tensor([o], dtype=D), occ)) for o in (0.1, 0.3, 0.6, 0.9, 0.99)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_creg_examples():
    z_r, z_cc = torch.zeros(6, dtype=D), torch.zeros(16, dtype=D)
    assert float(loss_creg(z_r, z_cc)) == 0.0
    z_r[0] = 1
    assert float(loss_creg(z_r, z_cc)) == 1.0
    z = torch.randn(6, dtype=D), torch.randn(16, dtype=D)
    assert float(loss_creg(2 * z[0], 2 * z[1])) == pytest.approx(4 * float(loss_creg(*z)), rel=1e-12)


def analytic(sdf):
    return HeadField(FieldDims(), sdf_override=sdf).double()


def rigid_deform(R, t):
    return lambda x: (x @ R.T + t, torch.zeros(*x.shape[:-1], 2, dtype=x.dtype))


def random_rotation(seed):
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(3, 3, generator=g, dtype=D))
    return q * torch.sign(torch.det(q))


@pytest.mark.parametrize("seed", range(3))
def test_eikonal_exact_sdf_rigid_motion(seed):
    R, t = random_rotation(seed), torch.randn(3, dtype=D) * 0.3
    x = torch.randn(200, 3, dtype=D)
    for sdf in (lambda y: y[..., 2] - 0.2, lambda y: y.norm(dim=-1) - 0.7):
        g_p, g_c = eikonal_gradients(analytic(sdf), rigid_deform(R, t), x, create_graph=False)
        assert float(loss_eikonal(g_p, g_c)) <= 1e-8


def test_eikonal_scaled_plane():
    x = torch.randn(100, 3, dtype=D)
    ident = rigid_deform(torch.eye(3, dtype=D), torch.zeros(3, dtype=D))
    g_p, g_c = eikonal_gradients(analytic(lambda y: 2 * (y[..., 0] - 0.1)), ident, x, create_graph=False)
    # (2 - 1)^2 in both spaces, averaged
    assert float(loss_eikonal(g_p, g_c)) == pytest.approx(1.0, abs=1e-6)
    assert float(((g_c.norm(dim=-1) - 1) ** 2).mean()) == pytest.approx(1.0, abs=1e-6)


def test_eikonal_probe_order_invariant():
    field = perturb_(HeadField(FieldDims()).double(), 0.05)
    ident = lambda x: (x, torch.zeros(*x.shape[:-1], 2, dtype=D))
    x = torch.randn(64, 3, dtype=D)
    perm = torch.randperm(64)
    a = loss_eikonal(*eikonal_gradients(field, ident, x, create_graph=False))
    b = loss_eikonal(*eikonal_gradients(field, ident, x[perm], create_graph=False))
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_proxy_geometry_examples():
    x = torch.randn(50, 3, dtype=D)
    x = 0.8 * x / x.norm(dim=-1, keepdim=True)
    d = x.norm(dim=-1) - 0.8
    assert float(loss_proxy_geometry(d)) <= 1e-6
    assert float(loss_proxy_geometry(d + 0.3)) == pytest.approx(0.3, abs=1e-6)
    assert float(loss_proxy_geometry(torch.randn(30, dtype=D))) >= 0


def test_semantic_examples():
    labels = torch.tensor([0, 3, 2, 1])
    m = torch.ones(4, dtype=torch.bool)
    opacity = torch.full((4,), 0.7, dtype=D)
    onehot = torch.nn.functional.one_hot(labels, 4).to(D) * 0.7
    assert float(loss_semantic(onehot, opacity, labels, m)) == pytest.approx(0.0, abs=1e-12)
    uniform = torch.full((4, 4), 0.7 / 4, dtype=D)
    assert float(loss_semantic(uniform, opacity, labels, m)) == pytest.approx(math.log(4), abs=1e-12)


def test_semantic_relabel_symmetry():
    sem = torch.rand(6, 4, dtype=D)
    op = sem.sum(-1)
    labels = torch.tensor([0, 1, 2, 3, 1, 2])
    m = torch.ones(6, dtype=torch.bool)
    perm = torch.tensor([2, 0, 3, 1])
    inv = torch.argsort(perm)
    a = loss_semantic(sem, op, labels, m)
    b = loss_semantic(sem[:, perm], op, inv[labels], m)
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_semantic_skips_background():
    sem = torch.full((3, 4), 0.25, dtype=D)
    labels = torch.tensor([-1, 0, 0])
    m = torch.tensor([False, True, True])
    assert float(loss_semantic(sem, torch.ones(3, dtype=D), labels, m)) == pytest.approx(math.log(4))
    with pytest.raises(EmptyMask):
        loss_semantic(sem, torch.ones(3, dtype=D), labels, torch.zeros(3, dtype=torch.bool))


def test_total_examples():
    w = LossWeights()
    zero, bd = total_loss({n: torch.tensor(0.0) for n in TERMS}, w)
    assert float(zero) == 0.0 and bd.total == 0.0
    unit, bd = total_loss({n: torch.tensor(1.0, dtype=D) for n in TERMS}, w)
    assert float(unit) == pytest.approx(2.4, abs=1e-12) and bd.total == pytest.approx(2.4, abs=1e-12)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(pg=-0.1)


@given(st.lists(floats(0, 10), min_size=6, max_size=6), st.lists(floats(0, 5), min_size=6, max_size=6),
       st.sampled_from(TERMS))
def test_total_linear_in_weights(vals, ws, name):
    terms = {n: torch.tensor(v, dtype=D) for n, v in zip(TERMS, vals)}
    w = LossWeights(**dict(zip(TERMS, ws)))
    _, a = total_loss(terms, w)
    setattr(w, name, 2 * getattr(w, name))
    _, b = total_loss(terms, w)
    added = ws[TERMS.index(name)] * vals[TERMS.index(name)]
    assert b.total - a.total == pytest.approx(added, abs=1e-9 * max(1.0, abs(b.total)))
    # breakdown total is the weighted sum of its own components
    assert abs(b.total - sum(getattr(w, n) * getattr(b, n) for n in TERMS)) <= 1e-10


def test_loss_log(tmp_path):
    p = tmp_path / "l.csv"
    log = LossLog(p)
    bd = LossBreakdown(1, 2, 3, 4, 5, 6, 7)
    log.append(0, bd)
    LossLog(p, append=True).append(1, bd)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,rgb,mask,creg,eik,pg,se,total"
    assert lines[1:] == ["0,1,2,3,4,5,6,7", "1,1,2,3,4,5,6,7"]


# ---------------------------------------------------------------------------
# the assembled objective on a real batch

@pytest.fixture(scope="module")
def batch_setup(small_scene):
    from headfield.trainer import draw_batch, init_state, step_generator
    cfg = tiny_config(rays_per_step=8, proxy_points=16, eikonal_points=16, n_coarse=8, n_fine=8)
    state = init_state(small_scene, cfg)
    batch = draw_batch(small_scene, state.field, state.latents, cfg, step_generator(0, 0))
    return state, batch


def test_objective_components_nonnegative(batch_setup):
    from headfield.trainer import batch_loss
    state, batch = batch_setup
    total, bd = batch_loss(state.field, state.latents, batch, state.config.weights)
    for n in TERMS:
        v = getattr(bd, n)
        assert math.isfinite(v) and v >= 0
    assert abs(bd.total - weighted_sum({n: getattr(bd, n) for n in TERMS}, state.config.weights)) <= 1e-10
    assert float(total.detach()) == pytest.approx(bd.total, rel=1e-5)
