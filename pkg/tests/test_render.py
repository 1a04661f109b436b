import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import directional_fd_check, floats, perturb_
from headfield.fields import FieldDims, HeadField
from headfield.render import (RayBatch, composite, inverse_cdf, opaque_density, render_rays,
                              render_samples, sample_hierarchical, sdf_to_alpha, stratified,
                              transmittance_weights)

D = torch.float64


def plane(t0):
    # surface z = t0, negative beyond it
    return lambda x: t0 - x[..., 2]


def sphere(r):
    return lambda x: x.norm(dim=-1) - r


def analytic_field(sdf, s=200.0):
    f = HeadField(FieldDims(), sdf_override=sdf).double()
    with torch.no_grad():
        f.log_s.fill_(math.log(s))
    return f


def z_rays(xy, near=0.5, far=3.5):
    xy = torch.as_tensor(xy, dtype=D).reshape(-1, 2)
    n = len(xy)
    o = torch.cat([xy, torch.zeros(n, 1, dtype=D)], -1)
    d = torch.tensor([[0.0, 0.0, 1.0]] * n, dtype=D)
    return RayBatch(o, d, torch.full((n,), near, dtype=D), torch.full((n,), far, dtype=D),
                    torch.zeros(n, 6, dtype=D), torch.zeros(n, 8, dtype=D),
                    torch.zeros(n, 16, dtype=D))


def uniform_t(batch, n):
    u = torch.linspace(0, 1, n, dtype=D)
    return batch.near[:, None] + (batch.far - batch.near)[:, None] * u


def discrete_render(sdf, t, s):
    f = sdf(torch.stack([torch.zeros_like(t), torch.zeros_like(t), t], -1))
    _, w = transmittance_weights(sdf_to_alpha(f[..., :-1], f[..., 1:], s))
    return w, 0.5 * (t[..., 1:] + t[..., :-1])


def continuous_depth(f, t, s):
    sigma = opaque_density(f, t, s)
    dt = torch.diff(t)
    tau = torch.cat([torch.zeros(1, dtype=D), torch.cumsum(0.5 * (sigma[1:] + sigma[:-1]) * dt, 0)])
    T = torch.exp(-tau)
    w = (T * sigma)[:-1] * dt
    return float((w * t[:-1]).sum() / w.sum())


# ---------------------------------------------------------------------------
# density and alpha

def test_density_unit_slope_entry():
    t = torch.linspace(0, 4, 4001, dtype=D)
    s, t0 = 20.0, 2.0
    f = -(t - t0)
    sigma = opaque_density(f, t, s)
    expect = s * (1 - torch.sigmoid(s * f))
    inner = slice(1, -1)
    assert torch.allclose(sigma[inner], expect[inner], rtol=1e-3)
    assert float(sigma[2000]) == pytest.approx(s / 2, rel=1e-4)


def test_density_clamped_when_exiting_or_constant():
    t = torch.linspace(0, 1, 50, dtype=D)
    assert torch.all(opaque_density(t - 0.5, t, 10.0) == 0)
    assert torch.all(opaque_density(torch.full_like(t, 0.3), t, 10.0).abs() <= 1e-12)


def test_density_per_row_t():
    t = torch.stack([torch.linspace(0, 1, 30, dtype=D), torch.linspace(0.5, 2, 30, dtype=D)])
    f = 1.0 - t
    rows = torch.stack([opaque_density(f[i], t[i], 5.0) for i in range(2)])
    assert torch.equal(opaque_density(f, t, 5.0), rows)


def test_alpha_cases():
    a = torch.tensor([0.3, -0.2], dtype=D)
    assert float(sdf_to_alpha(a[:1], a[:1], 50.0)) == 0.0
    assert float(sdf_to_alpha(a[1:], a[:1], 50.0)) == 0.0
    big = sdf_to_alpha(torch.tensor(1.0, dtype=D), torch.tensor(-1.0, dtype=D), 100.0)
    assert float(big) == pytest.approx(1.0, abs=1e-40)


@given(floats(-3, 3), floats(-3, 3), floats(0.1, 500))
def test_alpha_matches_ratio_form(fi, fn, s):
    phi = lambda x: 1 / (1 + math.exp(-s * x)) if s * x > -700 else 0.0
    want = max((phi(fi) - phi(fn)) / phi(fi), 0.0) if phi(fi) > 1e-300 else None
    got = float(sdf_to_alpha(torch.tensor(fi, dtype=D), torch.tensor(fn, dtype=D), s))
    assert 0.0 <= got <= 1.0
    if want is not None and phi(fi) > 1e-200:
        assert got == pytest.approx(want, abs=1e-9)


def test_transmittance_empty_space():
    T, w = transmittance_weights(torch.zeros(3, 10, dtype=D))
    assert torch.all(T == 1) and torch.all(w == 0)


@given(st.lists(floats(0, 1), min_size=2, max_size=40))
def test_transmittance_properties(alphas):
    a = torch.tensor(alphas, dtype=D)
    T, w = transmittance_weights(a)
    assert float(T[0]) == 1.0
    assert torch.all(T[1:] <= T[:-1])
    assert torch.all(w >= 0) and float(w.sum()) <= 1 + 1e-6


def test_transmittance_constant_density():
    sigma, n = 1.3, 512
    t = torch.linspace(0.0, 2.0, n + 1, dtype=D)
    alpha = 1 - torch.exp(-sigma * torch.diff(t))
    T, _ = transmittance_weights(alpha)
    assert torch.allclose(T, torch.exp(-sigma * t[:-1]), atol=1e-3)


# ---------------------------------------------------------------------------
# compositing against analytic surfaces

@pytest.mark.parametrize("kind", ["plane", "sphere"])
def test_analytic_surface_oracle(kind):
    s, n = 200.0, 512
    if kind == "plane":
        sdf, batch = plane(2.0), z_rays([[0.0, 0.0], [0.3, -0.2]])
        t_hit = torch.tensor([2.0, 2.0], dtype=D)
    else:
        sdf = sphere(1.0)
        batch = z_rays([[0.0, 0.0], [0.4, 0.1]], near=-3.0 + 1e-9, far=0.0)
        batch.origins[:, 2] = -3.0
        batch.near[:], batch.far[:] = 0.5, 3.5
        r2 = (batch.origins[:, :2] ** 2).sum(-1)
        t_hit = 3.0 - torch.sqrt(1 - r2)
    t = uniform_t(batch, n)
    field = analytic_field(sdf, s)
    out = render_samples(field, batch, t)
    spacing = float((batch.far - batch.near)[0]) / (n - 1)
    assert torch.all((out.opacity - 1).abs() <= 1e-2)
    assert torch.all((out.depth - t_hit).abs() <= spacing)
    # continuous density gives the same depth
    for i in range(len(batch)):
        x = batch.origins[i] + t[i][:, None] * batch.dirs[i]
        d_cont = continuous_depth(sdf(x), t[i], s)
        assert abs(d_cont - out.depth[i].item()) <= spacing
        assert abs(d_cont - float(t_hit[i])) <= spacing


def test_constant_colour_plane():
    s, n = 200.0, 512
    t = torch.linspace(0.5, 3.5, n, dtype=D)[None]
    w, mid = discrete_render(plane(2.0), t, s)
    c = torch.tensor([0.2, 0.6, 0.9], dtype=D)
    out = composite(w, c.expand(1, n - 1, 3), mid)
    assert torch.allclose(out.color[0], c, atol=1e-2)
    assert abs(float(out.opacity[0]) - 1) <= 1e-2
    assert abs(float(out.depth[0]) - 2.0) <= 3.0 / (n - 1)


def test_miss():
    t = torch.linspace(0.5, 3.5, 256, dtype=D)[None]
    w, mid = discrete_render(lambda x: 5.0 + 0 * x[..., 0], t, 200.0)
    out = composite(w, torch.ones(1, 255, 3, dtype=D), mid)
    assert float(out.opacity[0]) <= 1e-3 and float(out.color.abs().max()) <= 1e-3
    assert torch.isfinite(out.depth).all()


def test_sample_count_convergence():
    colours = lambda n: torch.linspace(0, 1, n - 1, dtype=D)[None, :, None].expand(1, n - 1, 3)
    prev = None
    for n in (256, 512, 1024):
        t = torch.linspace(0.5, 3.5, n, dtype=D)[None]
        w, mid = discrete_render(plane(2.0), t, 200.0)
        # colour varies smoothly with depth, so it probes where the mass sits
        c = composite(w, 0.2 + 0.1 * mid[..., None].expand(1, n - 1, 3), mid).color
        if prev is not None:
            assert float((c - prev).abs().max()) <= 1e-3
        prev = c


def test_sharpness_concentrates_weights():
    t = torch.linspace(0.5, 3.5, 1024, dtype=D)[None]
    spreads = []
    for s in (10.0, 50.0, 200.0):
        w, mid = discrete_render(plane(2.0), t, s)
        w = w / w.sum()
        spreads.append(float(torch.sqrt((w * (mid - 2.0) ** 2).sum())))
    assert spreads[0] >= spreads[1] >= spreads[2]


def test_semantic_composite_nonnegative():
    w = torch.rand(4, 9, dtype=D) * 0.1
    probs = torch.softmax(torch.randn(4, 9, 3, dtype=D), -1)
    out = composite(w, torch.rand(4, 9, 3, dtype=D), torch.rand(4, 9, dtype=D), probs)
    assert torch.all(out.semantics >= 0)
    assert torch.allclose(out.semantics.sum(-1), out.opacity)


# ---------------------------------------------------------------------------
# sampling

def test_stratified_bounds_and_order():
    g = torch.Generator().manual_seed(0)
    near, far = torch.tensor([0.5, 1.0], dtype=D), torch.tensor([2.0, 1.5], dtype=D)
    t = stratified(near, far, 64, g)
    assert torch.all(t >= near[:, None]) and torch.all(t <= far[:, None])
    assert torch.all(torch.diff(t) > 0)


def test_inverse_cdf_uniform_ks():
    from scipy.stats import kstest
    g = torch.Generator().manual_seed(1)
    bins = torch.linspace(0, 1, 65, dtype=D)[None]
    t = inverse_cdf(bins, torch.ones(1, 64, dtype=D), 64, g)
    assert kstest(t[0].numpy(), "uniform").statistic <= 0.15


def test_inverse_cdf_single_interval():
    g = torch.Generator().manual_seed(2)
    bins = torch.linspace(0, 1, 65, dtype=D)[None]
    w = torch.zeros(1, 64, dtype=D)
    w[0, 20] = 1.0
    t = inverse_cdf(bins, w, 64, g)
    assert torch.all((t >= bins[0, 20] - 1e-9) & (t <= bins[0, 21] + 1e-9))


def test_hierarchical_contract():
    field = analytic_field(plane(2.0), 50.0)
    batch = z_rays(torch.rand(5, 2, dtype=D) * 0.2)
    g = lambda: torch.Generator().manual_seed(7)
    s1 = sample_hierarchical(field, batch, 64, 64, g())
    s2 = sample_hierarchical(field, batch, 64, 64, g())
    assert s1.t.shape == (5, 128) and torch.equal(s1.t, s2.t)
    assert torch.all(torch.diff(s1.t) > 0)
    assert torch.all(s1.t >= batch.near[:, None]) and torch.all(s1.t <= batch.far[:, None])
    # fine samples gather around the surface
    assert float(((s1.t - 2.0).abs() < 0.3).double().mean()) > 0.4


# ---------------------------------------------------------------------------
# full chain

def test_plug_in_equivalence():
    s = 200.0
    batch = z_rays([[0.0, 0.0], [0.2, 0.1]])
    t = uniform_t(batch, 256)
    field = analytic_field(plane(2.0), s)
    out = render_samples(field, batch, t)
    w, _ = discrete_render(plane(2.0), t, field.s.detach())
    assert torch.allclose(out.weights, w, rtol=1e-12, atol=1e-300)


def test_render_deterministic():
    torch.manual_seed(0)
    field = HeadField(FieldDims()).double()
    batch = z_rays(torch.rand(4, 2, dtype=D) * 0.3, near=1.0, far=3.0)
    batch.origins[:, 2] = -2.0
    a = render_rays(field, batch, 32, 32, torch.Generator().manual_seed(3))
    b = render_rays(field, batch, 32, 32, torch.Generator().manual_seed(3))
    for name in ("color", "opacity", "semantics", "depth", "weights", "t"):
        assert torch.equal(getattr(a, name), getattr(b, name))


def test_render_gradients():
    torch.manual_seed(0)
    field = perturb_(HeadField(FieldDims()).double(), 0.02, seed=5)
    g = torch.Generator().manual_seed(0)
    n = 3
    batch = z_rays(torch.rand(n, 2, generator=g, dtype=D) * 0.3, near=1.2, far=2.8)
    batch.origins[:, 2] = -2.0
    z_r = (0.05 * torch.randn(n, 6, generator=g, dtype=D)).requires_grad_(True)
    z_cc = (0.3 * torch.randn(n, 16, generator=g, dtype=D)).requires_grad_(True)
    z_d = 0.3 * torch.randn(n, 8, generator=g, dtype=D)
    t = uniform_t(batch, 24)

    def loss():
        b = RayBatch(batch.origins, batch.dirs, batch.near, batch.far, z_r, z_d, z_cc)
        return (render_samples(field, b, t).color ** 2).sum()

    # the warped view direction is piecewise smooth (ReLU offset net), so
    # steps stay small enough not to straddle an activation boundary
    steps = (1e-5, 1e-6, 1e-7)
    for name in ("sdf", "radiance", "offset", "topology"):
        for i, p in enumerate(field.group_parameters(name)):
            directional_fd_check(loss, p, probes=2, steps=steps, seed=i)
    directional_fd_check(loss, field.log_s, probes=2, steps=steps)
    directional_fd_check(loss, z_r, probes=10, steps=steps)
    directional_fd_check(loss, z_cc, probes=10, steps=steps)
