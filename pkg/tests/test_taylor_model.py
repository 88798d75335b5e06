import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tmreach.interval import IntervalBox
from tmreach.taylor_model import (
    TaylorModel,
    build_linear_tm,
    tm_affine_image,
    tm_compose_affine,
    tm_eval_interval,
    tm_truncate,
)


def random_tm(seed, n=2, nz=3, h=0.1, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: (torch.rand(*s, generator=g) * 2 - 1) * scale  # noqa: E731
    lo = -torch.rand(n, generator=g) * 0.05
    hi = torch.rand(n, generator=g) * 0.05
    return TaylorModel(r(n) * 3, r(n, nz), r(n), r(n, nz), lo, hi, h)


def draws(tm, k, seed):
    """Sample points (z, tau, remainder) and the function values they represent."""
    g = np.random.default_rng(seed)
    z = torch.tensor(g.uniform(-1, 1, (k, tm.nz)))
    z[: min(k, 8)] = torch.tensor(g.choice([-1.0, 1.0], (min(k, 8), tm.nz)))
    tau = torch.tensor(g.uniform(0, tm.h, k))
    w = torch.tensor(g.uniform(0, 1, (k, tm.n)))
    r = tm.lo + w * (tm.hi - tm.lo)
    return z, tau, r


def assert_pointwise(result, z, tau, values, tol=1e-12):
    """values - poly(z, tau) must lie in the result's remainder."""
    res = values - result.sample(z, tau)
    assert torch.all(res >= result.lo - tol), (res - result.lo).min()
    assert torch.all(res <= result.hi + tol), (result.hi - res).min()


seeds = st.integers(0, 10_000)


@settings(max_examples=60, deadline=None)
@given(seeds, seeds)
def test_add_and_scale_are_sound(s1, s2):
    p, q = random_tm(s1), random_tm(s2)
    z, tau, rp = draws(p, 200, s1)
    _, _, rq = draws(q, 200, s2)
    vp = p.sample(z, tau, rp)
    vq = q.sample(z, tau, rq)
    assert_pointwise(p + q, z, tau, vp + vq)
    assert_pointwise(p - q, z, tau, vp - vq)
    assert_pointwise(p.scale(-2.5), z, tau, -2.5 * vp)


@settings(max_examples=60, deadline=None)
@given(seeds, seeds)
def test_product_is_sound(s1, s2):
    p, q = random_tm(s1), random_tm(s2)
    z, tau, rp = draws(p, 300, s1)
    _, _, rq = draws(q, 300, s2 + 1)
    assert_pointwise(p * q, z, tau, p.sample(z, tau, rp) * q.sample(z, tau, rq))


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_intrinsics_are_sound(s):
    p = random_tm(s)
    z, tau, r = draws(p, 300, s)
    v = p.sample(z, tau, r)
    assert_pointwise(p.sin(), z, tau, torch.sin(v))
    assert_pointwise(p.cos(), z, tau, torch.cos(v))
    q = random_tm(s, scale=0.1)  # stays inside (-pi/2, pi/2)
    vq = q.sample(z, tau, r * 0 + q.lo)
    assert_pointwise(q.tan(), z, tau, torch.tan(vq))
    assert_pointwise(q.sec(), z, tau, 1 / torch.cos(vq))
    shifted = p + 3.0
    assert_pointwise(shifted.reciprocal(), z, tau, 1 / (v + 3.0))


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_integral_is_sound(s):
    p = random_tm(s)
    z, tau, r = draws(p, 100, s)
    # integral of p(z, s) + r over s in [0, tau], with r held constant
    c, a, A, B = p.c, p.at, p.Az, p.B
    t = tau.unsqueeze(-1)
    exact = t * c + 0.5 * t * t * a + t * (z @ A.T) + 0.5 * t * t * (z @ B.T) + t * r
    assert_pointwise(p.integrate(), z, tau, exact)


def test_bound_encloses_samples_and_is_tight_for_linear():
    box = IntervalBox.from_pairs([[0, 1], [-2, -1]])
    tm = build_linear_tm(box)
    assert tm.bound() == box
    tm3 = build_linear_tm(box, nz=4)
    assert tm3.Az.shape == (2, 4)
    assert torch.all(tm3.Az[:, 2:] == 0)
    p = random_tm(3)
    b = p.bound()
    z, tau, r = draws(p, 500, 3)
    v = p.sample(z, tau, r)
    assert torch.all(b.lo <= v) and torch.all(v <= b.hi)


def test_bound_matches_hand_computed_values():
    # f = 1 + 2 z1 - z2 + 3 tau + 4 tau z1 + [-.5, .25], h = 0.5
    tm = TaylorModel(torch.tensor([1.0]), torch.tensor([[2.0, -1.0]]), torch.tensor([3.0]),
                     torch.tensor([[4.0, 0.0]]), torch.tensor([-0.5]), torch.tensor([0.25]), 0.5)
    lo, hi = tm.bound_tensors()
    # poly range: z terms |2 + 4 tau| + 1 at tau = .5 gives 5; 3 tau in [0, 1.5]
    assert lo.item() == 1 - 5 - 0.5
    assert hi.item() == 1 + 5 + 1.5 + 0.25
    frozen = tm.at_time(0.5)
    assert frozen.c.item() == 2.5 and frozen.Az.tolist() == [[4.0, -1.0]]
    assert tm_eval_interval(tm).to_pairs() == [[-4.5, 7.75]]


def test_affine_image_and_compose():
    p = random_tm(5, nz=2)
    M = torch.tensor([[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]])
    img = tm_affine_image(p, M, d=[1.0, 0.0, 0.0])
    z, tau, r = draws(p, 300, 5)
    assert_pointwise(img, z, tau, p.sample(z, tau, r) @ M.T + torch.tensor([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        tm_affine_image(p, torch.ones(2, 3))
    # inner linear map z = c' + A' w + [lo', hi'] with w in [-1, 1]^3
    inner = TaylorModel(torch.tensor([0.1, -0.2]), torch.tensor([[0.3, 0.1, 0.0], [0.0, 0.2, 0.4]]),
                        torch.zeros(2), torch.zeros(2, 3), torch.tensor([-0.05, 0.0]),
                        torch.tensor([0.05, 0.1]), 0.0)
    comp = tm_compose_affine(p, inner)
    g = np.random.default_rng(1)
    w = torch.tensor(g.uniform(-1, 1, (300, 3)))
    ri = inner.lo + torch.tensor(g.uniform(0, 1, (300, 2))) * (inner.hi - inner.lo)
    zin = inner.sample(w, torch.zeros(300), ri)
    assert torch.all(zin.abs() <= 1)
    assert_pointwise(comp, w, tau, p.sample(zin, tau, r))


def test_truncate_adds_sound_remainder():
    p = random_tm(9, n=1, nz=2)
    zz = torch.tensor([[[0.5, -0.25], [0.0, -1.0]]])
    out = tm_truncate(p, tau2=torch.tensor([2.0]), zz=zz)
    z, tau, r = draws(p, 400, 9)
    quad = torch.einsum("ki,ij,kj->k", z, zz[0], z).unsqueeze(-1)
    assert_pointwise(out, z, tau, p.sample(z, tau, r) + 2.0 * tau.unsqueeze(-1) ** 2 + quad)


def test_to_linear_covers_all_times():
    p = random_tm(11)
    lin = p.to_linear()
    assert lin.h == 0.0
    z, tau, r = draws(p, 300, 11)
    assert_pointwise(lin, z, torch.zeros_like(tau), p.sample(z, tau, r))


def test_json_roundtrip_and_shape_check():
    p = random_tm(2)
    q = TaylorModel.from_dict(p.to_dict())
    for f in ("c", "Az", "at", "B", "lo", "hi"):
        assert torch.equal(getattr(p, f), getattr(q, f))
    assert q.h == p.h
    p.check_shape()
    bad = TaylorModel(p.c, p.Az[:, :2], p.at, p.B, p.lo, p.hi, p.h)
    with pytest.raises(AssertionError):
        bad.check_shape()


def test_rows_cat_select_batch():
    p, q = random_tm(1), random_tm(2)
    both = TaylorModel.cat([p.rows(0), q.rows(1)])
    assert torch.equal(both.c, torch.stack([p.c[0], q.c[1]]))
    pb = TaylorModel(*(torch.stack([getattr(p, f), getattr(q, f)]) for f in ("c", "Az", "at", "B", "lo", "hi")), h=p.h)
    sel = pb.select(torch.tensor([False, True]), pb.scale(0.0))
    assert torch.all(sel.c[0] == 0) and torch.equal(sel.c[1], q.c)
