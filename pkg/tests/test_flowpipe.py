import math

import numpy as np
import pytest
import scipy.linalg as sl
import torch

from tmreach.baseline import interval_baseline_ct
from tmreach.flowpipe import (
    FlowpipeParams,
    StepFailure,
    VectorField,
    ct_reach,
    poly_picard,
    remainder_picard,
)
from tmreach.interval import IntervalBox, box_from_center
from tmreach.neural import MLPNet
from tmreach.sim import integrate, sample_box, tube_violations
from tmreach.systems import linear_field
from tmreach.taylor_model import build_linear_tm

decay = VectorField(1, fn=lambda x, u: -x, name="decay")
X_DECAY = IntervalBox.from_pairs([[0.9, 1.1]])


def decay_segment(h, R=3):
    seed = build_linear_tm(X_DECAY)
    seed.h = h
    p = poly_picard(decay, seed, h, 2)
    return remainder_picard(decay, seed, p, h, R=R, eps_init=1e-12)


def test_decay_tube_contains_closed_form_and_is_tight():
    h, N = 0.01, 100
    tube = ct_reach(decay, X_DECAY, FlowpipeParams(h=h, N=N))
    assert not tube.any_diverged
    for i in range(1, N + 1):
        exact_lo = 0.9 * math.exp(-i * h)
        exact_hi = 1.1 * math.exp(-(i - 1) * h)
        assert tube.lo[i, 0] <= exact_lo and exact_hi <= tube.hi[i, 0]
    exact_width = 1.1 * math.exp(-(N - 1) * h) - 0.9 * math.exp(-N * h)
    assert tube.widths()[N, 0] <= 1.05 * exact_width
    assert tube.t_hi[-1].item() == pytest.approx(1.0)
    assert tube.t_lo[1].item() == 0.0


def test_remainder_encloses_exact_truncation_error():
    # poly part is x0 (1 - tau); exact flow x0 exp(-tau); the gap lies in [0, x0 (e^{-h} - 1 + h)]
    for h in (0.2, 0.1, 0.05):
        seg = decay_segment(h)
        assert seg.lo.item() <= 0.0
        assert seg.hi.item() >= 1.1 * (math.exp(-h) - 1 + h)


def test_picard_remainder_shrinks_with_order_two():
    radii = []
    for j in range(6):
        seg = decay_segment(0.1 / 2 ** j)
        radii.append(max(-seg.lo.item(), seg.hi.item()))
    ratios = [a / b for a, b in zip(radii, radii[1:])]
    assert len(ratios) == 5
    assert all(r >= 4.0 for r in ratios), ratios


def test_rotation_tube_contains_exact_images():
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    f = VectorField(2, fn=linear_field(A))
    X0 = IntervalBox.from_pairs([[0.9, 1.1], [-0.1, 0.1]])
    h, N = 0.05, 60
    tube = ct_reach(f, X0, FlowpipeParams(h=h, N=N))
    corners = np.array([[a, b] for a in (0.9, 1.1) for b in (-0.1, 0.1)])
    for i in range(1, N + 1):
        for t in np.linspace((i - 1) * h, i * h, 5):
            pts = corners @ sl.expm(A * t).T
            assert np.all(tube.lo[i].numpy() <= pts + 1e-12) and np.all(pts <= tube.hi[i].numpy() + 1e-12)
    # the per-step remainder is O(h^2), so a finer step gives a tighter final box
    fine = ct_reach(f, X0, FlowpipeParams(h=h / 2, N=2 * N))
    assert fine.widths()[-1].sum() < tube.widths()[-1].sum()


def test_neural_field_tube_contains_trajectories(rng):
    g = torch.Generator().manual_seed(2)
    net = MLPNet.random([3, 16, 2], activation="tanh", generator=g, scale=0.8)
    f = VectorField(2, net=net, m=1)
    X0 = box_from_center([0.2, -0.3], [0.05, 0.05])
    u = torch.tensor([0.3])
    h, N = 0.05, 20
    tube = ct_reach(f, X0, FlowpipeParams(h=h, N=N), u)
    assert not tube.any_diverged
    xs = sample_box(X0, 300, rng, corners=4)
    states = integrate(lambda x, uu: f(x, uu), xs, np.linspace(0, h * N, 4 * N + 1), u.numpy())
    assert tube_violations(tube.lo.numpy(), tube.hi.numpy(), states, 4) == 0


def test_batched_reach_matches_sequential():
    f = VectorField(2, fn=lambda x, u: torch.stack([x[..., 1], -torch.sin(x[..., 0])], -1) if isinstance(x, torch.Tensor)
                    else __import__("tmreach.fieldops", fromlist=["cat"]).cat([x.rows(1), -x.rows(0).sin()]))
    X = box_from_center(torch.tensor([[0.5, 0.0], [1.0, 0.2], [-0.3, 0.1]]), torch.full((3, 2), 0.05))
    P = FlowpipeParams(h=0.05, N=10)
    tb = ct_reach(f, X, P)
    for i in range(3):
        t1 = ct_reach(f, X[i], P)
        assert torch.equal(t1.lo, tb.lo[i]) and torch.equal(t1.hi, tb.hi[i])


def test_blowup_marks_divergence_instead_of_raising():
    f = VectorField(1, fn=lambda x, u: x * x)
    X0 = IntervalBox.from_pairs([[1.0, 1.1]])
    tube = ct_reach(f, X0, FlowpipeParams(h=0.3, N=6, max_enl=5))
    assert tube.any_diverged
    first = int(tube.diverged.int().argmax())
    assert tube.meta["failure"]["step"] == first
    assert torch.isinf(tube.lo[first:]).all() and torch.isinf(tube.hi[first:]).all()
    assert torch.isfinite(tube.lo[:first]).all()


def test_remainder_picard_raises_without_contraction():
    f = VectorField(1, fn=lambda x, u: x * x)
    seed = build_linear_tm(IntervalBox.from_pairs([[1.0, 1.1]]))
    seed.h = 2.0
    p = poly_picard(f, seed, 2.0, 2)
    with pytest.raises(StepFailure) as err:
        remainder_picard(f, seed, p, 2.0, max_enl=3)
    assert err.value.ratio > 1


def test_invalid_inputs_are_rejected():
    with pytest.raises(ValueError):
        FlowpipeParams(h=0.0, N=1)
    with pytest.raises(ValueError):
        FlowpipeParams(h=0.1, N=1, k=3)
    with pytest.raises(ValueError):
        ct_reach(decay, IntervalBox.from_pairs([[0, 1], [0, 1]]), FlowpipeParams(h=0.1, N=1))
    with pytest.raises(ValueError):
        VectorField(2)


def test_interval_baseline_is_sound_and_looser():
    A = np.array([[0.0, 1.0], [-1.0, -0.2]])
    f = VectorField(2, fn=linear_field(A))
    X0 = IntervalBox.from_pairs([[0.9, 1.1], [-0.1, 0.1]])
    P = FlowpipeParams(h=0.05, N=40)
    base = interval_baseline_ct(f, X0, P)
    tm = ct_reach(f, X0, P)
    corners = np.array([[a, b] for a in (0.9, 1.1) for b in (-0.1, 0.1)])
    for i in range(1, P.N + 1):
        pts = corners @ sl.expm(A * i * P.h).T
        assert np.all(base.lo[i].numpy() <= pts + 1e-12) and np.all(pts <= base.hi[i].numpy() + 1e-12)
    assert tm.widths()[-1].sum() < base.widths()[-1].sum()
