import numpy as np
import pytest
import scipy.linalg as sl
import torch

from tmreach.closed_loop import ClosedLoopSpec, cl_reach
from tmreach.flowpipe import FlowpipeParams, VectorField
from tmreach.interval import IntervalBox, box_from_center
from tmreach.neural import MLPNet
from tmreach.sim import closed_loop_sim, sample_box, tube_violations
from tmreach.systems import linear_field

A = np.array([[0.0, 1.0], [0.0, 0.0]])
B = np.array([[0.0], [1.0]])
KFB = np.array([[-2.0, -3.0]])
X0 = IntervalBox.from_pairs([[0.9, 1.1], [-0.1, 0.1]])


def linear_spec(K=5, N_ctl=8, h=0.02, controller=None):
    dyn = VectorField(2, fn=linear_field(A, B), m=1)
    ctl = controller or MLPNet([(torch.tensor(KFB), torch.zeros(1), "identity")])
    return ClosedLoopSpec(dyn, ctl, K=K, N_ctl=N_ctl, params=FlowpipeParams(h=h, N=0))


def zoh_map(delta):
    """Exact sampled-data map x_{k+1} = Phi x_k for u = K x_k held over delta."""
    big = np.zeros((3, 3))
    big[:2, :2] = A
    big[:2, 2:] = B
    E = sl.expm(big * delta)
    return E[:2, :2] + E[:2, 2:] @ KFB


def test_linear_feedback_tube_contains_exact_zoh_images():
    spec = linear_spec()
    tube = cl_reach(spec, X0)
    assert not tube.any_diverged
    assert tube.n == 3  # state plus control block
    Phi = zoh_map(spec.delta)
    corners = np.array([[a, b] for a in (0.9, 1.1) for b in (-0.1, 0.1)])
    pts = corners
    for i in range(spec.N_ctl):
        # control box of interval i contains K x_i over the current set
        k = 1 + i * spec.K
        u = pts @ KFB.T
        assert np.all(tube.lo[k, 2:].numpy() <= u + 1e-12) and np.all(u <= tube.hi[k, 2:].numpy() + 1e-12)
        pts = pts @ Phi.T
        end = (i + 1) * spec.K
        assert np.all(tube.lo[end, :2].numpy() <= pts + 1e-12)
        assert np.all(pts <= tube.hi[end, :2].numpy() + 1e-12)


def test_linear_feedback_tube_is_near_exact_hull():
    spec = linear_spec()
    tube = cl_reach(spec, X0)
    Phi = np.linalg.matrix_power(zoh_map(spec.delta), spec.N_ctl)
    corners = np.array([[a, b] for a in (0.9, 1.1) for b in (-0.1, 0.1)]) @ Phi.T
    exact = corners.max(0) - corners.min(0)
    # the last box spans one atomic step, so allow for motion within it
    assert np.all(tube.widths()[-1, :2].numpy() <= 1.5 * exact + 0.05)


def test_intervalized_controller_is_never_tighter():
    g = torch.Generator().manual_seed(1)
    ctl = MLPNet.random([2, 16, 1], generator=g)
    spec = linear_spec(controller=ctl)
    tight = cl_reach(spec, X0)
    loose = cl_reach(spec, X0, intervalize=True)
    assert tight.widths()[-1].sum() < loose.widths()[-1].sum()
    assert loose.meta["intervalize"] and not tight.meta["intervalize"]


def test_nonlinear_closed_loop_contains_simulations(rng):
    def pend(x, u):
        if isinstance(x, np.ndarray):
            return np.stack([x[..., 1], -np.sin(x[..., 0]) + np.asarray(u)[..., 0]], -1)
        from tmreach import fieldops as F
        return F.cat([F.rows(x, slice(1, 2)), F.add(-F.sin(F.rows(x, slice(0, 1))), u)])

    g = torch.Generator().manual_seed(3)
    ctl = MLPNet.random([2, 8, 8, 1], generator=g, scale=0.5)
    dyn = VectorField(2, fn=pend, m=1)
    spec = ClosedLoopSpec(dyn, ctl, K=4, N_ctl=6, params=FlowpipeParams(h=0.025, N=0))
    box = box_from_center([0.4, -0.2], [0.05, 0.05])
    tube = cl_reach(spec, box)
    assert not tube.any_diverged
    xs = sample_box(box, 300, rng, corners=4)
    states, controls = closed_loop_sim(pend, ctl, xs, spec.K, spec.params.h, spec.N_ctl, sub=2)
    assert tube_violations(tube.lo[:, :2].numpy(), tube.hi[:, :2].numpy(), states, 2, tol=1e-9) == 0
    for i in range(spec.N_ctl):
        k = 1 + i * spec.K
        u = controls[i]
        assert np.all(tube.lo[k, 2:].numpy() - 1e-9 <= u) and np.all(u <= tube.hi[k, 2:].numpy() + 1e-9)


def test_batched_closed_loop_matches_sequential():
    spec = linear_spec(controller=MLPNet.random([2, 8, 1], generator=torch.Generator().manual_seed(0)))
    X = box_from_center(torch.tensor([[1.0, 0.0], [0.5, 0.2]]), torch.full((2, 2), 0.05))
    tb = cl_reach(spec, X)
    for i in range(2):
        t1 = cl_reach(spec, X[i])
        assert torch.equal(t1.lo, tb.lo[i]) and torch.equal(t1.hi, tb.hi[i])


def test_spec_validation():
    dyn = VectorField(2, fn=linear_field(A, B), m=1)
    with pytest.raises(ValueError):
        ClosedLoopSpec(dyn, MLPNet.random([3, 4, 1]), K=1, N_ctl=1, params=FlowpipeParams(h=0.1, N=0))
    with pytest.raises(ValueError):
        ClosedLoopSpec(dyn, MLPNet.random([2, 4, 2]), K=1, N_ctl=1, params=FlowpipeParams(h=0.1, N=0))
    with pytest.raises(ValueError):
        ClosedLoopSpec(dyn, MLPNet.random([2, 4, 1]), K=0, N_ctl=1, params=FlowpipeParams(h=0.1, N=0))
    spec = linear_spec(N_ctl=0)
    assert cl_reach(spec, X0).steps == 0
