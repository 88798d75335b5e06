"""Numerical simulation used as ground truth: high-accuracy integration,
zero-order-hold closed-loop simulation, sampling from boxes and a plain RK4
step for differentiable rollouts."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch
from scipy.integrate import solve_ivp

from .interval import IntervalBox
from .neural import MLPNet


def sample_box(box: IntervalBox, k: int, rng: np.random.Generator, corners: int = 0) -> np.ndarray:
    """k points from an unbatched box: ``corners`` random vertices, the rest uniform."""
    lo = box.lo.detach().numpy()
    hi = box.hi.detach().numpy()
    n = lo.shape[-1]
    c = min(corners, k)
    pick = rng.integers(0, 2, size=(c, n)).astype(bool)
    vert = np.where(pick, hi, lo)
    uni = lo + (hi - lo) * rng.random((k - c, n))
    return np.concatenate([vert, uni], 0)


def _flat_rhs(fn: Callable, n: int, u):
    def rhs(_t, y):
        x = y.reshape(-1, n)
        return np.asarray(fn(x, u), dtype=float).reshape(-1)
    return rhs


def integrate(fn: Callable, x0: np.ndarray, t_eval, u=None, rtol: float = 1e-10,
              atol: float = 1e-12) -> np.ndarray:
    """States at ``t_eval`` (starting from t=0) for a batch x0 of shape (k, n).

    ``fn(x, u)`` is evaluated on the whole (k, n) batch at once, with u either
    None, a vector, or a (k, m) array.  Returns shape (len(t_eval), k, n).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    k, n = x0.shape
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval[-1] == 0.0:
        return np.repeat(x0[None], len(t_eval), 0)
    sol = solve_ivp(_flat_rhs(fn, n, u), (0.0, float(t_eval[-1])), x0.reshape(-1),
                    method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return sol.y.T.reshape(len(t_eval), k, n)


def piecewise_inputs_sim(fn: Callable, x0: np.ndarray, inputs: np.ndarray, h: float,
                         sub: int = 1, **kw) -> np.ndarray:
    """Simulate under inputs held constant over each step of length h.

    Returns states at times j*h/sub for j = 0..N*sub, shape (N*sub+1, k, n).
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    out = [x]
    grid = np.linspace(0.0, h, sub + 1)
    for i in range(inputs.shape[0]):
        seg = integrate(fn, x, grid, inputs[i], **kw)
        out.extend(seg[1:])
        x = seg[-1]
    return np.stack(out)


def closed_loop_sim(fn: Callable, controller: MLPNet, x0: np.ndarray, K: int, h: float,
                    N_ctl: int, refs: Optional[np.ndarray] = None, sub: int = 1, **kw):
    """True zero-order-hold simulation.

    Returns (states at j*h/sub for j = 0..N_ctl*K*sub, controls per interval)
    with shapes (N_ctl*K*sub+1, k, n) and (N_ctl, k, m).
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    states = [x]
    controls = []
    grid = np.linspace(0.0, K * h, K * sub + 1)
    for i in range(N_ctl):
        inp = x if refs is None else np.concatenate([x, np.broadcast_to(refs[i], (x.shape[0], refs.shape[-1]))], -1)
        u = np.asarray(controller(inp), dtype=float)
        controls.append(u)
        seg = integrate(fn, x, grid, u, **kw)
        states.extend(seg[1:])
        x = seg[-1]
    return np.stack(states), np.stack(controls)


def rk4_step(fn: Callable, x, u, dt: float, substeps: int = 1):
    """Classical RK4 with a fixed step, on tensors or arrays (differentiable)."""
    hs = dt / substeps
    for _ in range(substeps):
        k1 = fn(x, u)
        k2 = fn(x + 0.5 * hs * k1, u)
        k3 = fn(x + 0.5 * hs * k2, u)
        k4 = fn(x + hs * k3, u)
        x = x + (hs / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def tube_violations(lo, hi, states, sub: int, tol: float = 0.0) -> int:
    """Count sample states outside their tube boxes.

    ``states`` has shape (N*sub+1, k, n) on the grid j*h/sub; box i covers
    [(i-1)h, ih], so every grid point inside that span is checked against it.
    """
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    bad = int(((states[0] < lo[0] - tol) | (states[0] > hi[0] + tol)).any(-1).sum())
    for i in range(1, lo.shape[0]):
        seg = states[(i - 1) * sub:i * sub + 1]
        out = (seg < lo[i] - tol) | (seg > hi[i] + tol)
        bad += int(out.any(-1).sum())
    return bad


def box_sample_width(states: np.ndarray) -> np.ndarray:
    """Per-step empirical width (max - min over samples), shape (steps, n)."""
    return states.max(1) - states.min(1)


def as_numpy_field(fn: Callable) -> Callable:
    """Wrap a tensor-only field so it accepts and returns numpy arrays."""
    def f(x, u=None):
        xt = torch.as_tensor(x, dtype=torch.float64)
        ut = None if u is None else torch.as_tensor(np.asarray(u), dtype=torch.float64)
        return fn(xt, ut).detach().numpy()
    return f
