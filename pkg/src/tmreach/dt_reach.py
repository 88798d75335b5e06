"""Stepwise reachability of discrete-time one-step maps.

Each step certifies the action-frozen map on the current linear model, then
absorbs the new remainder into a symbolic slot so the next step still sees
the dependence on the initial variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .flowpipe import SymbolicState, init_symbolic_state, symbolic_step
from .interval import IntervalBox, as_tensor, stack_boxes
from .neural import MLPNet, certify_tm_input, interval_forward
from .taylor_model import TaylorModel, build_linear_tm
from .tube import ReachTube, mark_diverged


@dataclass
class DTSystem:
    """x' = f(x, u), given by a network over (x, u) or an analytical map.

    With ``residual`` the network predicts the increment: x' = x + net(x, u).
    Analytical maps take ``(x, u)`` and must accept Taylor models for x.
    """

    n: int
    m: int
    H: int
    net: Optional[MLPNet] = None
    fn: Optional[Callable] = None
    residual: bool = False
    name: str = "dt"

    def __post_init__(self):
        if (self.net is None) == (self.fn is None):
            raise ValueError("give exactly one of net or fn")
        if self.net is not None:
            if self.net.input_dim != self.n + self.m:
                raise ValueError(f"network input dim {self.net.input_dim} != n + m = {self.n + self.m}")
            if self.net.output_dim != self.n:
                raise ValueError("network output dim must equal the state dim")
        if self.H < 0:
            raise ValueError("horizon must be non-negative")

    def step(self, x, u):
        """Numeric one-step map on tensors of shape (..., n) and (..., m)."""
        x = as_tensor(x)
        u = as_tensor(u)
        if self.net is not None:
            out = self.net.forward(torch.cat([x, u.expand(x.shape[:-1] + u.shape[-1:])], -1))
            return x + out if self.residual else out
        return as_tensor(self.fn(x, u))

    def rollout(self, x0, actions) -> torch.Tensor:
        """States 0..H of shape (..., H+1, n)."""
        xs = [as_tensor(x0)]
        actions = as_tensor(actions)
        for k in range(actions.shape[-2]):
            xs.append(self.step(xs[-1], actions[..., k, :]))
        return torch.stack(xs, dim=-2)

    def step_tm(self, tm: TaylorModel, u, preact: str = "crown") -> TaylorModel:
        if self.net is not None:
            out = certify_tm_input(self.net.fold_input(self.n, u), tm, preact=preact)
            return tm + out if self.residual else out
        return self.fn(tm, as_tensor(u))

    def step_box(self, lo, hi, u):
        """Interval image of a box under the one-step map (no dependency tracking)."""
        if self.net is not None:
            olo, ohi = interval_forward(self.net.fold_input(self.n, u), lo, hi)
            if self.residual:
                return lo + olo, hi + ohi
            return olo, ohi
        return self.fn(TaylorModel.from_interval(lo, hi, 0), as_tensor(u)).bound_tensors()


def _check_actions(sys: DTSystem, actions) -> torch.Tensor:
    a = as_tensor(actions)
    if a.shape[-2:] != (sys.H, sys.m):
        raise ValueError(f"actions must have shape (..., {sys.H}, {sys.m}), got {tuple(a.shape)}")
    return a


def _finish(los, his, divs, meta) -> ReachTube:
    lo = torch.stack(los, dim=-2)
    hi = torch.stack(his, dim=-2)
    div = torch.stack(divs, dim=-1)
    lo, hi = mark_diverged(lo, hi, div)
    return ReachTube(lo, hi, diverged=div, meta=meta)


def dt_reach(sys: DTSystem, X0: IntervalBox, actions, M: Optional[int] = None,
             reseed: str = "symbolic", preact: str = "crown") -> ReachTube:
    """Boxes for steps 0..H.

    ``M`` is the number of remainder slots kept symbolic (default H, so no
    slot is ever folded).  ``reseed="box"`` is the ablation that rebuilds a
    fresh linear model from each step's box.
    """
    if X0.n != sys.n:
        raise ValueError(f"X0 has {X0.n} dims, system has {sys.n}")
    if reseed not in ("symbolic", "box"):
        raise ValueError("reseed must be 'symbolic' or 'box'")
    actions = _check_actions(sys, actions)
    M = sys.H if M is None else M
    if reseed == "box":
        sym = SymbolicState(build_linear_tm(X0), sys.n, 0)
    else:
        sym = init_symbolic_state(X0, M)
    los, his = [X0.lo], [X0.hi]
    failed = torch.zeros(X0.batch_shape, dtype=torch.bool)
    divs = [failed]
    failure = None
    for k in range(sys.H):
        _, _, _, sym = symbolic_step(sym, sym.tm)
        nxt = sys.step_tm(sym.tm, actions[..., k, :], preact)
        lo, hi = nxt.bound_tensors()
        ok = torch.isfinite(lo).all(-1) & torch.isfinite(hi).all(-1)
        if failure is None and not bool(ok.all()):
            failure = {"step": k + 1}
        failed = failed | ~ok
        los.append(lo)
        his.append(hi)
        divs.append(failed)
        if reseed == "box":
            safe_lo = torch.where(failed.unsqueeze(-1), torch.zeros_like(lo), lo)
            safe_hi = torch.where(failed.unsqueeze(-1), torch.zeros_like(hi), hi)
            nxt = build_linear_tm(IntervalBox(safe_lo, safe_hi))
        elif not bool(ok.all()):
            nxt = nxt.select(~failed, sym.tm)
        sym = SymbolicState(nxt, sym.n0, sym.M, sym.slot, sym.history)
    meta = {"engine": "dt_reach", "system": sys.name, "H": sys.H, "M": M, "reseed": reseed}
    if failure is not None:
        meta["failure"] = failure
    return _finish(los, his, divs, meta)


def dt_reach_batch(sys: DTSystem, X0s: Sequence[IntervalBox], action_seqs, **kw) -> list:
    """Evaluate many (X0, actions) pairs in one batched pass."""
    if len(X0s) != len(action_seqs):
        raise ValueError("need one action sequence per initial box")
    if not len(X0s):
        return []
    X = stack_boxes(X0s)
    A = torch.stack([as_tensor(a) for a in action_seqs])
    tube = dt_reach(sys, X, A, **kw)
    return [tube[i] for i in range(len(X0s))]


def interval_baseline_dt(sys: DTSystem, X0: IntervalBox, actions) -> ReachTube:
    """Naive per-step interval propagation of the one-step map."""
    actions = _check_actions(sys, actions)
    lo, hi = X0.lo, X0.hi
    los, his = [lo], [hi]
    for k in range(sys.H):
        lo, hi = sys.step_box(lo, hi, actions[..., k, :])
        los.append(lo)
        his.append(hi)
    return ReachTube(torch.stack(los, -2), torch.stack(his, -2),
                     meta={"engine": "interval_baseline_dt", "system": sys.name})
