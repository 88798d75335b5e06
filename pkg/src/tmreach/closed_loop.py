"""Closed-loop reachability under zero-order-hold neural feedback.

At each control boundary the controller is bounded on the current state
model, giving a control model over the same global variables.  The control
rows are stacked under the state rows and the augmented system (with u held
constant) is propagated for K atomic steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .flowpipe import (
    FlowpipeParams,
    SymbolicState,
    VectorField,
    _advance,
    _atomic_step,
    augment,
    symbolic_step,
)
from .interval import DTYPE, IntervalBox, as_tensor
from .neural import MLPNet, ctl_crown
from .taylor_model import TaylorModel, build_linear_tm
from .tube import ReachTube, mark_diverged


@dataclass
class ClosedLoopSpec:
    dynamics: VectorField
    controller: MLPNet
    K: int
    N_ctl: int
    params: FlowpipeParams
    refs: object = None  # (N_ctl, r) references, or None

    def __post_init__(self):
        if self.K < 1 or self.N_ctl < 0:
            raise ValueError("need K >= 1 atomic steps per control interval")
        r = 0 if self.refs is None else as_tensor(self.refs).shape[-1]
        if self.controller.input_dim != self.dynamics.n + r:
            raise ValueError("controller input dim must equal state dim + reference dim")
        if self.controller.output_dim != self.dynamics.m:
            raise ValueError("controller output dim must equal the input dim of the dynamics")

    @property
    def delta(self) -> float:
        return self.K * self.params.h


def _ref(refs, i):
    if refs is None:
        return None
    refs = as_tensor(refs)
    return refs[..., i, :]


def _replace_rows(tm: TaylorModel, start: int, block: TaylorModel) -> TaylorModel:
    return TaylorModel.cat([tm.rows(slice(0, start)), block])


def cl_reach(spec: ClosedLoopSpec, X0: IntervalBox, intervalize: bool = False) -> ReachTube:
    """Tube over the stacked (x, u) state, boxes for atomic steps 0..N_ctl*K.

    ``intervalize`` is the ablation that boxes the state before the controller
    is bounded, discarding the shared dependence.
    """
    dyn = spec.dynamics
    n, m = dyn.n, dyn.m
    if X0.n != n:
        raise ValueError(f"X0 has {X0.n} dims, dynamics have {n}")
    params = spec.params
    h = params.h
    field = augment(dyn)
    M = params.M
    nw = n + M * (n + m)
    xtm = build_linear_tm(X0, nz=nw)
    utm0 = TaylorModel.constant(torch.zeros(X0.batch_shape + (m,), dtype=DTYPE), nw)
    sym = SymbolicState(TaylorModel.cat([xtm, utm0]), n, M, clean=True)

    los, his, divs = [], [], []
    failed = torch.zeros(X0.batch_shape, dtype=torch.bool)
    failure = None
    for i in range(spec.N_ctl):
        _, _, _, sym = symbolic_step(sym, sym.tm)
        state = sym.tm.rows(slice(0, n))
        if intervalize:
            lo, hi = state.bound_tensors()
            u_tm = ctl_crown(build_linear_tm(IntervalBox(lo, hi)), spec.controller, _ref(spec.refs, i))
            ulo, uhi = u_tm.bound_tensors()
            u_tm = TaylorModel.from_interval(ulo, uhi, nw)
        else:
            u_tm = ctl_crown(state, spec.controller, _ref(spec.refs, i))
        sym = SymbolicState(_replace_rows(sym.tm, n, u_tm), sym.n0, sym.M, sym.slot, sym.history)
        if i == 0:
            ulo, uhi = u_tm.bound_tensors()
            los.append(torch.cat([X0.lo, ulo], -1))
            his.append(torch.cat([X0.hi, uhi], -1))
            divs.append(failed)
        for _ in range(spec.K):
            seg_w, ok, ratio, sym = _atomic_step(field, sym, params, None)
            lo, hi = seg_w.bound_tensors(0.0, h)
            ok = ok & torch.isfinite(lo).all(-1) & torch.isfinite(hi).all(-1)
            if failure is None and not bool(ok.all()):
                failure = {"step": len(los), "ratio": float(ratio[~ok].max()) if ratio.dim() else float(ratio)}
            failed = failed | ~ok
            sym = _advance(sym, seg_w, ~failed, h)
            los.append(lo)
            his.append(hi)
            divs.append(failed)
    if not los:
        zero = torch.zeros(X0.batch_shape + (m,), dtype=DTYPE)
        los, his, divs = [torch.cat([X0.lo, zero], -1)], [torch.cat([X0.hi, zero], -1)], [failed]
    lo = torch.stack(los, dim=-2)
    hi = torch.stack(his, dim=-2)
    div = torch.stack(divs, dim=-1)
    lo, hi = mark_diverged(lo, hi, div)
    steps = lo.shape[-2]
    t_hi = h * torch.arange(steps, dtype=DTYPE)
    t_lo = torch.cat([t_hi[:1], t_hi[:-1]])
    meta = {"engine": "cl_reach", "params": params.to_dict(), "K": spec.K, "N_ctl": spec.N_ctl,
            "state_dim": n, "control_dim": m, "intervalize": intervalize}
    if failure is not None:
        meta["failure"] = failure
    return ReachTube(lo, hi, t_lo, t_hi, div, meta)
