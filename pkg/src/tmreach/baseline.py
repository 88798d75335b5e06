"""Interval-only reachability baselines used to measure tightness gains."""

from __future__ import annotations

import torch

from .dt_reach import interval_baseline_dt
from .flowpipe import FlowpipeParams, VectorField, _step_input
from .interval import DTYPE, IntervalBox, as_tensor, contains, round_out
from .taylor_model import TaylorModel
from .tube import ReachTube, mark_diverged

__all__ = ["interval_baseline_ct", "interval_baseline_dt"]


def _field_box(field: VectorField, lo, hi, u):
    return field(TaylorModel.from_interval(lo, hi, 0), u).bound_tensors()


def interval_baseline_ct(field: VectorField, X0: IntervalBox, params: FlowpipeParams,
                         inputs=None) -> ReachTube:
    """First-order interval Picard enclosure with no dependency tracking.

    Each step finds an a-priori box E with X + [0, h] f(E) inside E, then
    advances to X + h f(E).  Box i covers [(i-1)h, ih], as in ct_reach.
    """
    if inputs is not None:
        inputs = as_tensor(inputs)
    h = params.h
    lo, hi = X0.lo, X0.hi
    los, his = [lo], [hi]
    failed = torch.zeros(X0.batch_shape, dtype=torch.bool)
    divs = [failed]
    for i in range(params.N):
        u = _step_input(inputs, i)
        flo, fhi = _field_box(field, lo, hi, u)
        e_lo, e_hi = round_out(lo + h * torch.clamp(flo, max=0), hi + h * torch.clamp(fhi, min=0))
        ok = torch.zeros_like(failed)
        for _ in range(params.max_enl):
            pad = params.eps_init + (e_hi - e_lo)
            c_lo, c_hi = e_lo - pad, e_hi + pad
            flo, fhi = _field_box(field, c_lo, c_hi, u)
            n_lo, n_hi = round_out(lo + h * torch.clamp(flo, max=0), hi + h * torch.clamp(fhi, min=0))
            ok = contains(c_lo, c_hi, n_lo, n_hi).all(-1)
            if bool(ok.all()):
                break
            e_lo, e_hi = torch.minimum(e_lo, n_lo), torch.maximum(e_hi, n_hi)
        # replay the operator once on the certified box to tighten it
        flo, fhi = _field_box(field, n_lo, n_hi, u)
        s_lo, s_hi = round_out(lo + h * torch.clamp(flo, max=0), hi + h * torch.clamp(fhi, min=0))
        s_lo, s_hi = torch.maximum(s_lo, n_lo), torch.minimum(s_hi, n_hi)
        end_lo, end_hi = round_out(lo + h * flo, hi + h * fhi)
        end_lo, end_hi = torch.maximum(end_lo, s_lo), torch.minimum(end_hi, s_hi)
        ok = ok & torch.isfinite(s_lo).all(-1) & torch.isfinite(s_hi).all(-1)
        failed = failed | ~ok
        los.append(s_lo)
        his.append(s_hi)
        divs.append(failed)
        keep = failed.unsqueeze(-1)
        lo = torch.where(keep, lo, end_lo)
        hi = torch.where(keep, hi, end_hi)
    lo_t = torch.stack(los, -2)
    hi_t = torch.stack(his, -2)
    div = torch.stack(divs, -1)
    lo_t, hi_t = mark_diverged(lo_t, hi_t, div)
    t_hi = h * torch.arange(params.N + 1, dtype=DTYPE)
    t_lo = torch.cat([t_hi[:1], t_hi[:-1]])
    return ReachTube(lo_t, hi_t, t_lo, t_hi, div, {"engine": "interval_baseline_ct"})
