"""Continuous-time flowpipes by truncated Picard iteration.

Each atomic step works on a local affine seed ``x = c + diag(S) y`` over the
unit box in y.  The polynomial part of the flow comes from k Picard
iterations on the fixed Taylor-model shape; the remainder is validated by a
contraction check and then tightened by replaying the Picard operator.

Across steps the reachable set is kept as an affine map of global variables
w = (initial-box variables, symbolic remainder slots).  The last M step
remainders live in their own slots, so the linear flow of later steps acts on
them exactly instead of on their bounding boxes.  When a slot is reused its
old contents are folded into the new remainder as a diagonal box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import fieldops as F
from .interval import DTYPE, IntervalBox, as_tensor, contains
from .neural import MLPNet, certify_tm_input
from .taylor_model import TaylorModel, build_linear_tm, tm_compose_affine
from .tube import ReachTube, mark_diverged


class StepFailure(RuntimeError):
    """Remainder validation did not contract within the allowed enlargements."""

    def __init__(self, message: str, ratio: float = math.inf, step: int | None = None):
        super().__init__(message)
        self.ratio = ratio
        self.step = step


@dataclass
class VectorField:
    """x' = f(x, u).  Either an analytical ``fn(x, u)`` or a network over (x, u)."""

    n: int
    fn: Callable | None = None
    net: MLPNet | None = None
    m: int = 0
    name: str = ""

    def __post_init__(self):
        if (self.fn is None) == (self.net is None):
            raise ValueError("give exactly one of fn or net")
        if self.net is not None and self.net.input_dim != self.n + self.m:
            raise ValueError("network input dim must equal n + m")

    @property
    def kind(self) -> str:
        return "neural" if self.net is not None else "analytical"

    def __call__(self, x, u=None):
        if self.fn is not None:
            return self.fn(x, u)
        if isinstance(x, TaylorModel):
            return self._certify(x, u)
        if self.m == 0:
            return self.net(x)
        if isinstance(x, np.ndarray):
            u = np.broadcast_to(np.asarray(u, dtype=float), x.shape[:-1] + (self.m,))
        else:
            u = as_tensor(u).expand(x.shape[:-1] + (self.m,))
        return self.net(F.cat([x, u]))

    def _certify(self, x: TaylorModel, u) -> TaylorModel:
        h = x.h
        lin = x.to_linear()
        net = self.net
        if self.m:
            if isinstance(u, TaylorModel):
                lin = TaylorModel.cat([lin, u.to_linear()])
            else:
                net = net.fold_input(self.n, as_tensor(u))
        out = certify_tm_input(net, lin)
        out.h = h
        return out


def augment(field: VectorField) -> VectorField:
    """Field on the stacked state (x, u) with the input block held constant."""
    n, m = field.n, field.m

    if field.net is not None:
        # the network sees the whole stacked state directly
        def fn(xt, _u=None):
            if isinstance(xt, TaylorModel):
                dx = field._certify(xt.rows(slice(0, n)), xt.rows(slice(n, n + m)))
            else:
                dx = field.net(xt)
            return F.cat([dx, F.zeros_rows(xt, m)])
    else:
        def fn(xt, _u=None):
            x = F.rows(xt, slice(0, n))
            u = F.rows(xt, slice(n, n + m))
            return F.cat([field.fn(x, u), F.zeros_rows(xt, m)])

    return VectorField(n + m, fn=fn, name=f"{field.name}+u")


@dataclass
class FlowpipeParams:
    h: float
    N: int
    k: int = 2
    eps_init: float = 1e-4
    R: int = 3
    enlargement: float = 2.0
    max_enl: int = 20
    M: int = 4

    def __post_init__(self):
        if self.h <= 0 or self.N < 0 or self.eps_init <= 0 or self.R < 0:
            raise ValueError("invalid flowpipe parameters")
        if self.k not in (1, 2):
            raise ValueError("order must be 1 or 2 for the fixed model shape")
        if self.enlargement <= 1 or self.max_enl < 0 or self.M < 0:
            raise ValueError("invalid enlargement or window settings")

    def to_dict(self) -> dict:
        return dict(h=self.h, N=self.N, k=self.k, eps_init=self.eps_init, R=self.R,
                    enlargement=self.enlargement, max_enl=self.max_enl, M=self.M)


# ---------------------------------------------------------------------------
# Picard iteration


def _seed_tm(c, S, h: float) -> TaylorModel:
    Az = torch.diag_embed(S)
    zero = torch.zeros_like(c)
    return TaylorModel(c, Az, zero, torch.zeros_like(Az), zero, zero, h)


def poly_picard(field: VectorField, seed: TaylorModel, h: float, k: int = 2, u=None) -> TaylorModel:
    """Polynomial part of the k-th truncated Picard iterate (remainder dropped)."""
    seed = TaylorModel(seed.c, seed.Az, seed.at, seed.B, torch.zeros_like(seed.c),
                       torch.zeros_like(seed.c), h)
    g = seed
    frozen = None
    for _ in range(k):
        if field.net is not None:
            # one certification per step, reused across iterations
            if frozen is None:
                frozen = field(g, u)
            fg = frozen
        else:
            fg = field(g, u)
        g = (seed + fg.integrate()).poly()
    return g


def _picard_remainder(field, seed, p, lo, hi, u):
    g = p.with_remainder(lo, hi)
    g1 = seed + field(g, u).integrate()
    return (g1 - p.poly()).bound_tensors()


def _remainder_search(field, seed, p, params: FlowpipeParams, u):
    """Returns (segment, ok mask, contraction ratio)."""
    eps = torch.full(p.c.shape, params.eps_init, dtype=DTYPE)
    done = torch.zeros(p.batch_shape, dtype=torch.bool)
    acc_lo = torch.zeros_like(p.c)
    acc_hi = torch.zeros_like(p.c)
    ratio = torch.full(p.batch_shape, math.inf, dtype=DTYPE)
    for _ in range(params.max_enl + 1):
        lo1, hi1 = _picard_remainder(field, seed, p, -eps, eps, u)
        finite = torch.isfinite(lo1).all(-1) & torch.isfinite(hi1).all(-1)
        ok = contains(-eps, eps, lo1, hi1).all(-1) & finite
        mag = torch.maximum(lo1.abs(), hi1.abs())
        r = (mag / eps).amax(-1).detach()
        ratio = torch.where(done, ratio, torch.where(finite, r, torch.full_like(r, math.inf)))
        new = ok & ~done
        m1 = new.unsqueeze(-1)
        acc_lo = torch.where(m1, lo1, acc_lo)
        acc_hi = torch.where(m1, hi1, acc_hi)
        done = done | ok
        if bool(done.all()):
            break
        grow = torch.maximum(eps * params.enlargement, mag * params.enlargement)
        grow = torch.where(torch.isfinite(grow), grow, eps * params.enlargement)
        eps = torch.where(done.unsqueeze(-1), eps, grow)
    # tighten: each replay of the operator on a valid enclosure is again valid and nested
    lo, hi = acc_lo, acc_hi
    safe = done.unsqueeze(-1)
    lo = torch.where(safe, lo, torch.zeros_like(lo))
    hi = torch.where(safe, hi, torch.zeros_like(hi))
    for _ in range(params.R):
        l2, h2 = _picard_remainder(field, seed, p, lo, hi, u)
        # keep the intersection so rounding cannot loosen an earlier bound
        lo = torch.where(safe, torch.maximum(lo, l2), lo)
        hi = torch.where(safe, torch.minimum(hi, h2), hi)
    if bool(done.any()):
        assert bool(contains(-eps, eps, lo, hi).all(-1)[done].all()), "accepted remainder not contractive"
    return p.with_remainder(lo, hi), done, ratio


def remainder_picard(field: VectorField, seed: TaylorModel, p: TaylorModel, h: float,
                     eps_init: float = 1e-4, R: int = 3, enlargement: float = 2.0,
                     max_enl: int = 20, u=None) -> TaylorModel:
    """Validated flow segment over tau in [0, h]; raises StepFailure if no contraction."""
    params = FlowpipeParams(h=h, N=1, eps_init=eps_init, R=R, enlargement=enlargement, max_enl=max_enl)
    seg, ok, ratio = _remainder_search(field, seed, p, params, u)
    if not bool(ok.all()):
        worst = float(ratio[~ok].max()) if ratio.dim() else float(ratio)
        raise StepFailure(f"remainder did not contract (I1/I0 ratio {worst:.3g})", ratio=worst)
    return seg


# ---------------------------------------------------------------------------
# symbolic state across steps


@dataclass
class SymbolicState:
    """Current set as an affine model over w = (initial vars, remainder slots)."""

    tm: TaylorModel
    n0: int
    M: int
    slot: int = 0
    history: list = field(default_factory=list)
    # True when the remainder is structurally zero (just absorbed or freshly
    # built); decided by the code path, never by values, so every batch
    # element follows the same slot schedule
    clean: bool = False

    @property
    def nw(self) -> int:
        return self.tm.nz


def init_symbolic_state(X0: IntervalBox, M: int, n_rows: int | None = None) -> SymbolicState:
    n = X0.n
    rows = n if n_rows is None else n_rows
    nw = n + M * rows
    tm = build_linear_tm(X0, nz=nw)
    return SymbolicState(tm, n, M, clean=True)


def _slot_cols(sym: SymbolicState, slot: int):
    rows = sym.tm.n
    start = sym.n0 + slot * rows
    return start, start + rows


def symbolic_step(sym: SymbolicState, endpoint: TaylorModel):
    """Absorb the endpoint's remainder into a slot and build the next local seed.

    Returns (seed center, seed half-widths S, map T from w to the seed's unit
    variables, updated state).
    """
    tm = endpoint
    if sym.M > 0 and not sym.clean:
        a, b = _slot_cols(sym, sym.slot)
        old = tm.Az[..., a:b]
        fold = old.abs().sum(-1)
        mid = 0.5 * (tm.lo + tm.hi)
        rad = 0.5 * (tm.hi - tm.lo)
        block = torch.diag_embed(rad + fold)
        Az = torch.cat([tm.Az[..., :a], block, tm.Az[..., b:]], dim=-1)
        zero = torch.zeros_like(tm.c)
        tm = TaylorModel(tm.c + mid, Az, zero, torch.zeros_like(Az), zero, zero, 0.0)
        history = (sym.history + [(sym.slot, rad)])[-sym.M:]
        new = SymbolicState(tm, sym.n0, sym.M, (sym.slot + 1) % sym.M, history, clean=True)
    else:
        tm = TaylorModel(tm.c, tm.Az, torch.zeros_like(tm.c), torch.zeros_like(tm.Az),
                         tm.lo, tm.hi, 0.0)
        new = SymbolicState(tm, sym.n0, sym.M, sym.slot, sym.history, sym.clean)
    mid = 0.5 * (tm.lo + tm.hi)
    rad_r = 0.5 * (tm.hi - tm.lo)
    S = tm.Az.abs().sum(-1) + rad_r
    inv = torch.where(S > 0, 1.0 / torch.where(S > 0, S, torch.ones_like(S)), torch.zeros_like(S))
    T = TaylorModel(torch.zeros_like(tm.c), tm.Az * inv.unsqueeze(-1), torch.zeros_like(tm.c),
                    torch.zeros_like(tm.Az), -rad_r * inv, rad_r * inv, 0.0)
    return tm.c + mid, S, T, new


def _atomic_step(field, sym: SymbolicState, params: FlowpipeParams, u):
    """One validated step.  Returns (segment over w, ok mask, ratio, new sym)."""
    c_s, S, T, sym = symbolic_step(sym, sym.tm)
    seed = _seed_tm(c_s, S, params.h)
    p = poly_picard(field, seed, params.h, params.k, u)
    seg, ok, ratio = _remainder_search(field, seed, p, params, u)
    seg_w = tm_compose_affine(seg, T)
    return seg_w, ok, ratio, sym


def _advance(sym: SymbolicState, seg_w: TaylorModel, ok: torch.Tensor, h: float) -> SymbolicState:
    end = seg_w.at_time(h)
    if not bool(ok.all()):
        # keep failed elements finite; their boxes are blanked by the caller
        end = end.select(ok, sym.tm)
    return SymbolicState(end, sym.n0, sym.M, sym.slot, sym.history)


def _step_input(inputs, i):
    if inputs is None:
        return None
    return inputs[..., i, :] if inputs.dim() >= 2 else inputs


def ct_reach(field: VectorField, X0: IntervalBox, params: FlowpipeParams, inputs=None,
             t0: float = 0.0) -> ReachTube:
    """Flowpipe of ``field`` from X0; box i covers [t0 + (i-1)h, t0 + ih] for i >= 1.

    ``inputs`` holds piecewise-constant inputs, shape (m,), (N, m) or batched.
    """
    if X0.n != field.n:
        raise ValueError(f"X0 has {X0.n} dims, field has {field.n}")
    if bool(X0.diverged.any()):
        raise ValueError("initial box is not finite")
    if inputs is not None:
        inputs = as_tensor(inputs)
    h = params.h
    sym = init_symbolic_state(X0, params.M)
    los, his = [X0.lo], [X0.hi]
    failed = torch.zeros(X0.batch_shape, dtype=torch.bool)
    divs = [failed]
    failure = None
    for i in range(params.N):
        seg_w, ok, ratio, sym = _atomic_step(field, sym, params, _step_input(inputs, i))
        lo, hi = seg_w.bound_tensors(0.0, h)
        ok = ok & torch.isfinite(lo).all(-1) & torch.isfinite(hi).all(-1)
        if failure is None and not bool(ok.all()):
            failure = {"step": i + 1, "ratio": float(ratio[~ok].max()) if ratio.dim() else float(ratio)}
        failed = failed | ~ok
        sym = _advance(sym, seg_w, ~failed, h)
        los.append(lo)
        his.append(hi)
        divs.append(failed)
    lo = torch.stack(los, dim=-2)
    hi = torch.stack(his, dim=-2)
    div = torch.stack(divs, dim=-1)
    lo, hi = mark_diverged(lo, hi, div)
    t_hi = t0 + h * torch.arange(params.N + 1, dtype=DTYPE)
    t_lo = torch.cat([t_hi[:1], t_hi[:-1]])
    meta = {"engine": "ct_reach", "params": params.to_dict(), "field": field.name}
    if failure is not None:
        meta["failure"] = failure
    return ReachTube(lo, hi, t_lo, t_hi, div, meta)
