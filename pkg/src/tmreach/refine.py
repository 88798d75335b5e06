"""Conservatism reduction: input splitting, tube volume and its gradient,
and projected gradient refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .interval import DTYPE, IntervalBox, as_tensor, stack_boxes
from .tube import ReachTube, mark_diverged

MAX_PARTS = 1 << 20

# named dimension groups for split presets
PRESET_DIMS = {"rpy": (6, 7, 8)}


def _balanced_factors(total: int, k: int) -> list:
    """Split ``total`` into k integer factors, as equal as possible (largest first)."""
    out = [1] * k
    rest = total
    p = 2
    primes = []
    while p * p <= rest:
        while rest % p == 0:
            primes.append(p)
            rest //= p
        p += 1
    if rest > 1:
        primes.append(rest)
    for q in sorted(primes, reverse=True):
        i = min(range(k), key=lambda j: out[j])
        out[i] *= q
    return sorted(out, reverse=True)


@dataclass(frozen=True)
class SplitPlan:
    counts: tuple

    def __post_init__(self):
        if any(int(c) != c or c < 1 for c in self.counts):
            raise ValueError("split counts must be positive integers")
        if self.total > MAX_PARTS:
            raise ValueError(f"split plan gives {self.total} parts, limit is {MAX_PARTS}")

    @property
    def total(self) -> int:
        return math.prod(self.counts)

    @classmethod
    def none(cls, n: int) -> "SplitPlan":
        return cls((1,) * n)

    @classmethod
    def parse(cls, text: str, n: int) -> "SplitPlan":
        """``"2x2x1"`` (one count per dim, missing trailing dims are 1)."""
        counts = [int(c) for c in text.lower().split("x")]
        if len(counts) > n:
            raise ValueError(f"split plan has {len(counts)} counts for a {n}-dim box")
        return cls(tuple(counts) + (1,) * (n - len(counts)))

    @classmethod
    def preset(cls, spec: str, n: int) -> "SplitPlan":
        """``"rpy:8"`` splits the roll/pitch/yaw dims into 8 parts in total;
        ``"dims:0,1:4"`` does the same for listed dims; ``"all:2"`` halves every dim."""
        parts = spec.split(":")
        name = parts[0]
        if name == "all":
            return cls((int(parts[1]),) * n)
        if name == "dims":
            dims = tuple(int(d) for d in parts[1].split(","))
            total = int(parts[2])
        elif name in PRESET_DIMS:
            dims = PRESET_DIMS[name]
            total = int(parts[1])
        else:
            raise ValueError(f"unknown split preset {name!r}")
        if max(dims) >= n:
            raise ValueError(f"preset {name!r} needs at least {max(dims) + 1} dims")
        counts = [1] * n
        for d, c in zip(dims, _balanced_factors(total, len(dims))):
            counts[d] = c
        return cls(tuple(counts))


def _edges(lo, hi, k: int):
    # neighbours share the exact same float edge; the outer edges are lo and hi
    frac = torch.arange(k + 1, dtype=DTYPE) / k
    e = lo.unsqueeze(-1) + (hi - lo).unsqueeze(-1) * frac
    e[..., 0] = lo
    e[..., -1] = hi
    return e


def split_box(X0: IntervalBox, plan: SplitPlan) -> list:
    """Grid partition of an unbatched box, in row-major order over dims."""
    if len(plan.counts) != X0.n:
        raise ValueError(f"plan has {len(plan.counts)} counts, box has {X0.n} dims")
    if X0.batch_shape:
        raise ValueError("split_box needs an unbatched box")
    edges = [_edges(X0.lo[j], X0.hi[j], k) for j, k in enumerate(plan.counts)]
    grids = torch.meshgrid(*[torch.arange(k) for k in plan.counts], indexing="ij")
    idx = torch.stack([g.reshape(-1) for g in grids], -1)
    out = []
    for row in idx.tolist():
        lo = torch.stack([edges[j][i] for j, i in enumerate(row)])
        hi = torch.stack([edges[j][i + 1] for j, i in enumerate(row)])
        out.append(IntervalBox(lo, hi))
    return out


def hull_tubes(tube: ReachTube) -> ReachTube:
    """Per-step hull over the leading batch dim; any diverged part poisons the step."""
    lo = tube.lo.min(dim=0).values
    hi = tube.hi.max(dim=0).values
    div = tube.diverged.any(dim=0)
    lo, hi = mark_diverged(lo, hi, div)
    meta = dict(tube.meta, parts=int(tube.lo.shape[0]))
    return ReachTube(lo, hi, tube.t_lo, tube.t_hi, div, meta)


def reach_with_splitting(engine: Callable[[IntervalBox], ReachTube], X0: IntervalBox,
                         plan: SplitPlan, chunk: Optional[int] = None) -> ReachTube:
    """Run ``engine`` on every part of X0 (as one batch, or in chunks) and hull.

    ``engine`` maps a batched box (P, n) to a batched tube.
    """
    parts = split_box(X0, plan)
    if plan.total == 1:
        return engine(X0)
    chunk = chunk or len(parts)
    tubes = []
    for s in range(0, len(parts), chunk):
        tubes.append(hull_tubes(engine(stack_boxes(parts[s:s + chunk]))))
    if len(tubes) == 1:
        return tubes[0]
    lo = torch.stack([t.lo for t in tubes])
    hi = torch.stack([t.hi for t in tubes])
    div = torch.stack([t.diverged for t in tubes])
    out = hull_tubes(ReachTube(lo, hi, tubes[0].t_lo, tubes[0].t_hi, div, tubes[0].meta))
    out.meta["parts"] = plan.total
    return out


def tube_volume(tube: ReachTube) -> torch.Tensor:
    """Sum of box widths over steps 1..N (the initial box is excluded).

    Per batch element; +inf where any step diverged.  Differentiable.
    """
    w = (tube.hi[..., 1:, :] - tube.lo[..., 1:, :]).sum((-1, -2))
    inf = torch.full_like(w, math.inf)
    return torch.where(tube.diverged.any(-1), inf, w)


# ---------------------------------------------------------------------------
# gradients


@dataclass
class Gradient:
    """d(objective)/d(params), flattened in the parameters' row-major layout."""

    values: torch.Tensor
    method: str
    value: float
    subgradient: bool = False
    shape: tuple = ()

    def as_shape(self) -> torch.Tensor:
        return self.values.reshape(self.shape)


def _scalar(obj: Callable, p: torch.Tensor) -> torch.Tensor:
    out = obj(p)
    if isinstance(out, ReachTube):
        out = tube_volume(out).sum()
    return out


def finite_difference_gradient(objective: Callable, params, rel_step: float = 1e-5) -> Gradient:
    """Central differences with step rel_step * max(1, |p_i|)."""
    p = as_tensor(params).detach()
    flat = p.reshape(-1)
    g = torch.zeros_like(flat)
    with torch.no_grad():
        f0 = float(_scalar(objective, p))
        for i in range(flat.numel()):
            h = rel_step * max(1.0, abs(float(flat[i])))
            e = torch.zeros_like(flat)
            e[i] = h
            fp = float(_scalar(objective, (flat + e).reshape(p.shape)))
            fm = float(_scalar(objective, (flat - e).reshape(p.shape)))
            g[i] = (fp - fm) / (2 * h)
    return Gradient(g, "finite_difference", f0, False, tuple(p.shape))


def _on_branch_boundary(objective, p, g, rel_step, tol, probes: int = 2) -> bool:
    """Compare directional derivatives with central differences along the
    gradient and a few fixed sign vectors; a kink shows up as disagreement."""
    gen = torch.Generator().manual_seed(0)
    dirs = [g.reshape(p.shape)]
    for _ in range(probes):
        dirs.append((torch.randint(0, 2, p.shape, generator=gen) * 2 - 1).to(DTYPE))
    h = rel_step * max(1.0, float(p.abs().max()))
    gnorm = float(g.norm())
    for d in dirs:
        d = d / d.norm()
        with torch.no_grad():
            fp = float(_scalar(objective, p + h * d))
            fm = float(_scalar(objective, p - h * d))
        fd = (fp - fm) / (2 * h)
        if abs(fd - float((g * d.reshape(-1)).sum())) > tol * gnorm:
            return True
    return False


def grad_tube_volume(objective: Callable, params, method: str = "reverse_mode",
                     check_branch: bool = True, rel_step: float = 1e-5,
                     branch_tol: float = 1e-5) -> Gradient:
    """Gradient of tube volume (or any scalar) with respect to ``params``.

    ``objective`` maps a parameter tensor to a ReachTube (its volume is used)
    or to a scalar tensor.  With ``reverse_mode``, discrete choices taken in
    the primal pass (activation patterns, enlargement counts, acceptance)
    stay fixed while differentiating, as autograd records only the branch
    taken.  ``check_branch`` compares directional derivatives with central
    differences; disagreement means the point sits on a branch boundary and
    the result is flagged as a subgradient.
    """
    if method == "finite_difference":
        return finite_difference_gradient(objective, params, rel_step)
    if method != "reverse_mode":
        raise ValueError(f"unknown gradient method {method!r}")
    p = as_tensor(params).detach().clone().requires_grad_(True)
    f = _scalar(objective, p)
    if not torch.isfinite(f):
        raise ValueError("objective is not finite at the evaluation point")
    (g,) = torch.autograd.grad(f, p, allow_unused=True)
    g = torch.zeros_like(p) if g is None else g
    g = g.detach().reshape(-1)
    if not bool(torch.isfinite(g).all()):
        raise ValueError("gradient has non-finite entries")
    sub = False
    if check_branch and float(g.abs().max()) > 0:
        sub = _on_branch_boundary(objective, p.detach(), g, rel_step, branch_tol)
    return Gradient(g, method, float(f.detach()), sub, tuple(p.shape))


@dataclass
class RefineResult:
    x: torch.Tensor
    value: float
    initial_value: float
    history: list = field(default_factory=list)
    no_progress: bool = False


def _project(x, lower, upper):
    if lower is not None:
        x = torch.maximum(x, as_tensor(lower))
    if upper is not None:
        x = torch.minimum(x, as_tensor(upper))
    return x


def gradient_refine(objective: Callable, x0, iters: int = 20, lower=None, upper=None,
                    step: float = 1.0, shrink: float = 0.5, grow: float = 2.0,
                    max_backtracks: int = 30) -> RefineResult:
    """Projected gradient descent with a sufficient-decrease line search.

    The objective never increases; the step grows after each accepted move
    and shrinks until the projected move passes the decrease test.
    """
    x = _project(as_tensor(x0).detach(), lower, upper)

    def value_and_grad(v):
        g = grad_tube_volume(objective, v, check_branch=False)
        return g.value, g.as_shape()

    f, g = value_and_grad(x)
    f_init = f
    history = [f]
    t = step
    moved = False
    for _ in range(iters):
        accepted = False
        for _ in range(max_backtracks):
            x_new = _project(x - t * g, lower, upper)
            dx = x_new - x
            if float(dx.abs().max()) == 0.0:
                break
            with torch.no_grad():
                f_new = float(_scalar(objective, x_new))
            bound = f + float((g * dx).sum()) + float((dx * dx).sum()) / (2 * t)
            if math.isfinite(f_new) and f_new <= bound and f_new < f:
                accepted = True
                break
            t *= shrink
        if not accepted:
            break
        x = x_new
        moved = True
        f, g = value_and_grad(x)
        history.append(f)
        t *= grow
    return RefineResult(x, f, f_init, history, not moved)
