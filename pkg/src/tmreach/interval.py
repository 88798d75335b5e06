"""Interval arithmetic on torch tensors.

Intervals are carried as pairs of tensors ``(lo, hi)`` with arbitrary leading
batch dimensions, so the same kernels serve scalar intervals, boxes, and
batches of boxes.  Everything is float64 and differentiable through autograd.

By default endpoints use round-to-nearest.  Inside ``outward_rounding()`` each
primitive kernel moves its result one representable step outward, which makes
the enclosure hold under floating point as well.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

DTYPE = torch.float64

_OUTWARD = False


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def set_outward_rounding(enabled: bool) -> None:
    global _OUTWARD
    _OUTWARD = bool(enabled)


def outward_rounding_enabled() -> bool:
    return _OUTWARD


@contextlib.contextmanager
def outward_rounding(enabled: bool = True):
    global _OUTWARD
    old = _OUTWARD
    _OUTWARD = bool(enabled)
    try:
        yield
    finally:
        _OUTWARD = old


def _step_down(x: torch.Tensor) -> torch.Tensor:
    d = x.detach()
    return x + (torch.nextafter(d, torch.full_like(d, -math.inf)) - d)


def _step_up(x: torch.Tensor) -> torch.Tensor:
    d = x.detach()
    return x + (torch.nextafter(d, torch.full_like(d, math.inf)) - d)


def round_out(lo: torch.Tensor, hi: torch.Tensor):
    """Apply the outward step when sound rounding is on; identity otherwise."""
    if not _OUTWARD:
        return lo, hi
    return _step_down(lo), _step_up(hi)


# ---------------------------------------------------------------------------
# tensor kernels


def iadd(alo, ahi, blo, bhi):
    return round_out(alo + blo, ahi + bhi)


def isub(alo, ahi, blo, bhi):
    return round_out(alo - bhi, ahi - blo)


def imul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = torch.minimum(torch.minimum(p1, p2), torch.minimum(p3, p4))
    hi = torch.maximum(torch.maximum(p1, p2), torch.maximum(p3, p4))
    return round_out(lo, hi)


def iscale(k, lo, hi):
    """Point factor times interval."""
    a, b = k * lo, k * hi
    return round_out(torch.minimum(a, b), torch.maximum(a, b))


def itime(lo, hi, t0: float, t1: float):
    """Interval times the time interval [t0, t1] with 0 <= t0 <= t1."""
    return imul(lo, hi, torch.full_like(lo, t0), torch.full_like(hi, t1))


def isq(lo, hi):
    a, b = lo * lo, hi * hi
    mx = torch.maximum(a, b)
    mn = torch.where((lo <= 0) & (hi >= 0), torch.zeros_like(a), torch.minimum(a, b))
    return round_out(mn, mx)


def matvec(M: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """M (..., p, q) times v (..., q).

    Written as a row-wise reduction so each batch element gets the same
    floating-point result as an unbatched call (bmm with one column does not).
    """
    return (M * v.unsqueeze(-2)).sum(-1)


def matmul(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Batch-invariant A @ B: element i of a batched call equals the unbatched call.

    torch picks different kernels (and reduction blockings) depending on the
    batch layout, so batched products run one matrix at a time.
    """
    if A.dim() == 2 and B.dim() == 2:
        return A @ B
    shape = torch.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    A2 = A.expand(shape + A.shape[-2:]).reshape((-1,) + A.shape[-2:])
    B2 = B.expand(shape + B.shape[-2:]).reshape((-1,) + B.shape[-2:])
    if len(A2) == 0:
        return A2 @ B2
    out = torch.stack([a @ b for a, b in zip(A2, B2)])
    return out.reshape(shape + out.shape[-2:])


def imatvec(M: torch.Tensor, lo: torch.Tensor, hi: torch.Tensor):
    """Point matrix (..., p, q) times interval vector (..., q) -> (..., p).

    Uses the midpoint/radius form, which is exact for a point matrix.
    """
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    c = matvec(M, mid)
    r = matvec(M.abs(), rad)
    return round_out(c - r, c + r)


def ihull(alo, ahi, blo, bhi):
    return torch.minimum(alo, blo), torch.maximum(ahi, bhi)


_TWO_PI = 2.0 * math.pi


def _contains_point(lo, hi, offset):
    # does [lo, hi] contain offset + 2*pi*k for some integer k
    k = torch.ceil((lo.detach() - offset) / _TWO_PI)
    return offset + _TWO_PI * k <= hi.detach()


def isin(lo, hi):
    s_lo, s_hi = torch.sin(lo), torch.sin(hi)
    mn = torch.minimum(s_lo, s_hi)
    mx = torch.maximum(s_lo, s_hi)
    wide = (hi - lo).detach() >= _TWO_PI
    top = _contains_point(lo, hi, 0.5 * math.pi) | wide
    bot = _contains_point(lo, hi, -0.5 * math.pi) | wide
    mx = torch.where(top, torch.ones_like(mx), mx)
    mn = torch.where(bot, -torch.ones_like(mn), mn)
    return round_out(mn, mx)


def icos(lo, hi):
    c_lo, c_hi = torch.cos(lo), torch.cos(hi)
    mn = torch.minimum(c_lo, c_hi)
    mx = torch.maximum(c_lo, c_hi)
    wide = (hi - lo).detach() >= _TWO_PI
    top = _contains_point(lo, hi, 0.0) | wide
    bot = _contains_point(lo, hi, math.pi) | wide
    mx = torch.where(top, torch.ones_like(mx), mx)
    mn = torch.where(bot, -torch.ones_like(mn), mn)
    return round_out(mn, mx)


def _in_half_period(lo, hi):
    lim = 0.5 * math.pi
    return (lo > -lim) & (hi < lim) & torch.isfinite(lo) & torch.isfinite(hi)


def itan(lo, hi):
    """tan on a subset of (-pi/2, pi/2); outside that range the result is unbounded."""
    ok = _in_half_period(lo, hi)
    inf = torch.full_like(lo, math.inf)
    l = torch.where(ok, torch.tan(torch.where(ok, lo, torch.zeros_like(lo))), -inf)
    h = torch.where(ok, torch.tan(torch.where(ok, hi, torch.zeros_like(hi))), inf)
    return round_out(l, h)


def isec(lo, hi):
    """sec = 1/cos on a subset of (-pi/2, pi/2); convex with minimum 1 at 0."""
    ok = _in_half_period(lo, hi)
    zl = torch.where(ok, lo, torch.zeros_like(lo))
    zh = torch.where(ok, hi, torch.zeros_like(hi))
    a, b = 1.0 / torch.cos(zl), 1.0 / torch.cos(zh)
    mx = torch.maximum(a, b)
    mn = torch.where((zl <= 0) & (zh >= 0), torch.ones_like(a), torch.minimum(a, b))
    inf = torch.full_like(lo, math.inf)
    return round_out(torch.where(ok, mn, -inf), torch.where(ok, mx, inf))


def contains(outer_lo, outer_hi, inner_lo, inner_hi) -> torch.Tensor:
    return (outer_lo <= inner_lo) & (inner_hi <= outer_hi)


# ---------------------------------------------------------------------------
# scalar intervals


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def diverged(self) -> bool:
        return not (math.isfinite(self.lo) and math.isfinite(self.hi))

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def subset_of(self, other: "Interval") -> bool:
        return other.lo <= self.lo and self.hi <= other.hi


def _scalar_op(kernel, a: Interval, b: Interval) -> Interval:
    lo, hi = kernel(as_tensor(a.lo), as_tensor(a.hi), as_tensor(b.lo), as_tensor(b.hi))
    lo, hi = float(lo), float(hi)
    if math.isnan(lo) or math.isnan(hi):
        lo, hi = -math.inf, math.inf
    return Interval(lo, hi)


def iv_add(a: Interval, b: Interval) -> Interval:
    return _scalar_op(iadd, a, b)


def iv_mul(a: Interval, b: Interval) -> Interval:
    return _scalar_op(imul, a, b)


# ---------------------------------------------------------------------------
# boxes


class IntervalBox:
    """Axis-aligned box, possibly batched: ``lo`` and ``hi`` have shape (..., n)."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        lo, hi = as_tensor(lo), as_tensor(hi)
        if lo.shape != hi.shape:
            raise ValueError(f"lo/hi shape mismatch {tuple(lo.shape)} vs {tuple(hi.shape)}")
        if lo.dim() == 0:
            lo, hi = lo.reshape(1), hi.reshape(1)
        if bool((lo.detach() > hi.detach()).any()):
            raise ValueError("box has lo > hi")
        self.lo = lo
        self.hi = hi

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "IntervalBox":
        pairs = [tuple(map(float, p)) for p in pairs]
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def to_pairs(self) -> list:
        if self.lo.dim() != 1:
            raise ValueError("to_pairs needs an unbatched box")
        return [[float(a), float(b)] for a, b in zip(self.lo.tolist(), self.hi.tolist())]

    def to_json(self) -> str:
        return json.dumps(self.to_pairs())

    @classmethod
    def from_json(cls, text: str) -> "IntervalBox":
        return cls.from_pairs(json.loads(text))

    @property
    def n(self) -> int:
        return self.lo.shape[-1]

    @property
    def batch_shape(self):
        return self.lo.shape[:-1]

    @property
    def dims(self) -> list:
        return [Interval(a, b) for a, b in self.to_pairs()]

    @property
    def center(self) -> torch.Tensor:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> torch.Tensor:
        return 0.5 * (self.hi - self.lo)

    @property
    def width(self) -> torch.Tensor:
        return self.hi - self.lo

    @property
    def diverged(self) -> torch.Tensor:
        return ~(torch.isfinite(self.lo).all(-1) & torch.isfinite(self.hi).all(-1))

    def __getitem__(self, idx) -> "IntervalBox":
        return IntervalBox(self.lo[idx], self.hi[idx])

    def __len__(self) -> int:
        return self.lo.shape[0]

    def hull(self, other: "IntervalBox") -> "IntervalBox":
        return IntervalBox(*ihull(self.lo, self.hi, other.lo, other.hi))

    def subset_of(self, other: "IntervalBox") -> bool:
        return bool(contains(other.lo, other.hi, self.lo, self.hi).all())

    def detach(self) -> "IntervalBox":
        return IntervalBox(self.lo.detach(), self.hi.detach())

    def __eq__(self, other) -> bool:
        if not isinstance(other, IntervalBox):
            return NotImplemented
        return torch.equal(self.lo, other.lo) and torch.equal(self.hi, other.hi)

    def __repr__(self) -> str:
        if self.lo.dim() == 1:
            return f"IntervalBox({self.to_pairs()})"
        return f"IntervalBox(batch={tuple(self.batch_shape)}, n={self.n})"


def stack_boxes(boxes: Sequence[IntervalBox]) -> IntervalBox:
    return IntervalBox(torch.stack([b.lo for b in boxes]), torch.stack([b.hi for b in boxes]))


def box_from_center(center, radius) -> IntervalBox:
    c = as_tensor(center)
    r = as_tensor(radius)
    if bool((r.detach() < 0).any()):
        raise ValueError("radius must be non-negative")
    r = torch.broadcast_to(r, c.shape) if r.dim() <= c.dim() else r
    return IntervalBox(c - r, c + r)


def box_contains(box: IntervalBox, point, tol: float = 0.0) -> bool:
    p = as_tensor(point)
    if p.shape[-1] != box.n:
        raise ValueError(f"point has dimension {p.shape[-1]}, box has {box.n}")
    ok = (box.lo - tol <= p) & (p <= box.hi + tol)
    return bool(ok.all())


def box_volume_proxy(box: IntervalBox) -> torch.Tensor:
    """Sum of per-dimension widths; +inf for diverged boxes."""
    w = (box.hi - box.lo).sum(-1)
    return torch.where(box.diverged, torch.full_like(w, math.inf), w)
