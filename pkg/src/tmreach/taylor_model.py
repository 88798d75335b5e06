"""Fixed-shape Taylor models.

A model over the unit box z in [-1, 1]^nz and local time tau in [0, h] is

    F(z, tau) = c + Az z + at tau + B (tau z)  (+)  [lo, hi]

with ``Az`` the state columns and ``at`` the time column of the ``A`` matrix.
Every product or intrinsic that would leave this shape is bounded over the
domain and moved into the interval remainder, so the tensors never grow.

All fields carry the same leading batch dimensions, which lets one call push
a whole population of sets through the arithmetic.
"""

from __future__ import annotations

import json
import math
from typing import Sequence

import torch

from .interval import (
    DTYPE,
    IntervalBox,
    Interval,
    as_tensor,
    iadd,
    icos,
    imatvec,
    matmul,
    matvec,
    imul,
    iscale,
    isec,
    isin,
    isq,
    itan,
    itime,
    round_out,
)


def _row_bound_lin(Az, B, t0: float, t1: float):
    """Radius of (Az + B tau) z over the unit box, tau in [t0, t1]."""
    a0 = Az + B * t0 if t0 != 0.0 else Az
    a1 = Az + B * t1
    return torch.maximum(a0.abs(), a1.abs()).sum(-1)


def _quad_bound(u, v):
    """Bound of (u.z)(v.z) over the unit box, rowwise; u, v of shape (..., n, nz)."""
    d = u * v
    lo = d.clamp(max=0).sum(-1)
    hi = d.clamp(min=0).sum(-1)
    off = u.abs().sum(-1) * v.abs().sum(-1) - d.abs().sum(-1)
    off = off.clamp(min=0)
    return lo - off, hi + off


class TaylorModel:
    __slots__ = ("c", "Az", "at", "B", "lo", "hi", "h")

    def __init__(self, c, Az, at, B, lo, hi, h: float = 0.0):
        self.c = c
        self.Az = Az
        self.at = at
        self.B = B
        self.lo = lo
        self.hi = hi
        self.h = float(h)

    # -- construction ------------------------------------------------------

    @classmethod
    def constant(cls, c, nz: int, h: float = 0.0) -> "TaylorModel":
        c = as_tensor(c)
        z = torch.zeros(c.shape + (nz,), dtype=DTYPE)
        zc = torch.zeros_like(c)
        return cls(c, z, zc, z, zc, zc, h)

    @classmethod
    def from_interval(cls, lo, hi, nz: int, h: float = 0.0) -> "TaylorModel":
        """Pure interval (no polynomial dependence); used by the interval baselines."""
        lo, hi = as_tensor(lo), as_tensor(hi)
        c = 0.5 * (lo + hi)
        return cls.constant(c, nz, h).with_remainder(lo - c, hi - c)

    # -- shape ---------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.c.shape[-1]

    @property
    def nz(self) -> int:
        return self.Az.shape[-1]

    @property
    def batch_shape(self):
        return self.c.shape[:-1]

    @property
    def A(self) -> torch.Tensor:
        return torch.cat([self.Az, self.at.unsqueeze(-1)], dim=-1)

    def check_shape(self) -> None:
        n, nz, bs = self.n, self.nz, tuple(self.batch_shape)
        expect = {
            "c": bs + (n,),
            "Az": bs + (n, nz),
            "at": bs + (n,),
            "B": bs + (n, nz),
            "lo": bs + (n,),
            "hi": bs + (n,),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise AssertionError(f"TM field {name} has shape {got}, expected {shape}")

    def _like(self, c, Az, at, B, lo, hi) -> "TaylorModel":
        return TaylorModel(c, Az, at, B, lo, hi, self.h)

    # -- remainder helpers -----------------------------------------------------

    def with_remainder(self, lo, hi) -> "TaylorModel":
        return self._like(self.c, self.Az, self.at, self.B, lo, hi)

    def add_remainder(self, lo, hi) -> "TaylorModel":
        nl, nh = iadd(self.lo, self.hi, lo, hi)
        return self.with_remainder(nl, nh)

    def poly(self) -> "TaylorModel":
        z = torch.zeros_like(self.c)
        return self.with_remainder(z, z)

    # -- evaluation --------------------------------------------------------------

    def poly_offsets(self, t0: float = 0.0, t1: float | None = None):
        """Range of the polynomial part minus c over the domain, tau in [t0, t1]."""
        t1 = self.h if t1 is None else t1
        r = _row_bound_lin(self.Az, self.B, t0, t1)
        a, b = self.at * t0, self.at * t1
        return torch.minimum(a, b) - r, torch.maximum(a, b) + r

    def bound_tensors(self, t0: float = 0.0, t1: float | None = None):
        plo, phi = self.poly_offsets(t0, t1)
        lo, hi = iadd(plo, phi, self.lo, self.hi)
        return round_out(self.c + lo, self.c + hi)

    def bound(self, t0: float = 0.0, t1: float | None = None) -> IntervalBox:
        return IntervalBox(*self.bound_tensors(t0, t1))

    def at_time(self, t: float) -> "TaylorModel":
        """Freeze tau = t, leaving a linear model (B = 0, no time column)."""
        z = torch.zeros_like(self.at)
        return TaylorModel(self.c + self.at * t, self.Az + self.B * t, z,
                           torch.zeros_like(self.B), self.lo, self.hi, 0.0)

    def to_linear(self) -> "TaylorModel":
        """Tau-frozen linear model valid for every tau in [0, h]."""
        hm = 0.5 * self.h
        if hm == 0.0:
            return TaylorModel(self.c, self.Az, torch.zeros_like(self.at),
                               torch.zeros_like(self.B), self.lo, self.hi, 0.0)
        spread = self.at.abs() * hm + self.B.abs().sum(-1) * hm
        lo, hi = iadd(self.lo, self.hi, -spread, spread)
        return TaylorModel(self.c + self.at * hm, self.Az + self.B * hm,
                           torch.zeros_like(self.at), torch.zeros_like(self.B), lo, hi, 0.0)

    def sample(self, z, tau, r=None):
        """Concrete point values at z (..., nz), tau (...,), remainder point r."""
        tau = as_tensor(tau).unsqueeze(-1)
        z = as_tensor(z)
        out = self.c + matvec(self.Az, z) + self.at * tau
        out = out + tau * matvec(self.B, z)
        if r is not None:
            out = out + r
        return out

    # -- rows ----------------------------------------------------------------------

    def rows(self, idx) -> "TaylorModel":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1) if idx != -1 else slice(-1, None)
        elif not isinstance(idx, slice):
            idx = torch.as_tensor(idx, dtype=torch.long)
        return self._like(self.c[..., idx], self.Az[..., idx, :], self.at[..., idx],
                          self.B[..., idx, :], self.lo[..., idx], self.hi[..., idx])

    def __getitem__(self, key) -> "TaylorModel":
        # x[..., i] selects state rows, mirroring tensor indexing in field code
        if isinstance(key, tuple) and len(key) == 2 and key[0] is Ellipsis:
            return self.rows(key[1])
        raise IndexError("TaylorModel supports only x[..., rows] indexing")

    @staticmethod
    def cat(parts: Sequence["TaylorModel"]) -> "TaylorModel":
        h = parts[0].h
        return TaylorModel(
            torch.cat([p.c for p in parts], -1),
            torch.cat([p.Az for p in parts], -2),
            torch.cat([p.at for p in parts], -1),
            torch.cat([p.B for p in parts], -2),
            torch.cat([p.lo for p in parts], -1),
            torch.cat([p.hi for p in parts], -1),
            h,
        )

    def select(self, mask: torch.Tensor, other: "TaylorModel") -> "TaylorModel":
        """Batchwise choice: self where mask else other (mask has batch shape)."""
        m1 = mask.unsqueeze(-1)
        m2 = m1.unsqueeze(-1)
        return self._like(
            torch.where(m1, self.c, other.c), torch.where(m2, self.Az, other.Az),
            torch.where(m1, self.at, other.at), torch.where(m2, self.B, other.B),
            torch.where(m1, self.lo, other.lo), torch.where(m1, self.hi, other.hi))

    # -- linear algebra -------------------------------------------------------------

    def linear_map(self, M) -> "TaylorModel":
        """Row mixing M @ F for a point matrix M of shape (..., p, n)."""
        M = as_tensor(M)
        lo, hi = imatvec(M, self.lo, self.hi)
        return self._like(matvec(M, self.c), matmul(M, self.Az),
                          matvec(M, self.at), matmul(M, self.B), lo, hi)

    # -- arithmetic -------------------------------------------------------------------

    def __neg__(self) -> "TaylorModel":
        return self._like(-self.c, -self.Az, -self.at, -self.B, -self.hi, -self.lo)

    def __add__(self, other) -> "TaylorModel":
        if isinstance(other, TaylorModel):
            lo, hi = iadd(self.lo, self.hi, other.lo, other.hi)
            return self._like(self.c + other.c, self.Az + other.Az, self.at + other.at,
                              self.B + other.B, lo, hi)
        k = as_tensor(other)
        return self._like(self.c + k, self.Az, self.at, self.B, self.lo, self.hi)

    __radd__ = __add__

    def __sub__(self, other) -> "TaylorModel":
        return self + (-other)

    def __rsub__(self, other) -> "TaylorModel":
        return (-self) + other

    def scale(self, k) -> "TaylorModel":
        k = as_tensor(k)
        lo, hi = iscale(k, self.lo, self.hi)
        k2 = k.unsqueeze(-1) if k.dim() > 0 else k
        return self._like(self.c * k, self.Az * k2, self.at * k, self.B * k2, lo, hi)

    def __mul__(self, other) -> "TaylorModel":
        if isinstance(other, TaylorModel):
            return _tm_mul(self, other)
        return self.scale(other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "TaylorModel":
        if isinstance(other, TaylorModel):
            return self * other.reciprocal()
        return self.scale(1.0 / as_tensor(other))

    def square(self) -> "TaylorModel":
        return _tm_mul(self, self)

    # -- intrinsics -------------------------------------------------------------------

    def _lagrange(self, f0, f1, f2_interval) -> "TaylorModel":
        """g(p) ~ g(c) + g'(c)(p - c) with a second-order remainder over the range of p."""
        x0 = self.c
        plo, phi = self.poly_offsets()
        dlo, dhi = iadd(plo, phi, self.lo, self.hi)
        xl = torch.minimum(x0, x0 + dlo)
        xh = torch.maximum(x0, x0 + dhi)
        g2lo, g2hi = f2_interval(xl, xh)
        d2lo, d2hi = isq(dlo, dhi)
        rlo, rhi = imul(g2lo, g2hi, d2lo, d2hi)
        rlo, rhi = 0.5 * rlo, 0.5 * rhi
        slope = f1(x0)
        lin_lo, lin_hi = iscale(slope, self.lo, self.hi)
        lo, hi = iadd(lin_lo, lin_hi, rlo, rhi)
        s2 = slope.unsqueeze(-1)
        return self._like(f0(x0), self.Az * s2, self.at * slope, self.B * s2, lo, hi)

    def sin(self) -> "TaylorModel":
        return self._lagrange(torch.sin, torch.cos, lambda l, h: _neg(*isin(l, h)))

    def cos(self) -> "TaylorModel":
        return self._lagrange(torch.cos, lambda x: -torch.sin(x), lambda l, h: _neg(*icos(l, h)))

    def tan(self) -> "TaylorModel":
        def d2(l, h):
            tl, th = itan(l, h)
            sl, sh = isec(l, h)
            s2l, s2h = isq(sl, sh)
            pl, ph = imul(tl, th, s2l, s2h)
            return 2.0 * pl, 2.0 * ph

        return self._lagrange(torch.tan, lambda x: 1.0 / torch.cos(x) ** 2, d2)

    def sec(self) -> "TaylorModel":
        def d2(l, h):
            tl, th = itan(l, h)
            sl, sh = isec(l, h)
            t2 = isq(tl, th)
            s2 = isq(sl, sh)
            a = iadd(*t2, *s2)
            return imul(sl, sh, *a)

        return self._lagrange(lambda x: 1.0 / torch.cos(x),
                              lambda x: torch.tan(x) / torch.cos(x), d2)

    def reciprocal(self) -> "TaylorModel":
        def d2(l, h):
            ok = (l > 0) | (h < 0)
            inf = torch.full_like(l, math.inf)
            a, b = 2.0 / l ** 3, 2.0 / h ** 3
            return (torch.where(ok, torch.minimum(a, b), -inf),
                    torch.where(ok, torch.maximum(a, b), inf))

        return self._lagrange(lambda x: 1.0 / x, lambda x: -1.0 / x ** 2, d2)

    # -- calculus ------------------------------------------------------------------------

    def integrate(self) -> "TaylorModel":
        """Antiderivative over [0, tau]; terms beyond the shape go to the remainder."""
        h = self.h
        half_h2 = 0.5 * h * h
        t2lo, t2hi = iscale(half_h2, torch.zeros_like(self.at), self.at)
        bz = self.B.abs().sum(-1) * half_h2
        elo, ehi = iadd(t2lo, t2hi, -bz, bz)
        rlo, rhi = itime(self.lo, self.hi, 0.0, h)
        lo, hi = iadd(elo, ehi, rlo, rhi)
        zero = torch.zeros_like(self.c)
        return self._like(zero, torch.zeros_like(self.Az), self.c, self.Az, lo, hi)

    # -- composition ------------------------------------------------------------------------

    def compose(self, inner: "TaylorModel") -> "TaylorModel":
        """self(z', tau) with z' = inner(z) for a linear inner map (no time terms)."""
        return tm_compose_affine(self, inner)

    # -- serialization ------------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "c": self.c.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "remainder": [[a, b] for a, b in zip(self.lo.reshape(-1).tolist(), self.hi.reshape(-1).tolist())],
            "horizon": self.h,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TaylorModel":
        A = as_tensor(d["A"])
        rem = as_tensor(d["remainder"])
        return cls(as_tensor(d["c"]), A[..., :-1], A[..., -1], as_tensor(d["B"]),
                   rem[:, 0], rem[:, 1], d["horizon"])

    def __repr__(self) -> str:
        return f"TaylorModel(n={self.n}, nz={self.nz}, batch={tuple(self.batch_shape)}, h={self.h})"


def _neg(lo, hi):
    return -hi, -lo


def _tm_mul(p: TaylorModel, q: TaylorModel) -> TaylorModel:
    h = max(p.h, q.h)
    c1, c2 = p.c, q.c
    a1, a2 = p.Az, q.Az
    t1, t2 = p.at, q.at
    b1, b2 = p.B, q.B
    c1e, c2e = c1.unsqueeze(-1), c2.unsqueeze(-1)

    c = c1 * c2
    Az = c1e * a2 + c2e * a1
    at = c1 * t2 + c2 * t1
    B = c1e * b2 + c2e * b1 + t1.unsqueeze(-1) * a2 + t2.unsqueeze(-1) * a1

    # terms outside the shape: z z, tau z z, tau^2, tau^2 z, tau^2 z z
    lo, hi = _quad_bound(a1, a2)
    ql1, qh1 = _quad_bound(a1, b2)
    ql2, qh2 = _quad_bound(b1, a2)
    lo, hi = iadd(lo, hi, *itime(*iadd(ql1, qh1, ql2, qh2), 0.0, h))
    h2 = h * h
    tt = t1 * t2
    lo, hi = iadd(lo, hi, *itime(tt, tt, 0.0, h2))
    tz = (t1.unsqueeze(-1) * b2 + t2.unsqueeze(-1) * b1).abs().sum(-1)
    lo, hi = iadd(lo, hi, *itime(-tz, tz, 0.0, h2))
    lo, hi = iadd(lo, hi, *itime(*_quad_bound(b1, b2), 0.0, h2))

    # remainder cross terms
    if p.h != q.h:
        p = TaylorModel(p.c, p.Az, p.at, p.B, p.lo, p.hi, h)
        q = TaylorModel(q.c, q.Az, q.at, q.B, q.lo, q.hi, h)
    pl, ph = p.poly_offsets()
    ql, qh = q.poly_offsets()
    P1 = (c1 + pl, c1 + ph)
    P2 = (c2 + ql, c2 + qh)
    r = imul(*P1, q.lo, q.hi)
    r = iadd(*r, *imul(*P2, p.lo, p.hi))
    r = iadd(*r, *imul(p.lo, p.hi, q.lo, q.hi))
    lo, hi = iadd(lo, hi, *r)
    return TaylorModel(c, Az, at, B, lo, hi, h)


# ---------------------------------------------------------------------------
# module-level operations


def build_linear_tm(box: IntervalBox, nz: int | None = None, h: float = 0.0) -> TaylorModel:
    """Affine model over the unit box reproducing ``box`` exactly.

    With ``nz`` larger than the box dimension the extra domain columns are zero;
    the engines use them as slots for symbolic remainders.
    """
    if bool(box.diverged.any()):
        raise ValueError("cannot build a Taylor model from a diverged box")
    n = box.n
    nz = n if nz is None else nz
    c = box.center
    rad = box.radius
    Az = torch.zeros(c.shape + (nz,), dtype=DTYPE)
    Az = Az + matmul(torch.diag_embed(rad, offset=0, dim1=-2, dim2=-1), _eye_pad(n, nz))
    zero = torch.zeros_like(c)
    return TaylorModel(c, Az, zero, torch.zeros_like(Az), zero, zero, h)


def _eye_pad(n: int, nz: int) -> torch.Tensor:
    e = torch.zeros(n, nz, dtype=DTYPE)
    k = min(n, nz)
    e[:k, :k] = torch.eye(k, dtype=DTYPE)
    return e


def tm_eval_interval(tm: TaylorModel, tau: Interval | None = None) -> IntervalBox:
    if tau is None:
        tau = Interval(0.0, tm.h)
    if tau.lo < 0 or tau.hi > tm.h * (1 + 1e-12) + 0.0:
        raise ValueError(f"tau {tau} outside [0, {tm.h}]")
    return tm.bound(tau.lo, min(tau.hi, tm.h) if tm.h > 0 else tau.hi)


def tm_affine_image(tm: TaylorModel, M, d=None) -> TaylorModel:
    M = as_tensor(M)
    if M.shape[-1] != tm.n:
        raise ValueError(f"matrix with {M.shape[-1]} columns applied to a TM with {tm.n} rows")
    out = tm.linear_map(M)
    if d is not None:
        out = out + as_tensor(d)
    return out


def tm_compose_affine(outer: TaylorModel, inner: TaylorModel) -> TaylorModel:
    """Substitute z' = inner(z) into ``outer``.

    ``inner`` must be linear in z (no time terms); its remainder is pushed
    through |Az + B tau| of the outer model over the whole time range.
    """
    if outer.nz != inner.n:
        raise ValueError(f"outer domain has {outer.nz} dims, inner map gives {inner.n}")
    M = inner.Az
    Az = matmul(outer.Az, M)
    B = matmul(outer.B, M)
    c = outer.c + matvec(outer.Az, inner.c)
    at = outer.at + matvec(outer.B, inner.c)
    # remainder of the inner map, through the outer linear coefficients
    mid = 0.5 * (inner.lo + inner.hi)
    rad = 0.5 * (inner.hi - inner.lo)
    coef_lo = outer.Az
    coef_hi = outer.Az + outer.B * outer.h
    m_lo = matvec(coef_lo, mid)
    m_hi = matvec(coef_hi, mid)
    r = matvec(torch.maximum(coef_lo.abs(), coef_hi.abs()), rad)
    # the midpoint term is linear in tau: bound it by its endpoint values
    lo, hi = torch.minimum(m_lo, m_hi) - r, torch.maximum(m_lo, m_hi) + r
    lo, hi = round_out(lo, hi)
    lo, hi = iadd(outer.lo, outer.hi, lo, hi)
    return TaylorModel(c, Az, at, B, lo, hi, outer.h)


def tm_truncate(tm: TaylorModel, tau2=None, tau2_z=None, zz=None, tau_zz=None) -> TaylorModel:
    """Fold explicit out-of-shape terms into the remainder.

    tau2: coefficients of tau^2, shape (..., n)
    tau2_z: coefficients of tau^2 z_j, shape (..., n, nz)
    zz: coefficients of z_i z_j, shape (..., n, nz, nz)
    tau_zz: coefficients of tau z_i z_j, shape (..., n, nz, nz)
    """
    h = tm.h
    lo, hi = torch.zeros_like(tm.c), torch.zeros_like(tm.c)
    if tau2 is not None:
        q = as_tensor(tau2)
        lo, hi = iadd(lo, hi, *itime(q, q, 0.0, h * h))
    if tau2_z is not None:
        r = as_tensor(tau2_z).abs().sum(-1)
        lo, hi = iadd(lo, hi, *itime(-r, r, 0.0, h * h))
    if zz is not None:
        lo, hi = iadd(lo, hi, *_matrix_quad_bound(as_tensor(zz)))
    if tau_zz is not None:
        lo, hi = iadd(lo, hi, *itime(*_matrix_quad_bound(as_tensor(tau_zz)), 0.0, h))
    return tm.add_remainder(lo, hi)


def _matrix_quad_bound(Q):
    """Bound z^T Q z over the unit box: diagonal terms z_i^2 in [0,1], others in [-1,1]."""
    diag = torch.diagonal(Q, dim1=-2, dim2=-1)
    off = Q.abs().sum((-1, -2)) - diag.abs().sum(-1)
    return diag.clamp(max=0).sum(-1) - off, diag.clamp(min=0).sum(-1) + off
