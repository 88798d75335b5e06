"""Reach tubes: time-indexed boxes with serialization helpers."""

from __future__ import annotations

import csv
import io
import json
import math
from typing import Sequence

import torch

from .interval import DTYPE, IntervalBox, as_tensor


class ReachTube:
    """Boxes for steps 0..N, stored as ``lo``/``hi`` tensors of shape (..., N+1, n).

    Box 0 is the initial set.  ``t_lo``/``t_hi`` give the time span each box
    covers (equal endpoints for discrete-time tubes).  ``diverged`` marks
    steps from the first failure onward.
    """

    def __init__(self, lo, hi, t_lo=None, t_hi=None, diverged=None, meta=None):
        self.lo = as_tensor(lo)
        self.hi = as_tensor(hi)
        steps = self.lo.shape[-2]
        if t_lo is None:
            t_lo = torch.arange(steps, dtype=DTYPE)
        self.t_lo = as_tensor(t_lo)
        self.t_hi = self.t_lo.clone() if t_hi is None else as_tensor(t_hi)
        if diverged is None:
            diverged = ~(torch.isfinite(self.lo).all(-1) & torch.isfinite(self.hi).all(-1))
        self.diverged = diverged
        self.meta = dict(meta or {})

    @property
    def steps(self) -> int:
        """Number of steps after the initial box."""
        return self.lo.shape[-2] - 1

    @property
    def n(self) -> int:
        return self.lo.shape[-1]

    @property
    def batch_shape(self):
        return self.lo.shape[:-2]

    def box(self, i: int) -> IntervalBox:
        return IntervalBox(self.lo[..., i, :], self.hi[..., i, :])

    @property
    def boxes(self) -> list:
        return [self.box(i) for i in range(self.steps + 1)]

    def __getitem__(self, idx) -> "ReachTube":
        """Select batch elements."""
        return ReachTube(self.lo[idx], self.hi[idx], self.t_lo, self.t_hi,
                         self.diverged[idx], self.meta)

    def __len__(self) -> int:
        return self.lo.shape[0]

    @property
    def any_diverged(self) -> bool:
        return bool(self.diverged.any())

    def widths(self) -> torch.Tensor:
        return self.hi - self.lo

    def dims(self, idx) -> "ReachTube":
        return ReachTube(self.lo[..., idx], self.hi[..., idx], self.t_lo, self.t_hi,
                         self.diverged, self.meta)

    def detach(self) -> "ReachTube":
        return ReachTube(self.lo.detach(), self.hi.detach(), self.t_lo, self.t_hi,
                         self.diverged, self.meta)

    def contains(self, step: int, points, tol: float = 0.0) -> torch.Tensor:
        """Which of ``points`` (..., k, n) lie in box ``step`` (batch-aligned)."""
        p = as_tensor(points)
        lo = self.lo[..., step, :].unsqueeze(-2)
        hi = self.hi[..., step, :].unsqueeze(-2)
        return ((lo - tol <= p) & (p <= hi + tol)).all(-1)

    # -- serialization -------------------------------------------------------------

    def to_csv(self, with_time: bool = True) -> str:
        if len(self.batch_shape):
            raise ValueError("CSV export needs an unbatched tube")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        lo, hi = self.lo.detach().tolist(), self.hi.detach().tolist()
        t_lo, t_hi = self.t_lo.tolist(), self.t_hi.tolist()
        if with_time:
            w.writerow(["step", "t_lo", "t_hi", "dim", "lo", "hi"])
        else:
            w.writerow(["step", "dim", "lo", "hi"])
        for s in range(self.steps + 1):
            for j in range(self.n):
                if with_time:
                    w.writerow([s, repr(t_lo[s]), repr(t_hi[s]), j, repr(lo[s][j]), repr(hi[s][j])])
                else:
                    w.writerow([s, j, repr(lo[s][j]), repr(hi[s][j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReachTube":
        rows = list(csv.DictReader(io.StringIO(text)))
        steps = max(int(r["step"]) for r in rows) + 1
        n = max(int(r["dim"]) for r in rows) + 1
        lo = [[0.0] * n for _ in range(steps)]
        hi = [[0.0] * n for _ in range(steps)]
        t_lo = [float(s) for s in range(steps)]
        t_hi = list(t_lo)
        for r in rows:
            s, j = int(r["step"]), int(r["dim"])
            lo[s][j] = float(r["lo"])
            hi[s][j] = float(r["hi"])
            if "t_lo" in r:
                t_lo[s], t_hi[s] = float(r["t_lo"]), float(r["t_hi"])
        return cls(lo, hi, t_lo, t_hi)

    def to_dict(self) -> dict:
        if len(self.batch_shape):
            raise ValueError("JSON export needs an unbatched tube")
        return {
            "boxes": [IntervalBox(self.lo[i].detach(), self.hi[i].detach()).to_pairs()
                      if not bool(self.diverged[i]) else
                      [[-math.inf, math.inf]] * self.n
                      for i in range(self.steps + 1)],
            "t_lo": self.t_lo.tolist(),
            "t_hi": self.t_hi.tolist(),
            "diverged": [bool(d) for d in self.diverged.tolist()],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=str)

    @classmethod
    def from_dict(cls, d: dict) -> "ReachTube":
        b = as_tensor(d["boxes"])
        return cls(b[..., 0], b[..., 1], d["t_lo"], d["t_hi"],
                   torch.tensor(d["diverged"], dtype=torch.bool), d.get("meta"))

    @classmethod
    def from_json(cls, text: str) -> "ReachTube":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"ReachTube(steps={self.steps}, n={self.n}, batch={tuple(self.batch_shape)})"


def stack_tubes(tubes: Sequence[ReachTube]) -> ReachTube:
    t0 = tubes[0]
    return ReachTube(torch.stack([t.lo for t in tubes]), torch.stack([t.hi for t in tubes]),
                     t0.t_lo, t0.t_hi, torch.stack([t.diverged for t in tubes]), t0.meta)


def mark_diverged(lo, hi, diverged):
    """Blank out diverged steps to (-inf, inf) so downstream volume reports +inf."""
    inf = torch.full_like(lo, math.inf)
    d = diverged.unsqueeze(-1)
    return torch.where(d, -inf, lo), torch.where(d, inf, hi)
