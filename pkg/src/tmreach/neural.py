"""Feed-forward networks and CROWN-style linear bounds with shared slopes.

Every activation is relaxed by two parallel lines (same slope, different
intercepts).  Backward substitution through parallel relaxations keeps the
lower and upper coefficient matrices identical, so a network's bound over a
Taylor-model input is again a linear Taylor model over the same variables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .interval import DTYPE, IntervalBox, as_tensor, imatvec, matmul, matvec, round_out
from .taylor_model import TaylorModel

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(tag: str, x):
    if tag == "relu":
        return torch.relu(x)
    if tag == "tanh":
        return torch.tanh(x)
    if tag == "identity":
        return x
    raise ValueError(f"unsupported activation {tag!r}")


class MLPNet:
    """Dense network; ``layers`` is a list of (W, b, activation) with W of shape (out, in)."""

    def __init__(self, layers: Sequence[tuple]):
        if not layers:
            raise ValueError("network needs at least one layer")
        fixed = []
        for W, b, act in layers:
            if act not in ACTIVATIONS:
                raise ValueError(f"unsupported activation {act!r}")
            fixed.append((as_tensor(W), as_tensor(b), act))
        for (W1, _, _), (W2, _, _) in zip(fixed, fixed[1:]):
            if W1.shape[-2] != W2.shape[-1]:
                raise ValueError("layer shapes do not chain")
        if fixed[-1][2] != "identity":
            raise ValueError("final activation must be identity")
        self.layers = fixed

    @classmethod
    def random(cls, sizes: Sequence[int], activation: str = "relu", generator=None,
               scale: float = 1.0) -> "MLPNet":
        """Uniform fan-in initialisation, like torch.nn.Linear's default."""
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = scale / math.sqrt(a)
            W = (torch.rand(b, a, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            bias = (torch.rand(b, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            act = activation if i < len(sizes) - 2 else "identity"
            layers.append((W, bias, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[-1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[-2]

    @property
    def hidden_sizes(self) -> list:
        return [W.shape[-2] for W, _, _ in self.layers[:-1]]

    def parameters(self) -> list:
        out = []
        for W, b, _ in self.layers:
            out.extend([W, b])
        return out

    def with_parameters(self, params: Sequence[torch.Tensor]) -> "MLPNet":
        it = iter(params)
        return MLPNet([(next(it), next(it), act) for _, _, act in self.layers])

    def requires_grad_(self, flag: bool = True) -> "MLPNet":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def detach(self) -> "MLPNet":
        return MLPNet([(W.detach().clone(), b.detach().clone(), a) for W, b, a in self.layers])

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1) for p in self.parameters()])

    def from_flat(self, flat: torch.Tensor) -> "MLPNet":
        params, k = [], 0
        for p in self.parameters():
            params.append(flat[k:k + p.numel()].reshape(p.shape))
            k += p.numel()
        return self.with_parameters(params)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for W, b, act in self.layers:
            x = _act(act, matvec(W, x) + b)
        return x

    def __call__(self, x):
        if isinstance(x, np.ndarray) or not isinstance(x, torch.Tensor):
            return self.forward(as_tensor(np.asarray(x))).detach().numpy()
        return self.forward(x)

    def fold_input(self, start: int, value) -> "MLPNet":
        """Freeze inputs [start:] to ``value`` by moving them into the first bias."""
        W, b, act = self.layers[0]
        v = as_tensor(value)
        b2 = b + matvec(W[..., start:], v)
        return MLPNet([(W[..., :start], b2, act)] + list(self.layers[1:]))

    # serialization

    def to_dict(self) -> dict:
        return {"layers": [
            {"rows": int(W.shape[0]), "cols": int(W.shape[1]),
             "weights": W.detach().reshape(-1).tolist(), "bias": b.detach().tolist(),
             "activation": act}
            for W, b, act in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MLPNet":
        layers = []
        for rec in d["layers"]:
            W = as_tensor(rec["weights"]).reshape(rec["rows"], rec["cols"])
            layers.append((W, as_tensor(rec["bias"]), rec["activation"]))
        return cls(layers)

    @classmethod
    def from_json(cls, text: str) -> "MLPNet":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MLPNet":
        with open(path) as f:
            return cls.from_json(f.read())


def affine_net(M, N=None, d=None) -> MLPNet:
    """Single identity layer computing M x + N u + d."""
    M = as_tensor(M)
    W = M if N is None else torch.cat([M, as_tensor(N)], dim=1)
    b = torch.zeros(M.shape[0], dtype=DTYPE) if d is None else as_tensor(d)
    return MLPNet([(W, b, "identity")])


# ---------------------------------------------------------------------------
# relaxations


@dataclass
class ActRelaxation:
    slope: torch.Tensor
    lower_intercept: torch.Tensor
    upper_intercept: torch.Tensor
    preact_lo: torch.Tensor
    preact_hi: torch.Tensor
    lower_slope: torch.Tensor | None = None  # set only for the non-parallel ablation

    @property
    def slope_lo(self):
        return self.slope if self.lower_slope is None else self.lower_slope


def _relu_relax(l, u, shared: bool) -> ActRelaxation:
    active = l >= 0
    inactive = u <= 0
    unstable = ~(active | inactive)
    denom = torch.where(unstable, u - l, torch.ones_like(u))
    s = torch.where(active, torch.ones_like(u), torch.where(inactive, torch.zeros_like(u), u / denom))
    # lowest and highest value of relu(x) - s x over [l, u]; the function is
    # piecewise linear so the candidates are l, 0 and u
    g_l = torch.relu(l) - s * l
    g_u = torch.relu(u) - s * u
    g_0 = torch.where(unstable, torch.zeros_like(u), g_l)
    lo_i = torch.minimum(torch.minimum(g_l, g_u), g_0)
    hi_i = torch.maximum(torch.maximum(g_l, g_u), g_0)
    # stable neurons are exact lines
    lo_i = torch.where(unstable, lo_i, torch.zeros_like(lo_i))
    hi_i = torch.where(unstable, hi_i, torch.zeros_like(hi_i))
    if shared:
        return ActRelaxation(s, lo_i, hi_i, l, u)
    alpha = torch.where(unstable, (u > -l).to(DTYPE), s)
    return ActRelaxation(s, torch.zeros_like(lo_i), hi_i, l, u, lower_slope=alpha)


def _tanh_relax(l, u) -> ActRelaxation:
    w = u - l
    narrow = w < 1e-9
    safe_w = torch.where(narrow, torch.ones_like(w), w)
    mid = 0.5 * (l + u)
    chord = (torch.tanh(u) - torch.tanh(l)) / safe_w
    s = torch.where(narrow, 1.0 - torch.tanh(mid) ** 2, chord)
    g = lambda x: torch.tanh(x) - s * x  # noqa: E731
    cands_lo = torch.minimum(g(l), g(u))
    cands_hi = torch.maximum(g(l), g(u))
    # interior critical points where sech^2(x) = s
    xc = torch.atanh(torch.sqrt((1.0 - s).clamp(min=1e-300)).clamp(max=1 - 1e-16))
    for x in (xc, -xc):
        inside = (x > l) & (x < u)
        gx = g(torch.where(inside, x, l))
        cands_lo = torch.where(inside, torch.minimum(cands_lo, gx), cands_lo)
        cands_hi = torch.where(inside, torch.maximum(cands_hi, gx), cands_hi)
    # the narrow case uses a tangent slope; cover its curvature explicitly
    curv = torch.where(narrow, 0.5 * w * w, torch.zeros_like(w))
    margin = 1e-15 * (1.0 + l.abs() + u.abs()) + curv
    return ActRelaxation(s, cands_lo - margin, cands_hi + margin, l, u)


def relax_activation(tag: str, preact_lo, preact_hi=None, shared: bool = True) -> ActRelaxation:
    """Parallel-line relaxation of an activation over [lo, hi] (elementwise)."""
    if preact_hi is None:  # scalar Interval
        preact_lo, preact_hi = preact_lo.lo, preact_lo.hi
    l, u = as_tensor(preact_lo), as_tensor(preact_hi)
    if not (torch.isfinite(l).all() and torch.isfinite(u).all()):
        raise ValueError("non-finite preactivation bounds")
    if tag == "relu":
        return _relu_relax(l, u, shared)
    if tag == "tanh":
        return _tanh_relax(l, u)
    if tag == "identity":
        one = torch.ones_like(l)
        zero = torch.zeros_like(l)
        return ActRelaxation(one, zero, zero, l, u)
    raise ValueError(f"unsupported activation {tag!r}")


# ---------------------------------------------------------------------------
# backward bound propagation


@dataclass
class LinearBounds:
    A_lower: torch.Tensor
    A_upper: torch.Tensor
    b_lower: torch.Tensor
    b_upper: torch.Tensor
    domain: IntervalBox

    @property
    def A_shared(self) -> torch.Tensor:
        if not torch.equal(self.A_lower, self.A_upper):
            raise ValueError("lower and upper coefficients differ")
        return self.A_lower

    def concretize(self):
        """Output interval bounds over the domain."""
        mid = self.domain.center
        rad = self.domain.radius
        lo = matvec(self.A_lower, mid) - matvec(self.A_lower.abs(), rad) + self.b_lower
        hi = matvec(self.A_upper, mid) + matvec(self.A_upper.abs(), rad) + self.b_upper
        return round_out(lo, hi)


def _mv(M, v):
    return matvec(M, v)


def _backward(layers, relax, target: int, lo, hi):
    """Bound pre-activation ``target`` as affine functions of the input.

    Returns (C_lo, C_hi, off_lo, off_hi) with C of shape (..., out, n_in).
    """
    W, b, _ = layers[target]
    C_lo = C_hi = W
    off_lo = off_hi = b
    if C_lo.dim() < lo.dim() + 1:
        C_lo = C_hi = W.expand(lo.shape[:-1] + W.shape)
        off_lo = off_hi = b.expand(lo.shape[:-1] + b.shape[-1:])
    for l in range(target - 1, -1, -1):
        r = relax[l]
        pl, ml = C_lo.clamp(min=0), C_lo.clamp(max=0)
        ph, mh = C_hi.clamp(min=0), C_hi.clamp(max=0)
        off_lo = off_lo + _mv(pl, r.lower_intercept) + _mv(ml, r.upper_intercept)
        off_hi = off_hi + _mv(ph, r.upper_intercept) + _mv(mh, r.lower_intercept)
        s_l = r.slope_lo.unsqueeze(-2)
        s_u = r.slope.unsqueeze(-2)
        C_lo = pl * s_l + ml * s_u
        C_hi = ph * s_u + mh * s_l
        Wl, bl, _ = layers[l]
        off_lo = off_lo + _mv(C_lo, bl)
        off_hi = off_hi + _mv(C_hi, bl)
        C_lo = matmul(C_lo, Wl)
        C_hi = matmul(C_hi, Wl)
    return C_lo, C_hi, off_lo, off_hi


def _concretize(C_lo, C_hi, off_lo, off_hi, lo, hi):
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    l = _mv(C_lo, mid) - _mv(C_lo.abs(), rad) + off_lo
    u = _mv(C_hi, mid) + _mv(C_hi.abs(), rad) + off_hi
    return round_out(l, u)


def _crown_layers(layers, lo, hi, shared=True, preact="crown"):
    relax = []
    for l in range(len(layers) - 1):
        if l == 0:
            W, b, _ = layers[0]
            pl, ph = imatvec(W, lo, hi)
            pl, ph = round_out(pl + b, ph + b)
        elif preact == "interval":
            prev = relax[-1]
            al, ah = _act_interval(layers[l - 1][2], prev.preact_lo, prev.preact_hi)
            W, b, _ = layers[l]
            pl, ph = imatvec(W, al, ah)
            pl, ph = round_out(pl + b, ph + b)
        else:
            pl, ph = _concretize(*_backward(layers, relax, l, lo, hi), lo, hi)
        relax.append(relax_activation(layers[l][2], pl, ph, shared=shared))
    return relax, _backward(layers, relax, len(layers) - 1, lo, hi)


def crown_backward(net: MLPNet, domain: IntervalBox, shared: bool = True,
                   preact: str = "crown") -> LinearBounds:
    """Affine bounds A x + b_lower <= net(x) <= A x + b_upper over ``domain``.

    ``preact`` selects how hidden pre-activation bounds are obtained: "crown"
    runs the backward pass for each layer, "interval" uses plain interval
    propagation (cheaper, looser).
    """
    if domain.n != net.input_dim:
        raise ValueError(f"domain has {domain.n} dims, network expects {net.input_dim}")
    _, (C_lo, C_hi, off_lo, off_hi) = _crown_layers(net.layers, domain.lo, domain.hi, shared, preact)
    return LinearBounds(C_lo, C_hi, off_lo, off_hi, domain)


def _act_interval(tag, lo, hi):
    # all supported activations are monotone non-decreasing
    return _act(tag, lo), _act(tag, hi)


def interval_forward(net: MLPNet, lo, hi):
    """Plain interval propagation through the network."""
    lo, hi = as_tensor(lo), as_tensor(hi)
    for W, b, act in net.layers:
        lo, hi = imatvec(W, lo, hi)
        lo, hi = round_out(lo + b, hi + b)
        lo, hi = _act_interval(act, lo, hi)
    return lo, hi


def certify_tm_input(net: MLPNet, tm: TaylorModel, preact: str = "crown") -> TaylorModel:
    """Linear model over tm's variables enclosing net(tm)."""
    if tm.n != net.input_dim:
        raise ValueError(f"TM has {tm.n} rows, network expects {net.input_dim} inputs")
    if tm.h > 0:
        tm = tm.to_linear()
    nz = tm.nz
    W1, b1, act1 = net.layers[0]
    # net(c + Az z + r) is a network over the stacked (z, r) box
    W1z = matmul(W1, tm.Az)
    W1r = W1.expand(W1z.shape[:-1] + W1.shape[-1:])
    first = (torch.cat([W1z, W1r], dim=-1), _mv(W1, tm.c) + b1, act1)
    layers = [first] + list(net.layers[1:])
    ones = torch.ones_like(tm.Az[..., 0, :])
    lo = torch.cat([-ones, tm.lo], dim=-1)
    hi = torch.cat([ones, tm.hi], dim=-1)
    _, (C_lo, C_hi, off_lo, off_hi) = _crown_layers(layers, lo, hi, True, preact)
    if not torch.allclose(C_lo, C_hi, rtol=0.0, atol=0.0, equal_nan=True):
        raise AssertionError("shared-slope propagation produced different coefficients")
    P = C_lo[..., :nz]
    Wr = C_lo[..., nz:]
    rl, rh = imatvec(Wr, tm.lo, tm.hi)
    c = 0.5 * (off_lo + off_hi)
    lo_o, hi_o = round_out((off_lo - c) + rl, (off_hi - c) + rh)
    z = torch.zeros_like(c)
    return TaylorModel(c, P, z, torch.zeros_like(P), lo_o, hi_o, 0.0)


def ctl_crown(state_tm: TaylorModel, controller: MLPNet, ref_input=None,
              preact: str = "crown") -> TaylorModel:
    """Control model over the state model's variables; the reference is a fixed input."""
    n = state_tm.n
    net = controller
    if ref_input is not None:
        ref = as_tensor(ref_input)
        if n + ref.shape[-1] != controller.input_dim:
            raise ValueError("controller input dim does not match state + reference")
        net = controller.fold_input(n, ref)
    elif controller.input_dim != n:
        raise ValueError("controller input dim does not match state dim")
    return certify_tm_input(net, state_tm, preact=preact)
