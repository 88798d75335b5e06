"""Reachability-regularized training of discrete-time dynamics models and
continuous-time controllers, with horizon and radius curricula."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import torch

from .closed_loop import ClosedLoopSpec, cl_reach
from .dt_reach import DTSystem, dt_reach
from .flowpipe import FlowpipeParams, VectorField
from .interval import DTYPE, as_tensor, box_from_center
from .neural import MLPNet
from .refine import tube_volume
from .sim import rk4_step

LOG_FIELDS = ["iter", "T_h", "eps", "L_pred", "L_reach", "L_total", "diverged_count"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# data


@dataclass
class Episode:
    states: list
    actions: list
    refs: Optional[list] = None

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("an episode needs one more state than actions")
        if self.refs is not None and len(self.refs) != len(self.actions):
            raise ValueError("need one reference per action")

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        return cls(**json.loads(line))


def episodes_to_tensors(episodes: Sequence[Episode]):
    """Stack into (states (E, T+1, n), actions (E, T, m), refs or None)."""
    X = torch.tensor([e.states for e in episodes], dtype=DTYPE)
    U = torch.tensor([e.actions for e in episodes], dtype=DTYPE)
    R = None
    if episodes and episodes[0].refs is not None:
        R = torch.tensor([e.refs for e in episodes], dtype=DTYPE)
    return X, U, R


def tensors_to_episodes(X, U, R=None) -> list:
    return [Episode(X[i].tolist(), U[i].tolist(), None if R is None else R[i].tolist())
            for i in range(X.shape[0])]


def write_jsonl(episodes: Sequence[Episode]) -> str:
    return "".join(e.to_json() + "\n" for e in episodes)


def read_jsonl(text: str) -> list:
    return [Episode.from_json(line) for line in text.splitlines() if line.strip()]


def generate_episodes(step: Callable, x0_lo, x0_hi, u_lo, u_hi, count: int, T: int,
                      generator: torch.Generator):
    """Random-action rollouts of a one-step map; uniform x0 and actions."""
    x0_lo, x0_hi = as_tensor(x0_lo), as_tensor(x0_hi)
    u_lo, u_hi = as_tensor(u_lo), as_tensor(u_hi)
    x = x0_lo + (x0_hi - x0_lo) * torch.rand((count,) + x0_lo.shape, generator=generator, dtype=DTYPE)
    U = u_lo + (u_hi - u_lo) * torch.rand((count, T) + u_lo.shape, generator=generator, dtype=DTYPE)
    xs = [x]
    for t in range(T):
        x = as_tensor(step(x, U[:, t]))
        xs.append(x)
    return torch.stack(xs, 1), U


# ---------------------------------------------------------------------------
# losses


def default_weights(T_h: int) -> torch.Tensor:
    """w_t = 1 + t / T_h for t = 0..T_h-1 (later steps count more)."""
    return 1.0 + torch.arange(T_h, dtype=DTYPE) / T_h


def _dt_model(model: MLPNet, n: int, m: int, H: int, residual: bool) -> DTSystem:
    return DTSystem(n, m, H, net=model, residual=residual)


def pred_loss(model: MLPNet, states, actions, T_h: int, weights=None, residual: bool = False):
    """Weighted autoregressive T_h-step prediction error, averaged over episodes and steps."""
    X, U = as_tensor(states), as_tensor(actions)
    if T_h > U.shape[-2]:
        raise ValueError(f"T_h={T_h} exceeds episode length {U.shape[-2]}")
    w = default_weights(T_h) if weights is None else as_tensor(weights)
    sys = _dt_model(model, X.shape[-1], U.shape[-1], T_h, residual)
    x = X[:, 0]
    total = torch.zeros((), dtype=DTYPE)
    for t in range(T_h):
        x = sys.step(x, U[:, t])
        total = total + w[t] * ((X[:, t + 1] - x) ** 2).sum(-1).sum()
    return total / (X.shape[0] * T_h)


def _capped_log(V: torch.Tensor, ceiling: float):
    ok = torch.isfinite(V)
    safe = torch.where(ok, V, torch.zeros_like(V))
    vals = torch.where(ok, torch.log1p(safe), torch.full_like(V, ceiling))
    return vals, int((~ok).sum())


def reach_loss(model: MLPNet, states, actions, eps: float, T_h: int, residual: bool = False,
               ceiling: float = 50.0, return_tube: bool = False):
    """Mean of log(1 + tube volume) from eps-boxes around each episode's x0.

    Diverged tubes contribute ``ceiling`` (no gradient).  Returns
    (loss, diverged_count[, tube]).
    """
    X, U = as_tensor(states), as_tensor(actions)
    n, m = X.shape[-1], U.shape[-1]
    sys = _dt_model(model, n, m, T_h, residual)
    X0 = box_from_center(X[:, 0], torch.full_like(X[:, 0], eps))
    tube = dt_reach(sys, X0, U[:, :T_h])
    vals, div = _capped_log(tube_volume(tube), ceiling)
    loss = vals.mean()
    return (loss, div, tube) if return_tube else (loss, div)


def track_loss(controller: MLPNet, dynamics: Callable, states, actions, T_t: int,
               delta: float, refs=None, weights=None, gamma: float = 1.0,
               substeps: int = 4, ceiling: float = 1e6):
    """Weighted action-imitation plus gamma * induced-state error.

    The controller acts on the model state, its action is held over the
    control interval ``delta`` and the state is advanced with RK4.
    """
    X, U = as_tensor(states), as_tensor(actions)
    w = default_weights(T_t) if weights is None else as_tensor(weights)
    x = X[:, 0]
    per = torch.zeros(X.shape[0], dtype=DTYPE)
    for t in range(T_t):
        inp = x if refs is None else torch.cat([x, as_tensor(refs)[:, t]], -1)
        u_hat = controller.forward(inp)
        x = rk4_step(dynamics, x, u_hat, delta, substeps)
        err = ((U[:, t] - u_hat) ** 2).sum(-1) + gamma * ((X[:, t + 1] - x) ** 2).sum(-1)
        per = per + w[t] * err
    per = per / T_t
    ok = torch.isfinite(per) & (per < ceiling)
    per = torch.where(ok, per, torch.full_like(per, ceiling))
    return per.mean(), int((~ok).sum())


# ---------------------------------------------------------------------------
# schedules


def horizon_schedule(s: int, S: int, T_max: int) -> int:
    """Logarithmic growth from 1 at s=0 to T_max at s=S-1."""
    if S <= 1:
        return T_max
    val = round(T_max * math.log(1.0 + s * (math.e - 1.0) / (S - 1)))
    return int(min(T_max, max(1, val)))


def eps_schedule(s: int, S: int, eps0: float, eps_final: float) -> float:
    """Linear decrease from eps0 to eps_final."""
    if eps0 < eps_final or eps_final <= 0:
        raise ValueError("need eps0 >= eps_final > 0")
    if S <= 1:
        return eps_final
    if s == S - 1:
        return eps_final
    if s == 0:
        return eps0
    return eps_final + (eps0 - eps_final) * (1.0 - s / (S - 1))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    T_max: int = 5
    eps_final: float = 0.05
    eps0: float = 0.2
    lam: float = 0.0
    gamma: float = 1.0
    iters: int = 200
    batch: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    curriculum: bool = True
    seed: int = 0
    ceiling: float = 50.0
    audit_every: int = 100
    audit_samples: int = 200
    hidden: tuple = (32, 32)
    activation: str = "relu"
    residual: bool = True

    def __post_init__(self):
        if self.T_max < 1 or self.iters < 1 or self.batch < 1:
            raise ValueError("T_max, iters and batch must be positive")
        if self.lam < 0 or self.gamma < 0 or self.lr <= 0:
            raise ValueError("lam, gamma must be >= 0 and lr > 0")
        if not self.eps0 >= self.eps_final > 0:
            raise ValueError("need eps0 >= eps_final > 0")

    def schedule(self, s: int):
        if not self.curriculum:
            return self.T_max, self.eps_final
        return (horizon_schedule(s, self.iters, self.T_max),
                eps_schedule(s, self.iters, self.eps0, self.eps_final))


@dataclass
class TrainResult:
    net: MLPNet
    log: list
    audits: list = field(default_factory=list)
    config: Optional[TrainConfig] = None

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _audit_dt(net, residual, X, U, eps, T_h, tube, gen, k: int) -> int:
    """Monte-Carlo containment count for a batch of training tubes."""
    sys = _dt_model(net.detach(), X.shape[-1], U.shape[-1], T_h, residual)
    E = X.shape[0]
    z = torch.rand((E, k, X.shape[-1]), generator=gen, dtype=DTYPE) * 2 - 1
    x0 = X[:, 0].unsqueeze(1) + eps * z
    roll = sys.rollout(x0, U[:, :T_h].unsqueeze(1).expand(E, k, T_h, U.shape[-1]))
    bad = 0
    for t in range(T_h + 1):
        bad += int((~tube.detach().contains(t, roll[:, :, t], tol=1e-9)).sum())
    return bad


def _check_finite(it, L_pred, L_reach, L_total, net):
    if not all(math.isfinite(v) for v in (L_pred, L_reach, L_total)):
        snap = {"iter": it, "L_pred": L_pred, "L_reach": L_reach, "L_total": L_total,
                "params": net.detach().to_dict()}
        raise TrainingDiverged(f"non-finite loss at iteration {it}", snap)


def train_dt_dyn(config: TrainConfig, states, actions, net: Optional[MLPNet] = None) -> TrainResult:
    """Fit a one-step model to episodes with optional reachability penalty."""
    X, U = as_tensor(states), as_tensor(actions)
    if U.shape[-2] < config.T_max:
        raise ValueError("episodes are shorter than T_max")
    n, m = X.shape[-1], U.shape[-1]
    gen = torch.Generator().manual_seed(config.seed)
    if net is None:
        sizes = [n + m, *config.hidden, n]
        net = MLPNet.random(sizes, config.activation, generator=gen)
    net = net.detach().requires_grad_(True)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=tuple(config.betas))
    log, audits = [], []
    E = X.shape[0]
    for s in range(config.iters):
        T_h, eps = config.schedule(s)
        idx = torch.randperm(E, generator=gen)[:config.batch]
        Xb, Ub = X[idx], U[idx]
        lp = pred_loss(net, Xb, Ub, T_h, residual=config.residual)
        if config.lam > 0:
            lr_, div, tube = reach_loss(net, Xb, Ub, eps, T_h, config.residual, config.ceiling, True)
        else:
            with torch.no_grad():
                lr_, div, tube = reach_loss(net, Xb, Ub, eps, T_h, config.residual, config.ceiling, True)
        total = lp + config.lam * lr_
        row = {"iter": s, "T_h": T_h, "eps": float(eps), "L_pred": float(lp.detach()),
               "L_reach": float(lr_.detach()), "L_total": float(lp.detach()) + config.lam * float(lr_.detach()),
               "diverged_count": div}
        _check_finite(s, row["L_pred"], row["L_reach"], row["L_total"], net)
        log.append(row)
        if config.audit_every and s % config.audit_every == 0:
            audits.append({"iter": s, "violations": _audit_dt(net, config.residual, Xb, Ub, eps, T_h,
                                                              tube, gen, config.audit_samples)})
        opt.zero_grad()
        total.backward()
        opt.step()
    return TrainResult(net.detach(), log, audits, config)


def eval_tube_volume(net: MLPNet, states, actions, eps: float, T_h: int, residual: bool = True) -> float:
    """Mean tube volume of a model from eps-boxes around each episode's x0."""
    with torch.no_grad():
        X, U = as_tensor(states), as_tensor(actions)
        sys = _dt_model(net, X.shape[-1], U.shape[-1], T_h, residual)
        tube = dt_reach(sys, box_from_center(X[:, 0], torch.full_like(X[:, 0], eps)), U[:, :T_h])
        return float(tube_volume(tube).mean())


def cl_reach_loss(controller: MLPNet, field: VectorField, X0s, eps: float, N_ctl: int, K: int,
                  h: float, refs=None, ceiling: float = 50.0):
    """Mean log(1 + state-tube volume) of closed-loop tubes from eps-boxes."""
    X0s = as_tensor(X0s)
    spec = ClosedLoopSpec(field, controller, K, N_ctl, FlowpipeParams(h=h, N=0),
                          None if refs is None else as_tensor(refs)[:, :N_ctl])
    tube = cl_reach(spec, box_from_center(X0s, torch.full_like(X0s, eps)))
    vals, div = _capped_log(tube_volume(tube.dims(slice(0, field.n))), ceiling)
    return vals.mean(), div


def train_ct_ctl(config: TrainConfig, states, actions, field: VectorField, K: int, h: float,
                 refs=None, controller: Optional[MLPNet] = None, substeps: int = 4) -> TrainResult:
    """Fit a controller to logged (state, action) episodes under fixed dynamics.

    Logged actions are held for K*h; the reachability term runs cl_reach
    from eps-boxes around each episode's start.  Log column L_pred holds the
    tracking loss.
    """
    X, U = as_tensor(states), as_tensor(actions)
    R = None if refs is None else as_tensor(refs)
    n, m = X.shape[-1], U.shape[-1]
    r = 0 if R is None else R.shape[-1]
    gen = torch.Generator().manual_seed(config.seed)
    if controller is None:
        controller = MLPNet.random([n + r, *config.hidden, m], config.activation, generator=gen)
    ctl = controller.detach().requires_grad_(True)
    opt = torch.optim.Adam(ctl.parameters(), lr=config.lr, betas=tuple(config.betas))
    delta = K * h
    log = []
    E = X.shape[0]
    for s in range(config.iters):
        T_h, eps = config.schedule(s)
        idx = torch.randperm(E, generator=gen)[:config.batch]
        Rb = None if R is None else R[idx]
        lt, _ = track_loss(ctl, field, X[idx], U[idx], T_h, delta, Rb, gamma=config.gamma,
                           substeps=substeps)
        if config.lam > 0:
            lr_, div = cl_reach_loss(ctl, field, X[idx, 0], eps, T_h, K, h, Rb, config.ceiling)
        else:
            lr_, div = torch.zeros((), dtype=DTYPE), 0
        total = lt + config.lam * lr_
        row = {"iter": s, "T_h": T_h, "eps": float(eps), "L_pred": float(lt.detach()),
               "L_reach": float(lr_.detach()), "L_total": float(lt.detach()) + config.lam * float(lr_.detach()),
               "diverged_count": div}
        _check_finite(s, row["L_pred"], row["L_reach"], row["L_total"], ctl)
        log.append(row)
        opt.zero_grad()
        total.backward()
        opt.step()
    return TrainResult(ctl.detach(), log, [], config)
