"""Reachability-aware sampling-based MPC.

Candidates are scored by nominal stage cost plus a penalty on how far the
predicted reachable boxes violate the constraints.  The search is a
cross-entropy method with elite retention; the best candidate is then
polished by projected gradient descent.  A receding-horizon loop executes
the first few actions on a disturbed simulator and replans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dt_reach import DTSystem, dt_reach
from .interval import DTYPE, as_tensor, box_from_center
from .refine import gradient_refine, tube_volume
from .tube import ReachTube

VIOLATION_CAP = 1e3


# ---------------------------------------------------------------------------
# constraint functionals on boxes: G >= 0 means every point satisfies it


def _sel(lo, hi, dims):
    if dims is None:
        return lo, hi
    return lo[..., list(dims)], hi[..., list(dims)]


@dataclass
class HalfspaceAvoid:
    """Keep out of {x : a.x > b}, i.e. require a.x <= b on the whole box."""

    a: Sequence[float]
    b: float
    dims: Optional[Sequence[int]] = None

    def __call__(self, lo, hi):
        lo, hi = _sel(lo, hi, self.dims)
        a = as_tensor(self.a)
        worst = torch.where(a > 0, hi, lo)
        return self.b - (a * worst).sum(-1)


@dataclass
class SphereAvoid:
    """Box must stay outside the open ball; margin is box-to-center distance minus radius."""

    center: Sequence[float]
    radius: float
    dims: Optional[Sequence[int]] = None

    def __call__(self, lo, hi):
        lo, hi = _sel(lo, hi, self.dims)
        c = as_tensor(self.center)
        gap = torch.clamp(lo - c, min=0) + torch.clamp(c - hi, min=0)
        return torch.sqrt((gap * gap).sum(-1)) - self.radius


@dataclass
class BoxStayIn:
    lo: Sequence[float]
    hi: Sequence[float]
    dims: Optional[Sequence[int]] = None

    def __call__(self, lo, hi):
        lo, hi = _sel(lo, hi, self.dims)
        L, U = as_tensor(self.lo), as_tensor(self.hi)
        return torch.minimum(lo - L, U - hi).min(-1).values


@dataclass
class MaxVolume:
    limit: float

    def __call__(self, lo, hi):
        return self.limit - (hi - lo).sum(-1)


G_REGISTRY = {
    "halfspace_avoid": HalfspaceAvoid,
    "sphere_avoid": SphereAvoid,
    "box_stay_in": BoxStayIn,
    "max_volume": MaxVolume,
}


def make_constraint(spec: dict):
    kind = spec["type"]
    if kind not in G_REGISTRY:
        raise ValueError(f"unknown constraint type {kind!r}")
    args = {k: v for k, v in spec.items() if k != "type"}
    return G_REGISTRY[kind](**args)


def point_margin(g, x):
    """Constraint margin of a single point (a zero-width box)."""
    x = as_tensor(x)
    return g(x, x)


# ---------------------------------------------------------------------------
# planning problem


def goal_cost(goal, dims=None, action_weight: float = 0.0) -> Callable:
    """Stage cost ||x[dims] - goal||^2 + action_weight ||u||^2."""
    goal_t = as_tensor(goal)

    def cost(x, u):
        p = x if dims is None else x[..., list(dims)]
        return ((p - goal_t) ** 2).sum(-1) + action_weight * (u * u).sum(-1)

    return cost


@dataclass
class PlanProblem:
    sys: DTSystem
    cost: Callable
    constraints: list
    C: float
    u_lo: Sequence[float]
    u_hi: Sequence[float]
    eps: float = 0.0

    def __post_init__(self):
        lo, hi = as_tensor(self.u_lo), as_tensor(self.u_hi)
        if lo.shape[-1] != self.sys.m or hi.shape[-1] != self.sys.m:
            raise ValueError("action bounds must match the action dim")
        if not bool(torch.isfinite(lo).all() and torch.isfinite(hi).all() and (lo <= hi).all()):
            raise ValueError("action box must be bounded and non-empty")
        if self.sys.H < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def H(self) -> int:
        return self.sys.H


@dataclass
class PlanScore:
    objective: torch.Tensor
    stage_cost: torch.Tensor
    penalty: torch.Tensor
    margin: torch.Tensor      # worst constraint margin per step (..., H)
    nominal: torch.Tensor     # (..., H+1, n)
    tube: ReachTube


def plan_objective(problem: PlanProblem, x0, actions) -> PlanScore:
    """O = sum_t c(x_t, u_{t-1}) + C * sum_t sum_G max(0, -G(R_t)), t = 1..H.

    The nominal rollout starts at x0; the tube starts at the eps-box around
    it.  Works on a batch of action sequences (..., H, m).
    """
    A = as_tensor(actions)
    x0 = as_tensor(x0)
    x0b = x0.expand(A.shape[:-2] + x0.shape[-1:])
    nominal = problem.sys.rollout(x0b, A)
    stage = problem.cost(nominal[..., 1:, :], A).sum(-1)
    if problem.eps == 0.0:
        # a point start set has the nominal rollout as its exact tube
        tube = ReachTube(nominal, nominal)
    else:
        tube = dt_reach(problem.sys, box_from_center(x0b, torch.full_like(x0b, problem.eps)), A)
    lo, hi = tube.lo[..., 1:, :], tube.hi[..., 1:, :]
    div = tube.diverged[..., 1:]
    pen = torch.zeros_like(stage)
    margin = torch.full(div.shape, math.inf, dtype=DTYPE)
    for g in problem.constraints:
        safe_lo = torch.where(div.unsqueeze(-1), torch.zeros_like(lo), lo)
        safe_hi = torch.where(div.unsqueeze(-1), torch.zeros_like(hi), hi)
        m = g(safe_lo, safe_hi)
        m = torch.where(div, torch.full_like(m, -VIOLATION_CAP), m)
        margin = torch.minimum(margin, m)
        pen = pen + torch.clamp(-m, min=0).sum(-1)
    return PlanScore(stage + problem.C * pen, stage, problem.C * pen, margin, nominal, tube)


# ---------------------------------------------------------------------------
# cross-entropy search


@dataclass
class SamplerConfig:
    population: int = 256
    elite_frac: float = 0.1
    iters: int = 5
    init_std: float = 0.5     # fraction of the action range
    smoothing: float = 0.5
    refine_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.iters < 1:
            raise ValueError("need population >= 2 and iters >= 1")
        if self.elites < 1:
            raise ValueError("elite fraction leaves no elites")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")

    @property
    def elites(self) -> int:
        return int(self.population * self.elite_frac)


@dataclass
class PlanResult:
    actions: torch.Tensor
    objective: float
    score: PlanScore
    history: list = field(default_factory=list)
    all_diverged: bool = False
    refined_gain: float = 0.0


def plan_cem(problem: PlanProblem, sampler: SamplerConfig, x0, mean=None,
             generator: Optional[torch.Generator] = None) -> PlanResult:
    """CEM over clipped Gaussian action sequences, then gradient polish of the best."""
    gen = generator or torch.Generator().manual_seed(sampler.seed)
    H, m = problem.H, problem.sys.m
    lo, hi = as_tensor(problem.u_lo), as_tensor(problem.u_hi)
    mu = (0.5 * (lo + hi)).expand(H, m).clone() if mean is None else as_tensor(mean).clone()
    std = (sampler.init_std * (hi - lo)).expand(H, m).clone()
    best_a, best_f = None, math.inf
    history = []
    all_div = True
    with torch.no_grad():
        for _ in range(sampler.iters):
            noise = torch.randn((sampler.population, H, m), generator=gen, dtype=DTYPE)
            pop = torch.clamp(mu + std * noise, lo, hi)
            if best_a is not None:
                pop[0] = best_a
            f = plan_objective(problem, x0, pop).objective
            all_div = all_div and not bool(torch.isfinite(f).any())
            order = torch.argsort(f, stable=True)
            elite = pop[order[:sampler.elites]]
            if float(f[order[0]]) < best_f:
                best_f, best_a = float(f[order[0]]), pop[order[0]].clone()
            history.append(best_f)
            s = sampler.smoothing
            mu = s * mu + (1 - s) * elite.mean(0)
            std = s * std + (1 - s) * elite.std(0, unbiased=False)
    gain = 0.0
    if sampler.refine_iters > 0 and math.isfinite(best_f):
        obj = lambda a: plan_objective(problem, x0, a).objective  # noqa: E731
        res = gradient_refine(obj, best_a, sampler.refine_iters, lo, hi, step=0.1)
        gain = best_f - res.value
        best_a, best_f = res.x, res.value
    with torch.no_grad():
        score = plan_objective(problem, x0, best_a)
    return PlanResult(best_a, float(score.objective), score, history, all_div, gain)


# ---------------------------------------------------------------------------
# receding horizon


@dataclass
class MPCConfig:
    replan: int = 3
    steps: int = 30
    plan_dist: float = 0.0    # bound on the disturbance of the commanded action
    ctl_dist: float = 0.0     # bound on the low-level tracking error
    goal_tol: float = 0.2

    def __post_init__(self):
        if self.replan < 1 or self.steps < 1:
            raise ValueError("replan and steps must be positive")
        if self.plan_dist < 0 or self.ctl_dist < 0:
            raise ValueError("disturbance bounds must be non-negative")


@dataclass
class MPCResult:
    states: np.ndarray
    actions: np.ndarray
    log: list
    success: bool
    reason: str


def mpc_run(problem: PlanProblem, sampler: SamplerConfig, cfg: MPCConfig,
            simulator: Callable, x0, goal, goal_dims=None, seed: int = 0) -> MPCResult:
    """Plan, execute ``cfg.replan`` actions on the simulator, observe, replan.

    ``simulator(x, u, w_plan, w_ctl)`` returns the true next state, given
    uniform disturbances drawn inside the configured bounds.  Success means
    reaching the goal within ``cfg.steps`` without any constraint violation
    of the true state.
    """
    if cfg.replan > problem.H:
        raise ValueError("replan period exceeds the planning horizon")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    goal = np.asarray(goal, dtype=float)
    x = np.asarray(x0, dtype=float)
    states, actions, log = [x.copy()], [], []
    mean = None
    t = 0

    def at_goal(v):
        p = v if goal_dims is None else v[list(goal_dims)]
        return float(np.linalg.norm(p - goal)) <= cfg.goal_tol

    while t < cfg.steps:
        plan = plan_cem(problem, sampler, torch.as_tensor(x, dtype=DTYPE), mean, gen)
        vol = float(tube_volume(plan.score.tube))
        margin = float(plan.score.margin.min()) if plan.score.margin.numel() else math.inf
        executed = min(cfg.replan, plan.actions.shape[0])
        for k in range(executed):
            if t >= cfg.steps:
                break
            u = plan.actions[k].numpy()
            m = u.shape[-1]
            w_p = rng.uniform(-cfg.plan_dist, cfg.plan_dist, m) if cfg.plan_dist else np.zeros(m)
            w_c = rng.uniform(-cfg.ctl_dist, cfg.ctl_dist, m) if cfg.ctl_dist else np.zeros(m)
            x = np.asarray(simulator(x, u, w_p, w_c), dtype=float)
            t += 1
            states.append(x.copy())
            actions.append(u.copy())
            log.append({"step": t, "state": x.tolist(), "action": u.tolist(),
                        "objective": plan.objective, "tube_volume": vol, "G_margin": margin})
            if not np.all(np.isfinite(x)):
                return MPCResult(np.array(states), np.array(actions), log, False, "simulator diverged")
            xt = torch.as_tensor(x, dtype=DTYPE)
            if any(float(point_margin(g, xt)) < 0 for g in problem.constraints):
                return MPCResult(np.array(states), np.array(actions), log, False, "constraint violated")
            if at_goal(x):
                return MPCResult(np.array(states), np.array(actions), log, True, "goal reached")
        # warm start: shift the remaining plan
        H = plan.actions.shape[0]
        rest = plan.actions[executed:]
        mean = torch.cat([rest, plan.actions[-1:].expand(H - rest.shape[0], -1)], 0)
    return MPCResult(np.array(states), np.array(actions), log, False, "step budget exhausted")
