"""Benchmark dynamical systems.

Field functions take ``(x, u)`` and work unchanged on numpy arrays, torch
tensors and Taylor models (see ``fieldops``).  Inputs may be constants while
the state is a Taylor model, or both may be Taylor models (closed loop).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fieldops as F


@dataclass(frozen=True)
class QuadrotorParams:
    m: float = 1.0
    g: float = 9.81
    Jx: float = 0.01
    Jy: float = 0.01
    Jz: float = 0.02

    def __post_init__(self):
        if min(self.m, self.g, self.Jx, self.Jy, self.Jz) <= 0:
            raise ValueError("quadrotor parameters must be positive")

    @property
    def hover_thrust(self) -> float:
        return self.m * self.g


# state layout of one quadrotor
POS = (0, 1, 2)
VEL = (3, 4, 5)
ANG = (6, 7, 8)   # roll, pitch, yaw
RATE = (9, 10, 11)


def _agent_rows(offset: int, agents: int, stride: int = 12) -> list:
    return [stride * a + offset for a in range(agents)]


def _interleave_perm(blocks: int, agents: int) -> list:
    # rows are produced grouped by component; reorder to grouped by agent
    return [b * agents + a for a in range(agents) for b in range(blocks)]


def _quad_rates(x, thrust, tx, ty, tz, P: QuadrotorParams, agents: int, extra_acc=None):
    """Derivative of ``agents`` stacked quadrotors, each with the 12D layout above."""
    R = lambda o: _agent_rows(o, agents)  # noqa: E731
    ang_rows = R(6) + R(7) + R(8)
    ang = F.rows(x, ang_rows)
    s = F.sin(ang)
    c = F.cos(ang)
    k = agents
    sphi, stheta, spsi = F.rows(s, slice(0, k)), F.rows(s, slice(k, 2 * k)), F.rows(s, slice(2 * k, 3 * k))
    cphi, ctheta, cpsi = F.rows(c, slice(0, k)), F.rows(c, slice(k, 2 * k)), F.rows(c, slice(2 * k, 3 * k))
    theta = F.rows(x, R(7))
    ttheta = F.tan(theta)
    sectheta = F.sec(theta)
    p, q, r = F.rows(x, R(9)), F.rows(x, R(10)), F.rows(x, R(11))

    cs = cphi * stheta
    b3x = cs * cpsi + sphi * spsi
    b3y = cs * spsi - sphi * cpsi
    b3z = cphi * ctheta
    t_over_m = F.mul(thrust, 1.0 / P.m) if not isinstance(thrust, float) else thrust / P.m
    ax = F.mul(b3x, t_over_m)
    ay = F.mul(b3y, t_over_m)
    az = F.mul(b3z, t_over_m) - P.g
    if extra_acc is not None:
        acc = F.cat([ax, ay, az]) + extra_acc
    else:
        acc = F.cat([ax, ay, az])

    w = sphi * q + cphi * r
    dphi = p + ttheta * w
    dtheta = cphi * q - sphi * r
    dpsi = sectheta * w
    dp = (q * r) * ((P.Jy - P.Jz) / P.Jx) + F.mul(tx, 1.0 / P.Jx)
    dq = (p * r) * ((P.Jz - P.Jx) / P.Jy) + F.mul(ty, 1.0 / P.Jy)
    dr = (p * q) * ((P.Jx - P.Jy) / P.Jz) + F.mul(tz, 1.0 / P.Jz)

    vel = F.rows(x, R(3) + R(4) + R(5))
    out = F.cat([vel, acc, dphi, dtheta, dpsi, dp, dq, dr])
    if agents == 1:
        return out
    return F.rows(out, _interleave_perm(12, agents))


def quadrotor_ode(x, u, params: QuadrotorParams = QuadrotorParams()):
    """12D rigid-body quadrotor; u = (thrust, roll torque, pitch torque, yaw torque).

    The yaw torque is held at zero regardless of u[3].
    """
    thrust = F.rows(u, slice(0, 1))
    tx = F.rows(u, slice(1, 2))
    ty = F.rows(u, slice(2, 3))
    return _quad_rates(x, thrust, tx, ty, 0.0, params, 1)


@dataclass(frozen=True)
class SwarmParams:
    agents: int = 6
    k_s: float = 1.0
    quad: QuadrotorParams = field(default_factory=QuadrotorParams)

    def __post_init__(self):
        if self.k_s <= 0 or self.agents < 1:
            raise ValueError("swarm needs a positive gain and at least one agent")

    @property
    def n(self) -> int:
        return 12 * self.agents

    @property
    def m(self) -> int:
        return 3 * self.agents


def swarm_coupling_matrix(params: SwarmParams) -> np.ndarray:
    """Maps stacked positions (grouped x-rows, y-rows, z-rows) to k_s (mean - p)."""
    a = params.agents
    block = params.k_s * (np.full((a, a), 1.0 / a) - np.eye(a))
    return np.kron(np.eye(3), block)


def swarm_ode(x, u, params: SwarmParams = SwarmParams()):
    """Quadrotor agents pulled toward the swarm's mean position by springs.

    Agent i uses inputs u[3i:3i+3] = (thrust offset from hover, roll torque,
    pitch torque); yaw torque is zero.
    """
    a = params.agents
    pos = F.rows(x, _agent_rows(0, a) + _agent_rows(1, a) + _agent_rows(2, a))
    coupling = F.lin(pos, swarm_coupling_matrix(params))
    thrust = F.rows(u, [3 * i for i in range(a)]) + params.quad.hover_thrust
    tx = F.rows(u, [3 * i + 1 for i in range(a)])
    ty = F.rows(u, [3 * i + 2 for i in range(a)])
    return _quad_rates(x, thrust, tx, ty, 0.0, params.quad, a, extra_acc=coupling)


@dataclass(frozen=True)
class ArmParams:
    joints: int = 10
    link: float = 0.1
    dt: float = 0.01

    def __post_init__(self):
        if self.link <= 0 or self.joints < 1 or self.dt <= 0:
            raise ValueError("arm parameters must be positive")

    @property
    def lengths(self) -> np.ndarray:
        return np.full(self.joints, self.link)

    @property
    def n(self) -> int:
        # joint angles, joint velocities, planar position of every link tip
        return 4 * self.joints


def _cumsum_matrix(k: int) -> np.ndarray:
    return np.tril(np.ones((k, k)))


def link_positions(q, params: ArmParams = ArmParams()):
    """Tip positions of every link: rows x_1..x_k then y_1..y_k."""
    k = params.joints
    S = _cumsum_matrix(k)
    theta = F.lin(q, S)
    L = S * params.lengths[None, :]
    return F.cat([F.lin(F.cos(theta), L), F.lin(F.sin(theta), L)])


def eef_position(q, params: ArmParams = ArmParams()):
    k = params.joints
    tips = link_positions(q, params)
    return F.rows(tips, [k - 1, 2 * k - 1])


def arm_ode(x, u, params: ArmParams = ArmParams()):
    """Joint-space double integrator: state (q, qdot), input joint accelerations."""
    k = params.joints
    return F.cat([F.rows(x, slice(k, 2 * k)), u])


def arm_dt(x, u, params: ArmParams = ArmParams()):
    """Exact one-step map of the double integrator plus link tip positions."""
    k, dt = params.joints, params.dt
    q = F.rows(x, slice(0, k))
    qd = F.rows(x, slice(k, 2 * k))
    q_next = q + qd * dt + F.mul(u, 0.5 * dt * dt)
    qd_next = qd + F.mul(u, dt)
    return F.cat([q_next, qd_next, link_positions(q_next, params)])


@dataclass(frozen=True)
class PendulumParams:
    dt: float = 0.1
    damping: float = 0.1
    gain: float = 1.0


def pendulum_dt(x, u, params: PendulumParams = PendulumParams()):
    """Semi-implicit Euler step of a damped pendulum driven by a torque input."""
    th = F.rows(x, slice(0, 1))
    om = F.rows(x, slice(1, 2))
    acc = F.mul(F.sin(th), -1.0) - om * params.damping + F.mul(u, params.gain)
    om2 = om + acc * params.dt
    return F.cat([th + om2 * params.dt, om2])


def linear_field(A, B=None, d=None) -> Callable:
    """x' = A x + B u + d as a field on arrays, tensors or Taylor models."""
    A = np.asarray(A, dtype=float)
    Bm = None if B is None else np.asarray(B, dtype=float)
    dv = None if d is None else np.asarray(d, dtype=float)

    def f(x, u=None):
        out = F.lin(x, A)
        if Bm is not None and u is not None:
            out = F.add(out, F.lin(u, Bm))
        if dv is not None:
            out = F.add(out, F.const_like(out, dv))
        return out

    return f


SYSTEMS = {
    "quadrotor": dict(n=12, m=4, field=quadrotor_ode),
    "swarm": dict(n=72, m=18, field=swarm_ode),
    "arm": dict(n=40, m=10, dt_map=arm_dt),
    "pendulum": dict(n=2, m=1, dt_map=pendulum_dt),
}
