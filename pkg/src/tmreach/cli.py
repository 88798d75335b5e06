"""Command-line entry point.

Every run writes its artifacts plus ``manifest.json`` (config echo, seed,
version, thread count and output digests) to ``--out``.  ``tmreach replay
manifest.json --out DIR`` re-executes a run from the manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .baseline import interval_baseline_ct, interval_baseline_dt
from .closed_loop import ClosedLoopSpec, cl_reach
from .dt_reach import DTSystem, dt_reach
from .flowpipe import FlowpipeParams, StepFailure, VectorField, ct_reach
from .interval import DTYPE, IntervalBox, box_from_center, outward_rounding
from .mpc import MPCConfig, PlanProblem, SamplerConfig, goal_cost, make_constraint, mpc_run
from .neural import MLPNet, affine_net
from .refine import SplitPlan, gradient_refine, reach_with_splitting, tube_volume
from .systems import (
    ArmParams,
    QuadrotorParams,
    arm_dt,
    link_positions,
    pendulum_dt,
    quadrotor_ode,
    swarm_ode,
)
from .training import (
    TrainConfig,
    episodes_to_tensors,
    generate_episodes,
    read_jsonl,
    tensors_to_episodes,
    train_ct_ctl,
    train_dt_dyn,
    write_jsonl,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIMENSION = 3
EXIT_STEP_FAILURE = 4
EXIT_DIVERGED = 5

COMMANDS = ["reach-ct", "reach-dt", "reach-cl", "split", "refine", "train-dt", "train-ctl", "mpc", "bench"]


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class Diverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _load_json_arg(text):
    """Inline JSON, or a path to a JSON file."""
    if text is None:
        return None
    s = str(text).strip()
    if s[:1] in "[{" or s[:1].isdigit() or s[:1] == "-":
        return json.loads(s)
    return json.loads(Path(s).read_text())


def bundled_example(name: str) -> dict:
    ref = resources.files("tmreach") / "data" / f"{name}_example.json"
    if not ref.is_file():
        raise ConfigError(f"no bundled example named {name!r}")
    return json.loads(ref.read_text())


def _x0_box(cfg, n: int, default_center=None, default_eps=None) -> IntervalBox:
    center = _floats(cfg.get("x0_center"))
    if center is None:
        center = list(default_center) if default_center is not None else [0.0] * n
    eps = _floats(cfg.get("eps"))
    if eps is None:
        eps = list(default_eps) if default_eps is not None else [0.0]
    if len(eps) == 1:
        eps = eps * n
    if len(center) != n or len(eps) != n:
        raise DimensionError(f"x0 center/eps must have {n} entries (got {len(center)} and {len(eps)})")
    if any(e < 0 for e in eps):
        raise ConfigError("eps must be non-negative")
    return box_from_center(torch.tensor(center, dtype=DTYPE), torch.tensor(eps, dtype=DTYPE))


def _split_plan(cfg, n: int):
    if cfg.get("split"):
        return SplitPlan.parse(cfg["split"], n)
    if cfg.get("split_preset"):
        return SplitPlan.preset(cfg["split_preset"], n)
    return None


# ---------------------------------------------------------------------------
# systems


def _ct_system(cfg):
    """(VectorField, default x0 center, default eps, default constant input)."""
    if cfg.get("net"):
        net = MLPNet.load(cfg["net"])
        m = int(cfg.get("m") or 0)
        n = net.output_dim
        if net.input_dim != n + m:
            raise DimensionError(f"network has {net.input_dim} inputs but n + m = {n + m}")
        return VectorField(n, net=net, m=m, name=Path(cfg["net"]).stem), None, None, [0.0] * m
    name = cfg.get("system") or "quadrotor"
    if name == "quadrotor":
        P = QuadrotorParams()
        return (VectorField(12, fn=quadrotor_ode, m=4, name=name), None,
                [0.05] * 6 + [0.01] * 6, [P.hover_thrust, 0.0, 0.0, 0.0])
    if name == "swarm":
        center = [0.0] * 72
        for a in range(6):
            ang = 2 * math.pi * a / 6
            center[12 * a] = math.cos(ang)
            center[12 * a + 1] = math.sin(ang)
        return VectorField(72, fn=swarm_ode, m=18, name=name), center, [0.05] * 72, [0.0] * 18
    raise ConfigError(f"unknown continuous-time system {name!r}")


def _dt_system(cfg, H: int):
    """(DTSystem, default center, default eps, default actions or None)."""
    if cfg.get("example"):
        ex = bundled_example(cfg["example"])
        return _affine_system(ex, H if cfg.get("steps") is not None else len(ex["actions"]))
    if cfg.get("system_file"):
        ex = json.loads(Path(cfg["system_file"]).read_text())
        return _affine_system(ex, H if cfg.get("steps") is not None else len(ex["actions"]))
    if cfg.get("net"):
        net = MLPNet.load(cfg["net"])
        n = net.output_dim
        m = net.input_dim - n
        if m < 0:
            raise DimensionError("network has fewer inputs than outputs")
        return DTSystem(n, m, H, net=net, residual=bool(cfg.get("residual")), name=Path(cfg["net"]).stem), None, None, None
    name = cfg.get("system") or "arm"
    if name == "arm":
        P = ArmParams()
        q = torch.full((P.joints,), 0.1, dtype=DTYPE)
        center = torch.cat([q, torch.zeros(P.joints, dtype=DTYPE), link_positions(q, P)]).tolist()
        eps = [0.0] * P.joints + [0.1] * P.joints + [0.0] * (2 * P.joints)
        return DTSystem(P.n, P.joints, H, fn=lambda x, u: arm_dt(x, u, P), name=name), center, eps, None
    if name == "pendulum":
        return DTSystem(2, 1, H, fn=pendulum_dt, name=name), [0.3, 0.0], [0.05], None
    raise ConfigError(f"unknown discrete-time system {name!r}")


def _affine_system(ex: dict, H: int):
    M = torch.tensor(ex["M"], dtype=DTYPE)
    N = torch.tensor(ex["N"], dtype=DTYPE)
    d = torch.tensor(ex["d"], dtype=DTYPE)
    n, m = M.shape[0], N.shape[1]
    sys_ = DTSystem(n, m, H, net=affine_net(M, N, d), name=ex.get("name", "affine"))
    return sys_, ex.get("x0_center"), ex.get("eps"), ex.get("actions")


# ---------------------------------------------------------------------------
# commands; each returns {filename: text}


def _tube_outputs(tube, with_time=True, prefix="tube"):
    return {f"{prefix}.csv": tube.to_csv(with_time=with_time), f"{prefix}.json": tube.to_json()}


def _raise_on_failure(tube):
    if tube.any_diverged:
        fail = tube.meta.get("failure", {})
        if "ratio" not in fail:
            raise Diverged(f"reach tube became unbounded at step {fail.get('step')}")
        raise StepFailure(f"reach tube diverged at step {fail.get('step')}", fail.get("ratio", math.inf),
                          fail.get("step"))


def _ct_inputs(cfg, field, default_u, N):
    u = _floats(cfg.get("inputs"))
    if u is None:
        u = default_u
    if len(u) != field.m:
        raise DimensionError(f"inputs need {field.m} entries, got {len(u)}")
    return torch.tensor(u, dtype=DTYPE)


def cmd_reach_ct(cfg):
    field, center, eps, u0 = _ct_system(cfg)
    X0 = _x0_box(cfg, field.n, center, eps)
    N = int(cfg.get("steps") or 100)
    params = FlowpipeParams(h=float(cfg.get("h") or 0.02), N=N, k=int(cfg.get("order") or 2),
                            M=int(cfg.get("slots") if cfg.get("slots") is not None else 4))
    u = _ct_inputs(cfg, field, u0, N)
    plan = _split_plan(cfg, field.n)
    engine = lambda X: ct_reach(field, X, params, u)  # noqa: E731
    tube = reach_with_splitting(engine, X0, plan) if plan else engine(X0)
    out = _tube_outputs(tube)
    if cfg.get("baseline") == "interval":
        out.update(_tube_outputs(interval_baseline_ct(field, X0, params, u), prefix="baseline"))
    _raise_on_failure(tube)
    return out, {"volume": float(tube_volume(tube))}


def _dt_actions(cfg, sys_, default):
    acts = _load_json_arg(cfg.get("actions"))
    if acts is None:
        acts = default if default is not None else [[0.0] * sys_.m] * sys_.H
    A = torch.tensor(acts, dtype=DTYPE)
    if A.dim() != 2 or A.shape[1] != sys_.m:
        raise DimensionError(f"actions must be a list of {sys_.m}-vectors")
    if A.shape[0] < sys_.H:
        raise DimensionError(f"need {sys_.H} actions, got {A.shape[0]}")
    return A[:sys_.H]


def cmd_reach_dt(cfg):
    H = int(cfg["steps"]) if cfg.get("steps") is not None else 10
    sys_, center, eps, acts = _dt_system(cfg, H)
    X0 = _x0_box(cfg, sys_.n, center, eps)
    A = _dt_actions(cfg, sys_, acts)
    plan = _split_plan(cfg, sys_.n)
    engine = lambda X: dt_reach(sys_, X, A.expand(X.batch_shape + A.shape))  # noqa: E731
    tube = reach_with_splitting(engine, X0, plan) if plan else engine(X0)
    out = _tube_outputs(tube, with_time=False)
    if cfg.get("baseline") == "interval":
        out.update(_tube_outputs(interval_baseline_dt(sys_, X0, A), with_time=False, prefix="baseline"))
    _raise_on_failure(tube)
    return out, {"volume": float(tube_volume(tube))}


def cmd_reach_cl(cfg):
    field, center, eps, _ = _ct_system(cfg)
    if not cfg.get("controller"):
        raise ConfigError("reach-cl needs --controller PATH")
    ctl = MLPNet.load(cfg["controller"])
    refs = _load_json_arg(cfg.get("refs"))
    r = 0 if refs is None else len(refs[0])
    if ctl.input_dim != field.n + r or ctl.output_dim != field.m:
        raise DimensionError(f"controller maps {ctl.input_dim} -> {ctl.output_dim}, "
                             f"system needs {field.n + r} -> {field.m}")
    X0 = _x0_box(cfg, field.n, center, eps)
    N_ctl = int(cfg.get("steps") or 10)
    spec = ClosedLoopSpec(field, ctl, int(cfg.get("K") or 5), N_ctl,
                          FlowpipeParams(h=float(cfg.get("h") or 0.02), N=0, k=int(cfg.get("order") or 2)),
                          None if refs is None else torch.tensor(refs, dtype=DTYPE))
    plan = _split_plan(cfg, field.n)
    engine = lambda X: cl_reach(spec, X)  # noqa: E731
    tube = reach_with_splitting(engine, X0, plan) if plan else engine(X0)
    _raise_on_failure(tube)
    return _tube_outputs(tube), {"volume": float(tube_volume(tube))}


def cmd_split(cfg):
    engine = cfg.get("engine") or "ct"
    if not (cfg.get("split") or cfg.get("split_preset")):
        raise ConfigError("split needs --split or --split-preset")
    return {"ct": cmd_reach_ct, "dt": cmd_reach_dt, "cl": cmd_reach_cl}[engine](cfg)


def cmd_refine(cfg):
    """Refine a piecewise-constant input sequence to shrink the CT tube volume."""
    field, center, eps, u0 = _ct_system(cfg)
    X0 = _x0_box(cfg, field.n, center, eps)
    N = int(cfg.get("steps") or 20)
    params = FlowpipeParams(h=float(cfg.get("h") or 0.02), N=N, k=int(cfg.get("order") or 2))
    u = _ct_inputs(cfg, field, u0, N).expand(N, field.m).clone()
    radius = float(cfg.get("input_radius") or 0.5)
    lo, hi = u - radius, u + radius
    obj = lambda a: tube_volume(ct_reach(field, X0, params, a))  # noqa: E731
    res = gradient_refine(obj, u, int(cfg.get("grad_iters") or 20), lo, hi, step=float(cfg.get("step") or 1e-3))
    tube = ct_reach(field, X0, params, res.x)
    out = _tube_outputs(tube)
    out["refined_inputs.json"] = json.dumps(res.x.tolist())
    out["refine_history.csv"] = "iter,volume\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.history))
    return out, {"initial_volume": res.initial_value, "volume": res.value}


def _episodes(cfg, default_system: str):
    if cfg.get("data"):
        X, U, R = episodes_to_tensors(read_jsonl(Path(cfg["data"]).read_text()))
        return X, U, R
    name = cfg.get("system") or default_system
    g = torch.Generator().manual_seed(int(cfg.get("seed") or 0))
    count = int(cfg.get("episodes") or 256)
    T = int(cfg.get("horizon") or 5)
    if name == "pendulum":
        X, U = generate_episodes(pendulum_dt, [-1, -1], [1, 1], [-1], [1], count, T, g)
        return X, U, None
    raise ConfigError(f"no data generator for system {name!r}")


def _train_config(cfg, T):
    return TrainConfig(T_max=int(cfg.get("horizon") or T), eps_final=float(cfg.get("eps_final") or 0.05),
                       eps0=float(cfg.get("eps0") or 0.2), lam=float(cfg.get("lam") or 0.0),
                       iters=int(cfg.get("iters") or 200), lr=float(cfg.get("lr") or 3e-3),
                       seed=int(cfg.get("seed") or 0), curriculum=not cfg.get("no_curriculum"))


def cmd_train_dt(cfg):
    X, U, _ = _episodes(cfg, "pendulum")
    res = train_dt_dyn(_train_config(cfg, U.shape[1]), X, U)
    return {"model.json": res.net.to_json(), "train_log.csv": res.log_csv(),
            "data.jsonl": write_jsonl(tensors_to_episodes(X, U))}, {"final_L_total": res.log[-1]["L_total"]}


def cmd_train_ctl(cfg):
    """Imitate a linear feedback law on the double integrator (controller demo)."""
    from .systems import linear_field
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    Kfb = torch.tensor([[-2.0, -3.0]], dtype=DTYPE)
    field = VectorField(2, fn=linear_field(A, B), m=1, name="double_integrator")
    g = torch.Generator().manual_seed(int(cfg.get("seed") or 0))
    K, h = int(cfg.get("K") or 5), float(cfg.get("h") or 0.02)
    T = int(cfg.get("horizon") or 5)
    x = torch.rand((int(cfg.get("episodes") or 64), 2), generator=g, dtype=DTYPE) * 2 - 1
    from .sim import rk4_step
    xs, us = [x], []
    for _ in range(T):
        u = x @ Kfb.T
        x = rk4_step(field, x, u, K * h, 4)
        xs.append(x)
        us.append(u)
    X, U = torch.stack(xs, 1), torch.stack(us, 1)
    tc = _train_config(cfg, T)
    tc.hidden = (16,)
    res = train_ct_ctl(tc, X, U, field, K, h)
    return {"controller.json": res.net.to_json(), "train_log.csv": res.log_csv()}, \
        {"final_L_total": res.log[-1]["L_total"]}


def cmd_mpc(cfg):
    sc = _load_json_arg(cfg.get("scenario"))
    if sc is None:
        raise ConfigError("mpc needs --scenario (JSON or path)")
    dt = float(sc.get("dt", 0.1))
    H = int(sc.get("horizon", 10))
    if sc.get("model"):
        net = MLPNet.from_dict(sc["model"]) if isinstance(sc["model"], dict) else MLPNet.load(sc["model"])
        sys_ = DTSystem(3, 3, H, net=net, residual=True, name="learned")
    else:
        sys_ = DTSystem(3, 3, H, fn=lambda x, u: x + dt * u, name="kinematic")
    cons = [make_constraint(c) for c in sc.get("constraints", [])]
    goal = sc["goal"]
    prob = PlanProblem(sys_, goal_cost(goal), cons, float(sc.get("C", 100.0)),
                       sc.get("u_lo", [-1.0] * 3), sc.get("u_hi", [1.0] * 3), float(sc.get("eps", 0.0)))
    sampler = SamplerConfig(**sc.get("sampler", {}))
    dist = sc.get("disturbances", {})
    mcfg = MPCConfig(plan_dist=float(dist.get("plan", 0.0)), ctl_dist=float(dist.get("control", 0.0)),
                     **sc.get("mpc", {}))
    simf = lambda x, u, wp, wc: x + dt * (u + wp + wc)  # noqa: E731
    res = mpc_run(prob, sampler, mcfg, simf, sc["x0"], goal, seed=int(cfg.get("seed") or 0))
    lines = ["step,state,action,objective,tube_volume,G_margin"]
    for r in res.log:
        lines.append(",".join([str(r["step"]), " ".join(repr(v) for v in r["state"]),
                               " ".join(repr(v) for v in r["action"]), repr(r["objective"]),
                               repr(r["tube_volume"]), repr(r["G_margin"])]))
    return {"mpc_log.csv": "\n".join(lines) + "\n"}, {"success": res.success, "reason": res.reason}


def cmd_bench(cfg):
    """Runtime of quadrotor vs swarm flowpipes at equal step counts."""
    N = int(cfg.get("steps") or 20)
    # wall-clock times are not reproducible, so they go to the summary, not to a file
    rows = ["system,n,steps,volume"]
    timing = {}
    for name in ("quadrotor", "swarm"):
        field, center, eps, u0 = _ct_system({"system": name})
        X0 = _x0_box({}, field.n, center, eps)
        params = FlowpipeParams(h=float(cfg.get("h") or 0.02), N=N)
        t0 = time.perf_counter()
        tube = ct_reach(field, X0, params, torch.tensor(u0, dtype=DTYPE))
        timing[name] = time.perf_counter() - t0
        rows.append(f"{name},{field.n},{N},{float(tube_volume(tube))!r}")
    summary = {"seconds": timing, "ratio": timing["swarm"] / timing["quadrotor"]}
    return {"bench_volumes.csv": "\n".join(rows) + "\n"}, summary


HANDLERS = {
    "reach-ct": cmd_reach_ct, "reach-dt": cmd_reach_dt, "reach-cl": cmd_reach_cl, "split": cmd_split,
    "refine": cmd_refine, "train-dt": cmd_train_dt, "train-ctl": cmd_train_ctl, "mpc": cmd_mpc,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# orchestration


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def run(config: dict) -> int:
    """Execute a config dict; writes outputs and manifest into config['out']."""
    cmd = config.get("command")
    out_dir = Path(config.get("out") or "tmreach-out")
    try:
        if cmd not in HANDLERS:
            raise ConfigError(f"unknown command {cmd!r}")
        torch.manual_seed(int(config.get("seed") or 0))
        with outward_rounding(bool(config.get("sound_rounding"))):
            outputs, summary = HANDLERS[cmd](config)
    except (DimensionError,) as e:
        print(f"dimension error: {e}", file=sys.stderr)
        return EXIT_DIMENSION
    except StepFailure as e:
        print(f"step failure: {e}", file=sys.stderr)
        return EXIT_STEP_FAILURE
    except Diverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        # shape checks inside the engines
        print(f"dimension error: {e}", file=sys.stderr)
        return EXIT_DIMENSION
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in outputs.items():
        (out_dir / name).write_text(text)
    manifest = {
        "command": cmd,
        "config": {k: v for k, v in config.items() if k != "out"},
        "seed": int(config.get("seed") or 0),
        "version": __version__,
        "threads": torch.get_num_threads(),
        "outputs": {name: _digest(text) for name, text in sorted(outputs.items())},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, default=float))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmreach", description="Taylor-model reachability for neural and analytical systems")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--system", help="registered system name")
    a("--net", help="network JSON (dynamics)")
    a("--m", type=int, help="input dim for --net continuous-time fields")
    a("--residual", action="store_true", help="DT network predicts the state increment")
    a("--example", help="bundled example name (e.g. affine)")
    a("--system-file", dest="system_file", help="affine system JSON")
    a("--controller", help="controller network JSON (reach-cl)")
    a("--refs", help="reference sequence, JSON or path")
    a("--x0-center", dest="x0_center", help="comma-separated center")
    a("--eps", help="radius, scalar or comma-separated")
    a("--h", type=float, help="atomic step size")
    a("--steps", type=int, help="number of steps (horizon)")
    a("--K", type=int, help="atomic steps per control interval")
    a("--order", type=int, help="Picard polynomial order")
    a("--slots", type=int, help="symbolic remainder slots")
    a("--inputs", help="constant input, comma-separated")
    a("--actions", help="action sequence, JSON or path")
    a("--split", help="split counts, e.g. 2x2x1")
    a("--split-preset", dest="split_preset", help="e.g. rpy:8")
    a("--engine", choices=["ct", "dt", "cl"], help="engine for the split command")
    a("--grad-iters", dest="grad_iters", type=int, help="gradient refinement iterations")
    a("--input-radius", dest="input_radius", type=float, help="refine: allowed input deviation")
    a("--step", type=float, help="refine: initial step size")
    a("--data", help="episodes JSON-lines")
    a("--episodes", type=int)
    a("--horizon", type=int)
    a("--iters", type=int)
    a("--lam", type=float)
    a("--lr", type=float)
    a("--eps0", type=float)
    a("--eps-final", dest="eps_final", type=float)
    a("--no-curriculum", dest="no_curriculum", action="store_true")
    a("--scenario", help="MPC scenario, JSON or path")
    a("--seed", type=int, default=0)
    a("--out", default="tmreach-out")
    a("--sound-rounding", dest="sound_rounding", action="store_true",
      help="round every interval endpoint outward")
    a("--baseline", choices=["interval"], help="also write an interval baseline tube")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    rp = sub.add_parser("replay", help="re-run from a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        man = json.loads(Path(args.manifest).read_text())
        config = dict(man["config"], out=args.out)
        return run(config)
    config = {k: v for k, v in vars(args).items() if v is not None and v is not False}
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
