"""Command-line entry point ``dqctrl``.

Every subcommand takes ``--config <file>`` and ``--out <dir>`` and writes a
``report.json`` with the config echo next to its CSV outputs.  Failures
exit nonzero and still write a report describing the error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .controls import ControlPair
from .forward import balance_check, solve_state
from .grid import h1_norm, norm
from .io import read_field_csv, write_field_csv, write_report
from .model import InitialData, mollify_initial_data
from .optimize import (
    deep_quench_continuation,
    gradient_check,
    proximal_gradient_solve,
    sparsity_report,
)

SUBCOMMANDS = ("forward", "gradcheck", "optimize", "continuation", "sparsity-report", "mollify")


def _grid_meta(cfg: RunConfig) -> dict:
    g, tg = cfg.grid(), cfg.tgrid()
    return {"dim": g.dim, "nodes_per_axis": g.nodes_per_axis, "axis_length": g.axis_length,
            "spacing": g.spacing, "horizon": tg.horizon, "steps": tg.steps, "dt": tg.dt}


def _write_state(out: Path, times, traj):
    for name in ("mu", "phi", "sigma", "xi"):
        write_field_csv(out / f"state_{name}.csv", times, getattr(traj, name))


def _write_control(out: Path, times, u: ControlPair, tag="control"):
    write_field_csv(out / f"{tag}_u1.csv", times, u.u1)
    write_field_csv(out / f"{tag}_u2.csv", times, u.u2)


def _write_optimum(out: Path, times, res):
    _write_control(out, times, res.u)
    _write_state(out, times, res.state)
    for name in ("p", "q", "r"):
        write_field_csv(out / f"adjoint_{name}.csv", times, getattr(res.adjoint, name))
    write_field_csv(out / "gradient_d1.csv", times, res.gradient.d1)
    write_field_csv(out / "gradient_d2.csv", times, res.gradient.d2)
    write_field_csv(out / "lambda_1.csv", times, res.subgradient.lambda1)
    write_field_csv(out / "lambda_2.csv", times, res.subgradient.lambda2)


def _optimize(cfg: RunConfig):
    pb = cfg.problem()
    spec = cfg.spec()
    if spec.is_obstacle:
        raise ValueError("optimize runs at a deep-quench gamma; use continuation for the obstacle limit")
    cost = cfg.cost(pb.grid, pb.tgrid)
    u0 = ControlPair.zeros(pb.grid, pb.tgrid)
    res = proximal_gradient_solve(pb, spec.gamma, cost, u0, tol=cfg["optimize.tol"], max_iter=cfg["optimize.max_iter"],
                                  method=cfg["optimize.method"])
    return pb, res


def cmd_forward(cfg: RunConfig, out: Path) -> dict:
    g, tg = cfg.grid(), cfg.tgrid()
    params, spec = cfg.params(), cfg.spec()
    init = cfg.initial_data(g)
    u = cfg.control(g, tg)
    traj = solve_state(g, tg, params, spec, init, u, cfg.solve_opts())
    _write_state(out, tg.times, traj)
    return {
        "balance_defect": balance_check(g, tg, params, traj, u),
        "max_abs_phi": float(np.max(np.abs(traj.phi))),
        "separation_margin": traj.separation_margin(),
        "newton_iterations": traj.newton_iterations,
        "final_residuals": traj.final_residuals,
    }


def cmd_gradcheck(cfg: RunConfig, out: Path) -> dict:
    pb = cfg.problem()
    spec = cfg.spec()
    if spec.is_obstacle:
        raise ValueError("gradcheck needs a deep-quench potential")
    cost = cfg.cost(pb.grid, pb.tgrid)
    rng = np.random.default_rng(cfg["seed"] + 2)
    b = pb.bounds
    shape = (pb.tgrid.steps + 1, pb.grid.size)
    u = ControlPair(rng.uniform(b.u1_min, b.u1_max, shape), rng.uniform(b.u2_min, b.u2_max, shape), b)
    rep = gradient_check(pb, spec.gamma, cost, u, cfg["gradcheck.directions"], cfg["gradcheck.eps"], cfg["seed"] + 3)
    _write_control(out, pb.tgrid.times, u)
    return rep


def cmd_optimize(cfg: RunConfig, out: Path) -> dict:
    pb, res = _optimize(cfg)
    _write_optimum(out, pb.tgrid.times, res)
    return res.report


def cmd_continuation(cfg: RunConfig, out: Path) -> dict:
    pb = cfg.problem()
    cost = cfg.cost(pb.grid, pb.tgrid)
    u0 = ControlPair.zeros(pb.grid, pb.tgrid)
    res = deep_quench_continuation(pb, cfg.schedule(), cost, u0, tol=cfg["optimize.tol"],
                                   max_iter=cfg["optimize.max_iter"], stop_rel=cfg["continuation.stop_rel"],
                                   anchor_first=cfg["cost.adapted"], method=cfg["optimize.method"])
    _write_optimum(out, pb.tgrid.times, res.stages[-1])
    for name in ("mu", "phi", "sigma", "xi"):
        write_field_csv(out / f"state_obstacle_{name}.csv", pb.tgrid.times, getattr(res.obstacle_state, name))
    return {"stages": res.records, "limit_residual": res.limit_residual, "stopped_early": res.stopped_early,
            "obstacle_max_abs_phi": float(np.max(np.abs(res.obstacle_state.phi)))}


def cmd_sparsity_report(cfg: RunConfig, out: Path, input_dir: Path | None = None) -> dict:
    if cfg["sparsity.kind"] != "time":
        raise ValueError("sparsity-report needs sparsity.kind = time")
    kappa = cfg["cost.kappa"]
    if input_dir is not None:
        u = np.stack([read_field_csv(input_dir / f"control_u{i}.csv")[1] for i in (1, 2)])
        d = np.stack([read_field_csv(input_dir / f"gradient_d{i}.csv")[1] for i in (1, 2)])
        g = cfg.grid()
        extra = {"source": "input"}
    else:
        pb, res = _optimize(cfg)
        _write_optimum(out, pb.tgrid.times, res)
        u, d, g = res.u.stack(), res.gradient.stack(), pb.grid
        extra = {"source": "optimize", "optimization": res.report}
    rep = sparsity_report(g, u, d, kappa)
    return {**extra, "sparsity": rep}


def cmd_mollify(cfg: RunConfig, out: Path) -> dict:
    g = cfg.grid()
    rng = np.random.default_rng(cfg["seed"])
    phi0 = np.atleast_2d(cfg.phi_field("init", g, rng))[0]
    base = InitialData(np.full(g.size, cfg["init.mu_value"]), phi0, np.full(g.size, cfg["init.sigma_value"]))
    gammas = sorted(cfg["mollify.gammas"], reverse=True)
    rows, fields = [], []
    for gam in gammas:
        m = mollify_initial_data(g, gam, base)
        fields.append(m.phi0)
        rows.append({"gamma": gam, "max_abs_phi": float(np.max(np.abs(m.phi0))), "band": 1 - gam / 2,
                     "within_band": bool(np.max(np.abs(m.phi0)) <= 1 - gam / 2),
                     "h1_norm": h1_norm(g, m.phi0), "l2_distance": norm(g, m.phi0 - phi0)})
    write_field_csv(out / "mollified_phi0.csv", np.array(gammas), np.array(fields))
    return {"input_h1_norm": h1_norm(g, phi0), "rows": rows}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dqctrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", required=True, type=Path)
        if name == "sparsity-report":
            sp.add_argument("--input", type=Path, default=None, help="directory with control and gradient CSVs")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": args.command}
    try:
        cfg = parse_config(args.config.read_text())
        report["config"] = cfg.echo()
        report["grid"] = _grid_meta(cfg)
        if args.command == "sparsity-report":
            body = cmd_sparsity_report(cfg, out, args.input)
        else:
            body = {
                "forward": cmd_forward,
                "gradcheck": cmd_gradcheck,
                "optimize": cmd_optimize,
                "continuation": cmd_continuation,
                "mollify": cmd_mollify,
            }[args.command](cfg, out)
        report.update(status="ok", result=body)
        code = 0
    except ConfigError as exc:
        report.update(status="error", error={"type": "ConfigError", "problems": exc.problems})
        code = 2
    except (OSError, ValueError, RuntimeError) as exc:
        report.update(status="error", error={"type": type(exc).__name__, "message": str(exc)})
        code = 1
    write_report(out / "report.json", report)
    if code:
        print(f"dqctrl {args.command}: {report['error']}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
