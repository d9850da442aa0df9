"""Command-line entry point: ``ssgmanip {run,baseline,gradcheck,plan,game}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import ExperimentConfig, emit_plotdata, run_matrix
from .behavior import ModelKind
from .defender import PGDConfig
from .diffopt import SolverError
from .game import GameInstance, generate_covariance_game
from .gradcheck import check_total_gradient
from .planner import (evaluate_plan, nonmanipulative_baseline, optimize_plan,
                      per_step_utilities, random_plan)


def _load_game(path: str) -> GameInstance:
    return GameInstance.from_json(Path(path).read_text())


def _load_cfg(path) -> PGDConfig:
    return PGDConfig.from_dict(json.loads(Path(path).read_text())) if path else PGDConfig()


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    result = run_matrix(config, workers=args.workers)
    emit_plotdata(result.records, Path(config.output_dir) / "plotdata")
    print(f"{len(result.records)} runs, {result.n_errors} errors -> {config.output_dir}")
    return 0 if result.n_errors == 0 else 1


def cmd_baseline(args) -> int:
    game = _load_game(args.game)
    T = args.horizon or game.horizon
    plan, traj = nonmanipulative_baseline(game, T)
    util = per_step_utilities(game, traj.strategies, traj.attacks)
    _emit({"plan": plan.to_dict(), "strategies": traj.strategies.tolist(),
           "att_util_per_step": util.attacker, "def_util_per_step": util.defender}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    game = _load_game(args.game)
    cfg = _load_cfg(args.cfg)
    T = args.horizon or max(game.horizon, 2)
    if args.plan:
        z = np.asarray(json.loads(Path(args.plan).read_text())["z"], dtype=float)
    else:
        z = random_plan(game, T, np.random.default_rng(args.seed))
    report = check_total_gradient(game, z, args.model, cfg, args.eps)
    d = report.to_dict()
    d["tolerance"] = args.tol
    d["passed"] = (not report.usable) or report.rel_err <= args.tol
    _emit(d, args.out)
    return 0 if d["passed"] else 1


def cmd_plan(args) -> int:
    game = _load_game(args.game)
    cfg = _load_cfg(args.cfg)
    if args.horizon:
        game = game.with_settings(horizon=args.horizon)
    res = optimize_plan(game, args.attacker, args.defender, cfg, args.restarts)
    plan, traj, util = evaluate_plan(game, res.plan, args.attacker, args.defender, cfg,
                                     solver=args.solver)
    _emit({"relaxed_plan": res.plan.to_dict(), "relaxed_F": res.trajectory.total_utility,
           "restart_values": res.restart_values, "rounded_plan": plan.to_dict(),
           "trajectory": traj.to_dict(), "att_util_per_step": util.attacker,
           "def_util_per_step": util.defender, "runtime_sec": res.runtime_sec,
           "converged": res.converged and traj.converged}, args.out)
    return 0


def cmd_game(args) -> int:
    game = generate_covariance_game(args.targets, args.r, args.seed, args.ratio,
                                    max_attacks=args.K, horizon=args.horizon)
    _emit(game.to_dict(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssgmanip",
                                description="Manipulative attack planning against learning defenders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in ModelKind]

    r = sub.add_parser("run", help="run an experiment matrix from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--workers", type=int, help="overrides SSGMANIP_WORKERS")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("baseline", help="per-step utilities when both sides repeat the SSE")
    b.add_argument("--game", required=True)
    b.add_argument("--horizon", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_baseline)

    g = sub.add_parser("gradcheck", help="compare dF/dz with central differences")
    g.add_argument("--game", required=True)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--model", choices=kinds, default="QR")
    g.add_argument("--plan", help="JSON file with a 'z' matrix; default a random plan")
    g.add_argument("--horizon", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cfg")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plan", help="optimise and evaluate an attack plan")
    pl.add_argument("--game", required=True)
    pl.add_argument("--attacker", choices=kinds, required=True)
    pl.add_argument("--defender", choices=kinds, required=True)
    pl.add_argument("--solver", choices=["pgd", "alt"], default="pgd")
    pl.add_argument("--restarts", type=int)
    pl.add_argument("--horizon", type=int)
    pl.add_argument("--cfg")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plan)

    gm = sub.add_parser("game", help="generate a covariance game as JSON")
    gm.add_argument("--targets", type=int, required=True)
    gm.add_argument("--r", type=float, default=-1.0)
    gm.add_argument("--seed", type=int, default=0)
    gm.add_argument("--ratio", type=float, default=0.5)
    gm.add_argument("--K", type=int, default=50)
    gm.add_argument("--horizon", type=int, default=2)
    gm.add_argument("--out")
    gm.set_defaults(func=cmd_game)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
