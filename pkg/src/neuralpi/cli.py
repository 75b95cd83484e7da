"""Command-line entry point.

Exit codes: 0 pass, 1 check failure, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (EquilibriumError, analytic_equilibrium, design1_equilibrium, kkt_residual,
                       lyapunov_decrement)
from .config import ConfigError, ExperimentConfig, load_config
from .control import DenseNN, NeuralPI, ZeroController, controller_from_dict, save_controller
from .dynamics import FlowSolveError, IntegrationError, SystemModel, closed_loop_deriv, rollout
from .monotone import dump_table
from .train import TrainingError, gen_scenarios, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("neuralpi")


class UsageError(Exception):
    pass


def max_threads() -> int:
    """Worker cap from ``NEURALPI_THREADS`` (default: CPU count)."""
    raw = os.environ.get("NEURALPI_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        v = int(raw)
    except ValueError as exc:
        raise UsageError(f"NEURALPI_THREADS must be a positive integer, got {raw!r}") from exc
    if v < 1:
        raise UsageError(f"NEURALPI_THREADS must be a positive integer, got {raw!r}")
    return v


def _pmap(fn, items):
    """Ordered map over independent work items, bounded by ``max_threads()``."""
    items = list(items)
    workers = min(max_threads(), len(items)) or 1
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out or (cfg["out"] if cfg is not None else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ctrl(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read controller file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"controller file {path} is not valid JSON: {exc}") from exc
    try:
        return controller_from_dict(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"controller file {path} is malformed: {exc}") from exc


def _setup(args):
    cfg = load_config(args.config, preset=args.preset, seed=args.seed)
    model = cfg.build_model()
    edges_file = getattr(args, "edges", None)
    if edges_file:
        from .dynamics import edges_from_dict

        with open(edges_file) as fh:
            model = model.with_edges(edges_from_dict(json.load(fh)))
    if getattr(args, "controller", None):
        ctrl = _load_ctrl(args.controller)
    else:
        ctrl = cfg.build_controller()
    n_ctrl = _ctrl_size(ctrl)
    if n_ctrl is not None and n_ctrl != model.n:
        raise UsageError(f"controller is sized for n={n_ctrl} but the system has n={model.n}")
    return cfg, model, ctrl


def _ctrl_size(ctrl):
    if isinstance(ctrl, ZeroController):
        return None
    first = next(iter(ctrl.params().values()))
    return first.shape[0]


def _scenarios(cfg, model, count, seed):
    return gen_scenarios(cfg.family, count, seed, model=model)


def _run_model(model, sc, b):
    if sc.loads is None:
        return model
    nd = model.nodes
    return model.with_nodes(type(nd)(nd.rho, nd.p_m, sc.loads[b], nd.x_bar))


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg, model, ctrl = _setup(args)
    si = cfg["simulate"]
    scheme = args.scheme or si["scheme"]
    sc = _scenarios(cfg, model, si["runs"], si["seed"])
    if si["init"] == "equilibrium":
        sc = _equilibrium_scenarios(cfg, model, ctrl, sc)
    K = int(round(si["T"] / si["dt"]))
    try:
        traj = rollout(sc.model_for(model), ctrl, sc.x0, sc.eta0, sc.s0, K, si["dt"], scheme)
    except IntegrationError as exc:
        print(f"integration blew up at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out = _out_dir(args, cfg)
    for b in range(traj.B):
        (out / f"trajectory_{b}.csv").write_text(traj.to_csv(b))
    summary = traj.summary(si["eps"])
    summary["steady_cost"] = [float(np.sum(cfg.cost_coefficients()
                                           * traj.w[b, min(int(round(si["sample_time"] / si["dt"])), K)]
                                           ** cfg["cost"]["p"])) for b in range(traj.B)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({"agreement_error": [r["agreement_error"] for r in summary["runs"]],
                      "range_violation": traj.flagged}))
    if traj.flagged:
        print("edge states left the monotone operating range", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _equilibrium_scenarios(cfg, model, ctrl, sc):
    """Replace each run's initial state by the closed-loop equilibrium it would reach."""
    if not hasattr(ctrl, "r"):
        raise UsageError("simulate.init = 'equilibrium' needs a PI-type controller")
    x0, eta0, s0 = sc.x0.copy(), sc.eta0.copy(), sc.s0.copy()
    for b in range(len(sc)):
        eq = _equilibrium_for(cfg, _run_model(model, sc, b), ctrl, sc.eta0[b], sc.s0[b])
        x0[b], eta0[b], s0[b] = eq.x_star, eq.eta_star, eq.s_star
    return type(sc)(x0, eta0, s0, sc.loads)


def cmd_train(args) -> int:
    cfg, model, ctrl = _setup(args)
    tc = cfg.train_config()
    out = _out_dir(args, cfg)

    def on_ckpt(ep, c, m):
        (out / f"checkpoint_{ep:05d}.json").write_text(
            json.dumps({"episode": ep, "controller": c.to_dict(), "edges": m.edges.to_dict()}))

    try:
        res = train(model, ctrl, cfg.loss_spec(), tc, family=cfg.family, on_checkpoint=on_ckpt)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IntegrationError as exc:
        print(f"training rollout blew up at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    save_controller(res.ctrl, out / "controller.json")
    (out / "edges.json").write_text(json.dumps(res.model.edges.to_dict()))
    (out / "loss_history.csv").write_text(res.history_csv())
    (out / "history.json").write_text(json.dumps(res.history))
    if res.history:
        print(f"episode 1 loss {res.history[0]['loss']:.6g}, final loss {res.history[-1]['loss']:.6g}")
    return EXIT_OK


def _equilibrium_for(cfg, model, ctrl, eta0, s0):
    if getattr(ctrl, "comm", None) is not None:
        return analytic_equilibrium(model, ctrl.comm.cost, ctrl=ctrl, eta_ref=eta0)
    return design1_equilibrium(model, ctrl, eta0, s0)


def _check(name, passed, covered=True, **info):
    status = ("pass" if passed else "fail") if covered else "info"
    return {"name": name, "status": status, **info}


def verify_report(cfg: ExperimentConfig, model: SystemModel, ctrl) -> dict:
    """Run the property suite for one controller; see :func:`cmd_verify`."""
    si, vf = cfg["simulate"], cfg["verify"]
    covered = not isinstance(ctrl, (DenseNN, ZeroController))
    if hasattr(ctrl, "is_design1"):
        covered = covered and ctrl.is_design1()
    sc = _scenarios(cfg, model, si["runs"], si["seed"])
    K = int(round(si["T"] / si["dt"]))
    checks = []
    traj = rollout(sc.model_for(model), ctrl, sc.x0, sc.eta0, sc.s0, K, si["dt"], "rk4")
    err = traj.agreement_error()
    checks.append(_check("output_agreement", bool(np.all(err <= si["eps"])), covered,
                         max_error=float(err.max()), worst_run=int(err.argmax()), eps=si["eps"]))
    checks.append(_check("edge_range", not traj.flagged, True))
    if covered:
        def one(b):
            mb = _run_model(model, sc, b)
            try:
                eq = _equilibrium_for(cfg, mb, ctrl, sc.eta0[b], sc.s0[b])
            except (EquilibriumError, FlowSolveError) as exc:
                return {"run": b, "error": str(exc)}
            rep = lyapunov_decrement(traj, mb, ctrl, eq, b, tol_coef=vf["tol_coef"])
            dx, de, ds = closed_loop_deriv(mb, ctrl, eq.state)
            res = float(max(np.abs(dx).max(), np.abs(de).max() if de.size else 0.0, np.abs(ds).max()))
            out = {"run": b, "lyapunov": rep.to_dict(), "eq_residual": res}
            if ctrl.comm is not None:
                spread, bal = kkt_residual(ctrl.comm.cost, traj.w[b, -1], mb)
                _, bal_star = kkt_residual(ctrl.comm.cost, eq.w_star, mb)
                out.update(spread=spread, balance_star=bal_star,
                           w_error=float(np.abs(traj.w[b, -1] - eq.w_star).max()))
            return out

        runs = _pmap(one, range(traj.B))
        failed_eq = [r for r in runs if "error" in r]
        checks.append(_check("equilibrium_feasible", not failed_eq, True,
                             errors=[r["error"] for r in failed_eq]))
        ok = [r for r in runs if "error" not in r]
        checks.append(_check("lyapunov_decrement", all(r["lyapunov"]["passed"] for r in ok), True,
                             violations=sum(r["lyapunov"]["n_violations"] for r in ok),
                             worst_residual=max((r["lyapunov"]["worst_residual"] for r in ok), default=0.0)))
        worst_eq = max((r["eq_residual"] for r in ok), default=0.0)
        checks.append(_check("equilibrium_residual", worst_eq <= vf["eq_tol"], True, max_residual=worst_eq))
        if ctrl.comm is not None:
            spread = max((r["spread"] for r in ok), default=0.0)
            bal = max((r["balance_star"] for r in ok), default=0.0)
            checks.append(_check("kkt_spread", spread <= vf["kkt_tol"], True, max_spread=spread))
            checks.append(_check("kkt_balance", bal <= vf["eq_tol"], True, max_balance=bal))
            rng = np.random.default_rng(si["seed"])
            s = rng.normal(0.0, 2.0, (vf["lemma_draws"], model.n))
            cross = ctrl.comm.cross_term(ctrl.r(s))
            checks.append(_check("lemma2_cross_term", bool(cross.min() >= -1e-12), True,
                                 min_cross=float(cross.min()), draws=int(vf["lemma_draws"])))
    else:
        checks.append(_check("lyapunov_decrement", True, False, note="not covered by theorem"))
    passed = all(c["status"] != "fail" for c in checks)
    return {"passed": passed, "controller": getattr(ctrl, "variant", type(ctrl).__name__), "checks": checks}


def cmd_verify(args) -> int:
    cfg, model, ctrl = _setup(args)
    try:
        report = verify_report(cfg, model, ctrl)
    except IntegrationError as exc:
        print(f"integration blew up at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    out = _out_dir(args, cfg)
    (out / "verify_report.json").write_text(json.dumps(report, indent=2))
    for c in report["checks"]:
        print(f"{c['status'].upper():4s} {c['name']}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


def cmd_equilibrium(args) -> int:
    cfg, model, ctrl = _setup(args)
    cost = cfg.cost_family()
    eta_ref = None
    if cfg.family == "power":
        from .dynamics import power_flow

        eta_ref = power_flow(model)
    try:
        r_ctrl = ctrl if hasattr(ctrl, "r") else None
        eq = analytic_equilibrium(model, cost, ctrl=r_ctrl, eta_ref=eta_ref)
    except (EquilibriumError, FlowSolveError) as exc:
        print(f"infeasible equilibrium: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    spread, balance = kkt_residual(cost, eq.w_star, model)
    doc = eq.to_dict()
    doc.update({"marginal_cost_spread": spread, "balance_residual": balance,
                "net_demand": float(np.sum(model.k_x_inverse()))})
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        (_out_dir(args, cfg) / "equilibrium.json").write_text(text)
    return EXIT_OK


def cmd_export_monotone(args) -> int:
    if not args.controller and not args.edges:
        raise UsageError("export-monotone needs --controller or --edges")
    z = np.linspace(args.range[0], args.range[1], args.points)
    if args.which == "edge":
        if not args.edges:
            raise UsageError("--which edge needs --edges")
        from .dynamics import MonotoneEdges, edges_from_dict

        with open(args.edges) as fh:
            edges = edges_from_dict(json.load(fh))
        if not isinstance(edges, MonotoneEdges):
            raise UsageError("edge file does not hold monotone edge functions")
        text = dump_table(edges.weights, z)
    else:
        ctrl = _load_ctrl(args.controller)
        if not isinstance(ctrl, NeuralPI):
            raise UsageError("export-monotone needs a neural-pi controller")
        text = dump_table(ctrl.p_weights if args.which == "p" else ctrl.r_weights, z)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"monotone_{args.which}.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuralpi", description="Neural-PI control of networked systems")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, controller=True):
        p.add_argument("--config", required=True, help="TOML or JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--preset", choices=("paper", "desk"), default=None)
        p.add_argument("--edges", default=None, help="edge-function JSON (e.g. from train)")
        if controller:
            p.add_argument("--controller", default=None, help="controller JSON file")

    p = sub.add_parser("simulate", help="roll out a controller and export trajectories")
    common(p)
    p.add_argument("--scheme", choices=("euler", "rk4"), default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train by backpropagation through time")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run stability and optimality checks")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("equilibrium", help="closed-form optimal steady state")
    common(p)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("export-monotone", help="tabulate monotone functions as CSV")
    p.add_argument("--controller", default=None)
    p.add_argument("--edges", default=None)
    p.add_argument("--which", choices=("p", "r", "edge"), default="r")
    p.add_argument("--range", nargs=2, type=float, default=(-3.0, 3.0), metavar=("LO", "HI"))
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_monotone)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        max_threads()
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrationError, FlowSolveError, EquilibriumError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
