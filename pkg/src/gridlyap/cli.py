"""Command-line pipeline: case tooling, training runs, evaluation exports.

Every command writes its artifacts plus a run manifest (inputs, config
snapshot, seed, content hashes, metric summary) into the out directory;
``replay`` re-executes a manifest's command.  Out directory resolution:
``--out-dir`` flag, else the ``GRIDLYAP_OUT_DIR`` environment variable,
else the current directory.

Exit codes: 0 success, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import controller as ctrl
from . import grid_model, lyapunov, policy_training
from .errors import EquilibriumError, TrainingDivergedError, ValidationError
from .gradcore import GraphError

MANIFEST_SCHEMA_VERSION = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _out_dir(args) -> str:
    out = args.out_dir or os.environ.get("GRIDLYAP_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _build(cls, overrides: dict, **fixed):
    known = {f for f in cls.__dataclass_fields__}
    bad = set(overrides) - known
    if bad:
        raise ValidationError(f"config: unknown keys {sorted(bad)}")
    merged = dict(overrides)
    merged.update(fixed)
    for key in ("delta_box", "omega_box", "delta0_box", "omega0_box"):
        if key in merged:
            merged[key] = tuple(merged[key])
    return cls(**merged)


def _write_csv(path, header: list[str], rows) -> None:
    def fmt(x):
        if isinstance(x, (float, np.floating)):
            return repr(float(x))  # shortest round-trip representation
        return str(x)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(x) for x in row) + "\n")


def _write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _write_manifest(out, command, args, config_snapshot, outputs, metrics, started):
    doc = {
        "version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "argv": list(getattr(args, "_argv", [])),
        "case": (
            {"path": args.case, "sha256": _sha256(args.case)}
            if getattr(args, "case", None)
            else None
        ),
        "config": config_snapshot,
        "seed": getattr(args, "seed", None),
        "outputs": outputs,
        "metrics": metrics,
        "duration_s": time.monotonic() - started,
    }
    path = os.path.join(out, f"manifest_{command.replace(' ', '_')}.json")
    _write_json(path, doc)
    return path


def _held_out_states(seed: int, config, n: int, count: int = 100):
    # Disjoint seed stream from every training draw.
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE7]))
    return policy_training.sample_initial_states(rng, config, count, n)


# ---------------------------------------------------------------------------
# case subcommands
# ---------------------------------------------------------------------------

def cmd_case_validate(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    print(f"case ok: {case.n_buses} buses")
    _write_manifest(out, "case validate", args, {}, {}, {"n_buses": case.n_buses}, started)
    return 0


def cmd_case_kron_reduce(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    with open(args.case, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValidationError(f"version: unknown full-network schema {doc.get('version')!r}")
    n_gen = int(doc["n_gen"])
    y_real = np.asarray(doc["y_real"], dtype=np.float64).ravel()
    y_imag = np.asarray(doc["y_imag"], dtype=np.float64).ravel()
    total = int(round(np.sqrt(y_real.size)))
    if total * total != y_real.size or y_imag.size != y_real.size:
        raise ValidationError(
            f"y_real/y_imag: expected matching square matrices, got sizes "
            f"{y_real.size} and {y_imag.size}"
        )
    y = (y_real + 1j * y_imag).reshape(total, total)
    b, g = grid_model.kron_reduce(y, n_gen)
    case = grid_model.case_from_dict(
        {
            "version": 1,
            "n_buses": n_gen,
            "units": doc.get("units", {"omega": "rad_s"}),
            "B": b.ravel().tolist(),
            "G": g.ravel().tolist(),
            "M": doc["M"],
            "D": doc["D"],
            "P_m": doc["P_m"],
            "u_max": doc["u_max"],
            "u_min": doc.get("u_min", (-np.asarray(doc["u_max"])).tolist()),
        }
    )
    case_path = os.path.join(out, "reduced_case.json")
    grid_model.save_case(case, case_path)
    print(f"reduced {total - n_gen} load buses; wrote {case_path}")
    _write_manifest(
        out,
        "case kron-reduce",
        args,
        {},
        {"case": case_path},
        {"n_buses": n_gen, "n_load": total - n_gen},
        started,
    )
    return 0


def cmd_case_equilibrium(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    eq = grid_model.solve_equilibrium(case)
    path = os.path.join(out, "equilibrium.json")
    _write_json(
        path,
        {
            "version": 1,
            "delta_star": eq.state.delta.tolist(),
            "omega_star": eq.state.omega.tolist(),
            "slack_adjustment": eq.slack_adjustment.tolist(),
            "residual_norm": eq.residual_norm,
        },
    )
    print(f"equilibrium residual {eq.residual_norm:.3e}; wrote {path}")
    _write_manifest(
        out,
        "case equilibrium",
        args,
        {},
        {"equilibrium": path},
        {"residual_norm": eq.residual_norm},
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# train subcommands
# ---------------------------------------------------------------------------

def cmd_train_droop(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    cfg_doc = _load_config(args.config)
    rollout_cfg = _build(
        policy_training.RolloutConfig,
        cfg_doc.get("rollout", {}),
        rng_seed=args.seed,
        **({"dt": args.dt} if args.dt else {}),
        **({"stages": args.stages} if args.stages else {}),
    )
    droop_cfg = cfg_doc.get("droop", {})
    eq = grid_model.solve_equilibrium(case)
    droop, cost = ctrl.optimize_droop(
        case,
        eq,
        rollout_cfg,
        iters=int(droop_cfg.get("iters", 40)),
        lr=float(droop_cfg.get("lr", 0.3)),
    )
    ck_path = os.path.join(out, "droop.json")
    ctrl.save_droop(ck_path, droop, rng_seed=args.seed, cost=cost)
    print(f"droop cost {cost:.6f}; wrote {ck_path}")
    _write_manifest(
        out,
        "train droop",
        args,
        {"rollout": asdict(rollout_cfg), "droop": droop_cfg},
        {"droop": ck_path},
        {"cost": cost, "l": droop.coefficients.tolist()},
        started,
    )
    return 0


def cmd_train_lyapunov(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    droop = ctrl.load_droop(args.droop)
    cfg_doc = _load_config(args.config)
    config = _build(
        lyapunov.LyapunovTrainConfig, cfg_doc.get("lyapunov", {}), rng_seed=args.seed
    )
    eq = grid_model.solve_equilibrium(case)
    net, log = lyapunov.train_lyapunov(case, eq, droop, config)
    ck_path = os.path.join(out, "lyapunov.json")
    lyapunov.save_net(ck_path, net, rng_seed=args.seed, episode=config.episodes)
    log_path = os.path.join(out, "lyapunov_log.csv")
    _write_csv(
        log_path,
        ["episode", "l1", "l2", "l3", "total", "rho"],
        [(r["episode"], r["l1"], r["l2"], r["l3"], r["total"], r["rho"]) for r in log],
    )
    final = log[-1] if log else {"rho": float("nan"), "l3": float("nan"), "total": float("nan")}
    print(f"final rho {final['rho']:.4f}; wrote {ck_path}")
    _write_manifest(
        out,
        "train lyapunov",
        args,
        {"lyapunov": asdict(config)},
        {"lyapunov": ck_path, "log": log_path},
        {"final_rho": final["rho"], "final_l3": final["l3"], "final_total": final["total"]},
        started,
    )
    return 0


def cmd_train_controller(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    if bool(args.lyapunov) == bool(args.no_regularizer):
        print(
            "error: choose exactly one of --lyapunov <checkpoint> or --no-regularizer",
            file=sys.stderr,
        )
        return EXIT_VALIDATION
    case = grid_model.load_case(args.case)
    net = lyapunov.load_net(args.lyapunov) if args.lyapunov else None
    if net is not None and net.n_buses != case.n_buses:
        raise ValidationError(
            f"--lyapunov: checkpoint has {net.n_buses} buses, case has {case.n_buses}"
        )
    cfg_doc = _load_config(args.config)
    config = _build(
        policy_training.RolloutConfig,
        cfg_doc.get("rollout", {}),
        rng_seed=args.seed,
        **({"dt": args.dt} if args.dt else {}),
        **({"stages": args.stages} if args.stages else {}),
    )
    eq = grid_model.solve_equilibrium(case)
    reference_cost = None
    if args.droop:
        droop = ctrl.load_droop(args.droop)
        d0, o0 = _held_out_states(args.seed, config, case.n_buses)
        reference_cost = policy_training.evaluate_cost(
            case, eq, ctrl.DroopPolicy(droop, case), config, d0, o0
        )
    params, log = policy_training.train_controller(
        case, eq, net, config, reference_cost=reference_cost
    )
    tag = "rnn_lyap" if net is not None else "rnn_wo_lyap"
    ck_path = os.path.join(out, f"controller_{tag}.json")
    ctrl.save_controller(ck_path, params, case, rng_seed=args.seed, episode=config.episodes)
    log_path = os.path.join(out, f"controller_{tag}_log.csv")
    _write_csv(
        log_path,
        ["episode", "mean_nadir", "mean_effort", "mean_regularizer", "total", "normalized_vs_droop"],
        [
            (r["episode"], r["nadir"], r["effort"], r["regularizer"], r["total"], r["normalized_vs_droop"])
            for r in log
        ],
    )
    best = min((r["total"] for r in log), default=float("nan"))
    print(f"best loss {best:.6f}; wrote {ck_path}")
    _write_manifest(
        out,
        "train controller",
        args,
        {"rollout": asdict(config), "regularized": net is not None},
        {"controller": ck_path, "log": log_path},
        {"best_loss": best},
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# eval subcommands
# ---------------------------------------------------------------------------

def _policy_from_args(args, case):
    if getattr(args, "controller", None):
        return ctrl.StackedReluPolicy(ctrl.load_controller(args.controller), case)
    if getattr(args, "droop", None):
        return ctrl.DroopPolicy(ctrl.load_droop(args.droop), case)
    return ctrl.ZeroPolicy(case)


def cmd_eval_simulate(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    eq = grid_model.solve_equilibrium(case)
    cfg_doc = _load_config(args.config)
    config = _build(
        policy_training.RolloutConfig,
        cfg_doc.get("rollout", {}),
        rng_seed=args.seed,
        **({"dt": args.dt} if args.dt else {}),
        **({"stages": args.stages} if args.stages else {}),
    )
    if args.init:
        with open(args.init, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        state = grid_model.SystemState(
            delta=np.asarray(doc["delta"], dtype=np.float64),
            omega=np.asarray(doc["omega"], dtype=np.float64),
        )
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(args.seed), 0x51]))
        d0, o0 = policy_training.sample_initial_states(rng, config, 1, case.n_buses)
        state = grid_model.SystemState(delta=d0[0], omega=o0[0])
    if state.n != case.n_buses:
        raise ValidationError(
            f"--init: state has {state.n} buses, case has {case.n_buses}"
        )
    policy = _policy_from_args(args, case)
    record = policy_training.rollout(case, policy, None, config, state, eq)
    n = case.n_buses
    k = record.actions.shape[0]
    rows = []
    for step in range(k + 1):
        u_row = (
            record.actions[step]
            if step < k
            else policy.numpy_action(record.states_omega[step])
        )
        rows.append(
            [step * config.dt]
            + [record.states_omega[step, i] for i in range(n)]
            + [u_row[i] for i in range(n)]
        )
    path = os.path.join(out, "simulate.csv")
    header = ["t"] + [f"omega_{i}" for i in range(n)] + [f"u_{i}" for i in range(n)]
    _write_csv(path, header, rows)
    peak = float(np.max(np.abs(record.states_omega)))
    print(f"simulated {k} stages, peak |omega| {peak:.6f}; wrote {path}")
    _write_manifest(
        out,
        "eval simulate",
        args,
        {"rollout": asdict(config)},
        {"trajectory": path},
        {"max_abs_omega": peak, "truncated": record.truncated},
        started,
    )
    return 0


def cmd_eval_compare(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    eq = grid_model.solve_equilibrium(case)
    cfg_doc = _load_config(args.config)
    config = _build(
        policy_training.RolloutConfig, cfg_doc.get("rollout", {}), rng_seed=args.seed
    )
    d0, o0 = _held_out_states(args.seed, config, case.n_buses)
    policies = {
        "droop": ctrl.DroopPolicy(ctrl.load_droop(args.droop), case),
        "rnn_lyap": ctrl.StackedReluPolicy(ctrl.load_controller(args.rnn_lyap), case),
        "rnn_wo_lyap": ctrl.StackedReluPolicy(ctrl.load_controller(args.rnn_wo_lyap), case),
    }
    raw = {
        name: policy_training.evaluate_cost(case, eq, pol, config, d0, o0)
        for name, pol in policies.items()
    }
    tail = {
        name: policy_training.tail_peak_omega(case, eq, pol, config, d0, o0)
        for name, pol in policies.items()
    }
    normalized = {name: cost / raw["droop"] for name, cost in raw.items()}
    doc = {
        "version": 1,
        "held_out_states": d0.shape[0],
        "raw_costs": raw,
        "normalized_costs": normalized,
        "tail_peak_omega": tail,
    }
    json_path = os.path.join(out, "compare.json")
    _write_json(json_path, doc)
    csv_path = os.path.join(out, "compare.csv")
    _write_csv(
        csv_path,
        ["policy", "raw_cost", "normalized_cost", "tail_peak_omega"],
        [(name, raw[name], normalized[name], tail[name]) for name in policies],
    )
    print(
        "normalized costs: "
        + ", ".join(f"{name}={normalized[name]:.4f}" for name in policies)
    )
    _write_manifest(
        out,
        "eval compare",
        args,
        {"rollout": asdict(config)},
        {"compare_json": json_path, "compare_csv": csv_path},
        {"normalized_costs": normalized},
        started,
    )
    return 0


def cmd_eval_export_surface(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    case = grid_model.load_case(args.case)
    eq = grid_model.solve_equilibrium(case)
    net = lyapunov.load_net(args.lyapunov)
    droop = ctrl.load_droop(args.droop)
    if net.n_buses != case.n_buses:
        raise ValidationError(
            f"--lyapunov: checkpoint has {net.n_buses} buses, case has {case.n_buses}"
        )
    bus = args.bus
    if not (0 <= bus < case.n_buses):
        raise ValidationError(f"--bus: must be in [0, {case.n_buses - 1}], got {bus}")
    case_adj = grid_model.adjusted_case(case, eq)
    points = args.points
    offsets = np.linspace(-args.half_width, args.half_width, points)
    rows = []
    center = points // 2
    v_grid = np.empty((points, points))
    for a, d_off in enumerate(offsets):
        d2 = np.tile(eq.state.delta, (points, 1))
        o2 = np.tile(eq.state.omega, (points, 1))
        d2[:, bus] += d_off
        o2[:, bus] += offsets
        v = net.value_batch(d2, o2)
        u = np.clip(droop.coefficients * o2, case.u_min, case.u_max)
        lie = lyapunov.lie_derivative_batch(net, case_adj, d2, o2, u)
        v_grid[a] = v
        for b, o_off in enumerate(offsets):
            rows.append(
                [
                    d_off,
                    o_off,
                    eq.state.delta[bus] + d_off,
                    o_off,
                    v[b],
                    lie[b],
                ]
            )
    path = os.path.join(out, f"surface_bus{bus}.csv")
    _write_csv(
        path,
        ["delta_offset", "omega_offset", "delta", "omega", "v", "lie"],
        rows,
    )
    argmin = np.unravel_index(int(np.argmin(v_grid)), v_grid.shape)
    min_at_center = argmin == (center, center)
    print(
        f"surface bus {bus}: min cell {argmin}, center ({center}, {center}); wrote {path}"
    )
    _write_manifest(
        out,
        "eval export-surface",
        args,
        {"bus": bus, "half_width": args.half_width, "points": points},
        {"surface": path},
        {"min_at_equilibrium_cell": bool(min_at_center)},
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def cmd_replay(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_SCHEMA_VERSION:
        raise ValidationError(f"{args.manifest}: unknown manifest version {doc.get('version')!r}")
    argv = list(doc.get("argv", []))
    if not argv:
        raise ValidationError(f"{args.manifest}: manifest records no argv to replay")
    # Point the replay at a fresh out dir, dropping any recorded one.
    cleaned = []
    skip = False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--out-dir":
            skip = True
            continue
        if token.startswith("--out-dir="):
            continue
        cleaned.append(token)
    if args.out_dir:
        cleaned += ["--out-dir", args.out_dir]
    return main(cleaned)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p, case_required=True):
    p.add_argument("--case", required=case_required, help="case JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON config overrides")
    p.add_argument("--out-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlyap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_case = sub.add_parser("case", help="case file tooling")
    case_sub = p_case.add_subparsers(dest="subcommand", required=True)
    p = case_sub.add_parser("validate")
    _add_common(p)
    p.set_defaults(func=cmd_case_validate)
    p = case_sub.add_parser("kron-reduce")
    _add_common(p)
    p.set_defaults(func=cmd_case_kron_reduce)
    p = case_sub.add_parser("equilibrium")
    _add_common(p)
    p.set_defaults(func=cmd_case_equilibrium)

    p_train = sub.add_parser("train", help="training runs")
    train_sub = p_train.add_subparsers(dest="subcommand", required=True)
    p = train_sub.add_parser("droop")
    _add_common(p)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--stages", type=int, default=None)
    p.set_defaults(func=cmd_train_droop)
    p = train_sub.add_parser("lyapunov")
    _add_common(p)
    p.add_argument("--droop", required=True, help="droop checkpoint (fixed controller)")
    p.set_defaults(func=cmd_train_lyapunov)
    p = train_sub.add_parser("controller")
    _add_common(p)
    p.add_argument("--lyapunov", default=None, help="certificate checkpoint")
    p.add_argument("--no-regularizer", action="store_true")
    p.add_argument("--droop", default=None, help="droop checkpoint for cost normalization")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--stages", type=int, default=None)
    p.set_defaults(func=cmd_train_controller)

    p_eval = sub.add_parser("eval", help="evaluation exports")
    eval_sub = p_eval.add_subparsers(dest="subcommand", required=True)
    p = eval_sub.add_parser("simulate")
    _add_common(p)
    p.add_argument("--controller", default=None)
    p.add_argument("--droop", default=None)
    p.add_argument("--init", default=None, help="JSON initial state {delta, omega}")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--stages", type=int, default=None)
    p.set_defaults(func=cmd_eval_simulate)
    p = eval_sub.add_parser("compare")
    _add_common(p)
    p.add_argument("--droop", required=True)
    p.add_argument("--rnn-lyap", required=True)
    p.add_argument("--rnn-wo-lyap", required=True)
    p.set_defaults(func=cmd_eval_compare)
    p = eval_sub.add_parser("export-surface")
    _add_common(p)
    p.add_argument("--lyapunov", required=True)
    p.add_argument("--droop", required=True)
    p.add_argument("--bus", type=int, default=0)
    p.add_argument("--half-width", type=float, default=6.0)
    p.add_argument("--points", type=int, default=61)
    p.set_defaults(func=cmd_eval_export_surface)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EquilibriumError, TrainingDivergedError, GraphError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
