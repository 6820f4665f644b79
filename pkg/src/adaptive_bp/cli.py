"""Command line front end.

Subcommands: profile, plan, train, verify, sweep.  Configuration comes from
a JSON file (--config) with dotted-path overrides (--set a.b=c); every
override key must exist in the merged config.  Exit codes: 0 success,
2 config error, 3 infeasible budget, 4 verification failure, 5 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from .engine import backward_full, backward_selective, finite_diff_grad, forward
from .errors import (ConfigError, InfeasibleBudgetError, NumericError,
                     VerificationError)
from .graph import ModelDims
from .importance import evaluate_importance, spearman, undo_oracle
from .model import ToyModelConfig, build_toy_decoder, synth_batch
from .optim import make_optimizer
from .profiler import (FlopsProfile, profile_flops, selective_cost,
                       verify_against_meter)
from .selector import brute_force_select, dp_select
from .trainer import RunConfig, train

EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY, EXIT_NUMERIC = 2, 3, 4, 5

DEFAULT_CONFIG = {
    "model": {"blocks": 2, "d": 32, "h": 2, "ffn": 64, "vocab": 32, "n": 20},
    "task": {"kind": "copy", "max_payload": 8},
    "selector": {"rho": 0.5, "T_q": 1000, "dy_convention": "inclusive"},
    "optimizer": {"kind": "adamw", "lr": 1e-3, "weight_decay": 0.0},
    "run": {"strategy": "adaptive", "epochs": 3, "steps_per_epoch": 200,
            "batch_size": 16, "eval_every": 100, "seed": 0,
            "init_checkpoint": ""},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(config: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"--set expects key=value, got {dotted!r}")
    path, value = dotted.split("=", 1)
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {path!r}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = _parse_value(value)


def load_config(args) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        for section, content in user.items():
            if section not in config or not isinstance(content, dict):
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in content.items():
                if key not in config[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                config[section][key] = value
    for override in args.set or []:
        _apply_override(config, override)
    if args.seed is not None:
        config["run"]["seed"] = args.seed
    return config


def _dims(config: dict) -> ModelDims:
    try:
        return ModelDims(**config["model"])
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}")


def _run_config(config: dict) -> RunConfig:
    return RunConfig(
        dims=_dims(config),
        task=config["task"]["kind"],
        max_payload=config["task"]["max_payload"],
        rho=config["selector"]["rho"],
        T_q=config["selector"]["T_q"],
        dy_convention=config["selector"]["dy_convention"],
        optimizer=config["optimizer"]["kind"],
        lr=config["optimizer"]["lr"],
        weight_decay=config["optimizer"]["weight_decay"],
        **config["run"],
    )


def _out_dir(args) -> str:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


# ---- subcommands ------------------------------------------------------------


def cmd_profile(args) -> int:
    config = load_config(args)
    dims = _dims(config)
    graph, _ = build_toy_decoder(ToyModelConfig(dims, config["run"]["seed"]))
    profile = profile_flops(graph, config["run"]["batch_size"])
    rows = []
    for s, name, dy, dw in profile.rows():
        meta = graph.by_name(name)
        rows.append({"slot": s, "name": name, "kind": meta.kind.value,
                     "shape": "x".join(map(str, meta.shape)),
                     "t_dy": dy, "t_dw": dw})
    summary = {
        "T_fp": int(profile.T_fp),
        "T_bp": int(profile.T_bp),
        "T_full": int(profile.T_full),
        "tied_slots": list(profile.tied_slots),
        "tensors": rows,
    }
    out = _out_dir(args)
    with open(os.path.join(out, "flops.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    with open(os.path.join(out, "flops.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["slot", "name", "kind", "shape", "t_dy", "t_dw"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"T_fp={profile.T_fp}  T_bp={profile.T_bp}  T_full={profile.T_full}")
    print(f"wrote {out}/flops.json and {out}/flops.csv")
    return 0


def cmd_plan(args) -> int:
    config = load_config(args)
    rc = _run_config(config)
    rc.validate()
    graph, weights = build_toy_decoder(ToyModelConfig(rc.dims, rc.seed))
    profile = profile_flops(graph, rc.batch_size)
    if rc.rho * profile.T_full < profile.T_fp:
        raise InfeasibleBudgetError("budget below forward cost")
    batch = synth_batch(rc.task, rc.dims, rc.batch_size, rc.seed, 0, rc.max_payload)
    optimizer = make_optimizer(rc.optimizer, lr=rc.lr, weight_decay=rc.weight_decay)
    vec, _, _, _ = evaluate_importance(graph, weights, batch, optimizer,
                                       profile, rc.rho)
    plan = dp_select(profile, vec.values, rc.rho, T_q=rc.T_q,
                     convention=rc.dy_convention)
    out = _out_dir(args)
    with open(os.path.join(out, "plan.json"), "w") as fh:
        json.dump(plan.to_json(), fh, indent=2)
    names = graph.names_in_bp_order()
    print(f"budget={plan.budget_flops:.4g}  planned={plan.predicted_flops}")
    for s in plan.selected_slots:
        print(f"  slot {s:3d}  {names[s - 1]}")
    print(f"wrote {out}/plan.json")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    rc = _run_config(config)
    report = train(rc, out_dir=_out_dir(args))
    print(f"final_loss={report.final_loss:.4f}  "
          f"final_accuracy={report.final_accuracy:.4f}  "
          f"train_flops={report.total_train_flops}  "
          f"reduction={report.realized_reduction:.3f}")
    return 0


def cmd_verify(args) -> int:
    config = load_config(args)
    rc = _run_config(config)
    dims = rc.dims
    rng = np.random.default_rng(rc.seed)
    graph, weights = build_toy_decoder(ToyModelConfig(dims, rc.seed))
    batch = synth_batch(rc.task, dims, min(rc.batch_size, 4), rc.seed, 0,
                        rc.max_payload)
    checks = []

    # gradient correctness against finite differences (spot check)
    _, tape, _ = forward(graph, weights, batch)
    grads, _ = backward_full(tape)
    worst = 0.0
    for name in ("block0.attn.w_q", "block0.ffn.w1", "ln_f.gain", "embed"):
        idx, est = finite_diff_grad(graph, weights, batch, name, 8,
                                    step=1e-4, seed=rc.seed)
        got = grads[name].reshape(-1)[idx]
        denom = np.maximum(np.abs(est), 1e-8)
        worst = max(worst, float(np.max(np.abs(got - est) / denom)))
    checks.append(("grad_vs_finite_diff", worst < 1e-4, f"max rel err {worst:.2e}"))

    # selective gradients bitwise equal to full, random masks
    full, _ = backward_full(tape)
    agree = True
    for _ in range(20):
        mask = rng.random(len(graph)) < 0.3
        sel, _ = backward_selective(tape, mask, rc.dy_convention)
        for name, g in sel.items():
            if not np.array_equal(g, full[name]):
                agree = False
    checks.append(("selective_bitwise_equal", agree, "20 random masks"))

    # analytical cost model vs the engine meter
    profile = profile_flops(graph, batch.tokens.shape[0])
    worst_rel = 0.0
    for _ in range(20):
        mask = rng.random(len(graph)) < 0.3
        loss, tape2, fm = forward(graph, weights, batch)
        _, bm = backward_selective(tape2, mask, rc.dy_convention)
        rep = verify_against_meter(profile, fm, bm, mask, rc.dy_convention)
        if not rep["fp_match"]:
            agree = False
        worst_rel = max(worst_rel, rep["rel_error"])
    checks.append(("profile_vs_meter", worst_rel == 0.0,
                   f"max rel err {worst_rel:.2e}"))

    # selector optimality on small synthetic instances
    dp_ok = True
    for trial in range(20):
        g = np.random.default_rng(1000 + trial)
        n = int(g.integers(4, 13))
        t_dy = g.integers(1, 50, size=n).astype(np.int64)
        t_dw = g.integers(1, 50, size=n).astype(np.int64)
        total = int(t_dy.sum() + t_dw.sum())
        syn = FlopsProfile.synthetic(t_dy, t_dw, T_fp=0,
                                     tied_slots=(1,) if trial % 3 == 0 else ())
        vals = np.concatenate([[np.nan], g.random(n)])
        dp = dp_select(syn, vals, rho=0.6, T_q=total)
        bf = brute_force_select(syn, vals, rho=0.6)
        if abs(dp.cumulative_importance - bf.cumulative_importance) > 1e-12:
            dp_ok = False
    checks.append(("dp_vs_brute_force", dp_ok, "20 synthetic instances"))

    # importance scores against the undo oracle
    opt = make_optimizer(rc.optimizer, lr=rc.lr, weight_decay=rc.weight_decay)
    vec, _, _, _ = evaluate_importance(graph, weights, batch, opt, profile, 1.0)
    grads_full, _ = backward_full(tape)
    dl = undo_oracle(graph, weights, batch, grads_full, opt, eps=1e-4)
    slots = vec.evaluated_slots()
    rho_rank = spearman(vec.raw[slots], -dl[slots])
    checks.append(("importance_first_order", rho_rank >= 0.9,
                   f"spearman {rho_rank:.4f}"))

    failed = [name for name, ok, _ in checks if not ok]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    if failed:
        raise VerificationError(f"failed checks: {', '.join(failed)}")
    print("all checks passed")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args)
    rhos = [float(r) for r in args.rho] if args.rho else [0.4, 0.5, 0.7]
    strategies = args.strategy or [config["run"]["strategy"]]
    out = _out_dir(args)
    jobs = []
    for strategy in strategies:
        for rho in rhos:
            cfg = json.loads(json.dumps(config))
            cfg["run"]["strategy"] = strategy
            cfg["selector"]["rho"] = rho
            jobs.append((strategy, rho, cfg))

    threads = int(os.environ.get("ADAPTIVE_BP_THREADS", "2"))
    if threads < 1:
        raise ConfigError("ADAPTIVE_BP_THREADS must be >= 1")

    def run_one(job):
        strategy, rho, cfg = job
        sub = os.path.join(out, f"{strategy}_rho{rho:g}")
        report = train(_run_config(cfg), out_dir=sub)
        if report.plans:
            planned = np.mean([p["predicted_flops"] for p in report.plans])
        else:
            planned = report.step_flops[0]
        return {"strategy": strategy, "rho": rho,
                "predicted_reduction": 1.0 - planned / report.T_full,
                "measured_reduction": report.realized_reduction,
                "final_accuracy": report.final_accuracy,
                "final_loss": report.final_loss,
                "train_flops": report.total_train_flops,
                "importance_flops": report.total_importance_flops,
                "dir": sub}

    with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        results = list(pool.map(run_one, jobs))

    with open(os.path.join(out, "sweep.json"), "w") as fh:
        json.dump(results, fh, indent=2)
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "strategy", "rho", "predicted_reduction", "measured_reduction",
            "final_accuracy"], extrasaction="ignore")
        writer.writeheader()
        writer.writerows(results)
    for r in results:
        print(f"{r['strategy']:<20} rho={r['rho']:<5g} "
              f"acc={r['final_accuracy']:.4f} "
              f"predicted={r['predicted_reduction']:.3f} "
              f"measured={r['measured_reduction']:.3f}")
    return 0


# ---- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptive-bp",
        description="selective-backprop training under a FLOPs budget")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override run.seed")

    sub.add_parser("profile", parents=[common],
                   help="write per-tensor backward FLOPs tables")
    sub.add_parser("plan", parents=[common],
                   help="one-shot importance evaluation and selection")
    sub.add_parser("train", parents=[common], help="run a training job")
    sub.add_parser("verify", parents=[common],
                   help="run gradient/cost self-checks")
    sweep = sub.add_parser("sweep", parents=[common],
                           help="grid of training runs over rho/strategy")
    sweep.add_argument("--rho", action="append",
                       help="budget fraction, repeatable (default 0.4 0.5 0.7)")
    sweep.add_argument("--strategy", action="append",
                       help="strategy to include, repeatable")
    return parser


_COMMANDS = {
    "profile": cmd_profile,
    "plan": cmd_plan,
    "train": cmd_train,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
