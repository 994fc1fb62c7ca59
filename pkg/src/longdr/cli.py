"""Command-line interface: simulate, oracle, train, estimate, bench, tune, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import _json
from .dgp import (DgpConfig, ground_truth_capo, plan_from_dict, read_dataset,
                  simulate, standard_plans, write_dataset)
from .estimators import TrainConfig, estimate, train
from .harness import (ExperimentConfig, OracleCache, ablate, emit,
                      experiment_from_dict, run_experiment, tune, write_manifest)
from .model import ModelConfig, load_checkpoint, save_checkpoint


def _add_dgp_flags(p):
    p.add_argument("--variant", choices=("limited", "expanded"), default="limited")
    p.add_argument("--tau", type=int, default=10)
    p.add_argument("--n", type=int, default=1500)
    p.add_argument("--lag", type=int, default=8)
    p.add_argument("--coefficient-rule", choices=("shifted", "paper_singular"),
                   default="shifted")
    p.add_argument("--seed", type=int, default=0)


def _dgp_from_args(args) -> DgpConfig:
    return DgpConfig(variant=args.variant, tau=args.tau, n=args.n, lag=args.lag,
                     coefficient_rule=args.coefficient_rule, seed=args.seed)


def _resolve_plan(name_or_path, tau, cf4_literal=False):
    plans = standard_plans(tau, cf4_literal=cf4_literal)
    if name_or_path in plans:
        return plans[name_or_path]
    with open(name_or_path) as f:
        return plan_from_dict(json.load(f))


def _load_experiment(path) -> ExperimentConfig:
    with open(path) as f:
        return experiment_from_dict(json.load(f))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="longdr",
        description="Longitudinal treatment-effect benchmarks and estimators")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a benchmark dataset file")
    _add_dgp_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="Monte-Carlo ground-truth CAPO for a plan")
    _add_dgp_flags(p)
    p.add_argument("--plan", required=True,
                   help="cf1..cf4 or a path to a plan JSON file")
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--oracle-seed", type=int, default=777)
    p.add_argument("--cf4-literal", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a nuisance model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--target-rate", type=float, default=0.02)
    p.add_argument("--no-sdr", action="store_true")
    p.add_argument("--no-simulator", action="store_true")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--g-min", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train,val",
                   help="comma-joined split tags to train on")
    p.add_argument("--cf4-literal", action="store_true")

    p = sub.add_parser("estimate", help="CAPO estimate from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--estimator", choices=("plugin_ice", "raw_sdr", "ltmle"),
                   default="ltmle")
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--g-min", type=float, default=0.01)
    p.add_argument("--split", default="test")
    p.add_argument("--cf4-literal", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("bench", help="run a full experiment config")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--oracle-cache")

    p = sub.add_parser("tune", help="random-search hyperparameters")
    p.add_argument("--config", required=True)
    p.add_argument("--n-samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="run the SDR/simulator ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--oracle-cache")

    args = parser.parse_args(argv)

    if args.command == "simulate":
        dataset = simulate(_dgp_from_args(args))
        write_dataset(dataset, args.out)
        print(f"wrote {dataset.n} trajectories to {args.out} "
              f"(positivity share {dataset.positivity_share:.4f})")
        return 0

    if args.command == "oracle":
        dgp = _dgp_from_args(args)
        plan = _resolve_plan(args.plan, dgp.tau, args.cf4_literal)
        mean, se = ground_truth_capo(dgp, plan, args.n_mc, args.oracle_seed)
        rec = {"plan_id": plan.plan_id, "psi": mean, "se": se,
               "n_mc": args.n_mc, "oracle_seed": args.oracle_seed,
               "coefficient_rule": dgp.coefficient_rule}
        line = _json.dumps(rec)
        if args.out:
            with open(args.out, "w") as f:
                f.write(line + "\n")
        print(line)
        return 0

    if args.command == "train":
        dataset = read_dataset(args.data)
        plan = _resolve_plan(args.plan, dataset.tau, args.cf4_literal)
        model_cfg = ModelConfig(hidden=args.hidden, layers=args.layers,
                                heads=args.heads, dropout=args.dropout,
                                cov_dim=dataset.d, horizon=dataset.tau,
                                alpha=args.alpha, target_rate=args.target_rate)
        train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                lr=args.lr, use_sdr=not args.no_sdr,
                                use_simulator=not args.no_simulator,
                                clip_targets=not args.no_clip,
                                g_min=args.g_min, seed=args.seed)
        split = tuple(args.split.split(","))
        model, trace = train(dataset, plan, model_cfg, train_cfg, split=split)
        save_checkpoint(model, args.checkpoint,
                        extra={"plan_id": plan.plan_id, "seed": args.seed})
        last = trace.loss_total[-1] if trace.loss_total else float("nan")
        print(f"trained {args.epochs} epochs; final loss {last:.6f}; "
              f"checkpoint {args.checkpoint}")
        return 0

    if args.command == "estimate":
        dataset = read_dataset(args.data)
        model = load_checkpoint(args.checkpoint)
        plan = _resolve_plan(args.plan, dataset.tau, args.cf4_literal)
        rep = estimate(dataset, model, plan, args.estimator, lam=args.lam,
                       g_min=args.g_min, split=args.split)
        line = _json.dumps(rep.record())
        if args.out:
            with open(args.out, "w") as f:
                f.write(line + "\n")
        print(line)
        return 0

    if args.command == "bench":
        cfg = _load_experiment(args.config)
        cache = OracleCache(args.oracle_cache)
        table, _rows = run_experiment(cfg, out_dir=args.out_dir, cache=cache)
        for cell in table.cells:
            print(f"{cell.estimator:>10} {cell.plan_id}: "
                  f"|bias| {cell.abs_bias_mean:.4f} +/- {cell.abs_bias_std:.4f}, "
                  f"rmse {cell.rmse:.4f} ({cell.n_diverged} diverged)")
        return 0

    if args.command == "tune":
        cfg = _load_experiment(args.config)
        best, results = tune(cfg, n_samples=args.n_samples, seed=args.seed)
        payload = {"best": best, "results": results}
        line = _json.dumps(payload)
        if args.out:
            with open(args.out, "w") as f:
                f.write(line + "\n")
        print(_json.dumps(best))
        return 0

    if args.command == "ablate":
        cfg = _load_experiment(args.config)
        cache = OracleCache(args.oracle_cache)
        table, _rows, deltas = ablate(cfg, out_dir=args.out_dir, cache=cache)
        for (variant, plan_id), delta in sorted(deltas.items()):
            print(f"{variant} {plan_id}: ltmle-vs-raw abs-bias delta {delta:+.4f}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
