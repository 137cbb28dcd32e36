#!/usr/bin/env python3
"""
mrinn_cli.py
Single entry point for the toolkit.

  price     exact rulebook over a market CSV -> per-row breakdown CSV
  synth     seeded synthetic market CSV
  train     grid search + training per fold/seed for model.family
  baseline  naive (price, id15, id60), LQR and MLP reference runs
  ablate    MRINN with each price component removed in turn
  sweep     one MRINN run per (look-back N, horizon M)
  evaluate  score a saved checkpoint on a split
  size      parameter count and soft-op sites of a config or checkpoint
  validate  schema + checksum checks of run directories
  etl       flatten run directories into runs.csv / artifacts.csv

Exit codes: 0 success, 2 input/config error, 3 numerical failure.
Default output root: $MRINN_OUTPUT_ROOT (a .env file is honoured), else out/.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

from dotenv import load_dotenv

from errors import InputError, NumericalError


def _config(args):
    from experiment import ExperimentConfig
    return ExperimentConfig.load(args.config, args.set or ())


def _jobs(args, cfg) -> int:
    return args.jobs if args.jobs is not None else int(cfg.get("jobs"))


def cmd_price(args) -> int:
    from artifacts import write_frame_csv
    from dataset import load_csv
    from pricing_engine import load_constants, price_frame
    frame = load_csv(args.input, strict=not args.lenient, require_target=False)
    out = price_frame(frame.df, load_constants(args.constants))
    out["ts"] = frame.df["ts"].dt.strftime("%Y-%m-%dT%H:%M:%SZ").to_numpy()
    write_frame_csv(args.output, out)
    print(f"[engine] priced {len(out)} row(s) -> {args.output}")
    return 0


def cmd_synth(args) -> int:
    from dataset import generate_synthetic, write_csv
    cfg = _config(args)
    frame = generate_synthetic(args.days, args.seed, cfg.synth_params(), cfg.constants())
    write_csv(frame, args.output)
    print(f"[dataset] wrote {len(frame)} synthetic row(s) (seed={args.seed}) -> {args.output}")
    return 0


def _run(command: str):
    def handler(args) -> int:
        import experiment
        cfg = _config(args)
        out = cfg.output_root(args.out)
        table = getattr(experiment, f"cmd_{command}")(cfg, out, _jobs(args, cfg))
        print(table.to_string(index=False))
        print(f"[cli] {command} complete -> {out}")
        return 0
    return handler


def cmd_evaluate(args) -> int:
    from experiment import cmd_evaluate as evaluate
    cfg = _config(args)
    out = cfg.output_root(args.out)
    for fold, value in evaluate(args.checkpoint, cfg, out, args.split).items():
        print(f"[cli] {fold} {args.split} aql={value:.4f}")
    return 0


def cmd_size(args) -> int:
    import json
    from mrinn import MrinnConfig, MrinnModel, load_checkpoint, model_size, site_audit
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = MrinnModel(MrinnConfig(h=args.h, n_layers=args.n_layers, lookback=args.lookback,
                                       ablation=args.ablation))
    report = {"family": model.family, "config": asdict(model.config), **model_size(model, args.checkpoint)}
    if isinstance(model, MrinnModel):
        report["sites"] = site_audit(model)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    from validate import validate_tree
    problems = validate_tree(Path(args.path))
    for p in problems:
        print(f"[validate] ERROR: {p}", file=sys.stderr)
    if problems:
        return 2
    print(f"[validate] OK: {args.path}")
    return 0


def cmd_etl(args) -> int:
    from run_etl import run_etl
    run_etl(Path(args.path), Path(args.dest or args.path))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrinn_cli", description="Imbalance-price pricing, training and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="apply the settlement rulebook to a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--constants", default=None, help="JSON overrides for c0..c10")
    p.add_argument("--lenient", action="store_true", help="drop malformed rows instead of failing")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("synth", help="write a synthetic market CSV")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--config", default=None, help="optional config for synth.* and constants.* keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    for name, doc in (("train", "train model.family with grid search"), ("baseline", "run the baselines"),
                      ("ablate", "component-removal study"), ("sweep", "look-back x horizon study")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.set_defaults(func=_run(name))

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("size", help="parameter count, checkpoint bytes and soft-op sites")
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--lookback", type=int, default=0)
    p.add_argument("--ablation", default="none")
    p.add_argument("--checkpoint", default=None, help="report a saved checkpoint instead")
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("validate", help="check run directories against the schemas")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("etl", help="flatten run directories into CSV tables")
    p.add_argument("path")
    p.add_argument("--dest", default=None)
    p.set_defaults(func=cmd_etl)
    return ap


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"[cli] ERROR: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"[cli] ERROR: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
