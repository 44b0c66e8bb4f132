"""``valuechain`` command line: one subcommand per experiment."""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ExperimentConfig, emit_report, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valuechain", description="Markov-chain experiments for stochastic value iteration.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--mdp", help="MDP JSON file or built-in name (M1..M6, random:<seed>)")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
    return parser


def _config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if doc.get("experiment", args.experiment) != args.experiment:
            raise ValueError(f"config is for '{doc['experiment']}', not '{args.experiment}'")
    doc["experiment"] = args.experiment
    for key, value in (("mdp", args.mdp), ("seed", args.seed), ("output_dir", args.out)):
        if value is not None:
            doc[key] = value
    for key in ("mdp", "seed", "output_dir"):
        if doc.get(key) is None:
            raise ValueError(f"missing '{key}' (give --{'out' if key == 'output_dir' else key} or set it in the config)")
    return ExperimentConfig.from_dict(doc)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        res = run_experiment(cfg)
        emit_report(res, cfg.output_dir)
    except (OSError, ValueError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    for c in res.criteria:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: value={c['value']:.6g} bound={c['bound']:.6g} tol={c['tolerance']:.3g}")
    return 0 if res.passed else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
