"""Command line: ``cgmx [--config F] [--seed N] [--out DIR] <command> ...``.

Exit codes: 0 success with all gates passed, 1 a quality gate failed,
2 a usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .config import load_config
from .errors import CGMXError, ConfigError, TrainingError

logger = logging.getLogger("cgmexplain")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgmx", description="Causal generative explanations of image classifiers.")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="seed for the component being trained / global seed")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one component")
    t.add_argument("component", choices=ex.COMPONENTS)
    t.add_argument("--n", type=int, help="number of oracles (train oracles)")

    sub.add_parser("explain-sweep", help="pixel explanations along attribute sweeps")
    sub.add_parser("explain-attributes", help="global attribute importances per class")
    c = sub.add_parser("explain-cf", help="counterfactual sets for each method")
    c.add_argument("--methods", nargs="+", choices=sorted(ex.METHODS))
    sub.add_parser("evaluate", help="IM1/IM2 and oracle reports for persisted counterfactual sets")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.out:
        overrides["out"] = args.out
    if args.seed is not None and args.command != "train":
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            result = ex.cmd_train(args.component, cfg, seed=args.seed, n=args.n)
        elif args.command == "explain-sweep":
            result = ex.cmd_explain_sweep(cfg)
        elif args.command == "explain-attributes":
            result = ex.cmd_explain_attributes(cfg)
        elif args.command == "explain-cf":
            result = ex.cmd_explain_cf(cfg, args.methods)
        else:
            result = ex.cmd_evaluate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return 1
    except CGMXError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, info in sorted(result.get("gates", {}).items()):
        print(f"{name}: {'pass' if info.get('passed', True) else 'FAIL'}")
    print(f"manifest: {ex.out_dir(cfg) / 'manifests'}")
    return 0 if result.get("status") == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
