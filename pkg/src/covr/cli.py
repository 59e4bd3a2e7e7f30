"""Command line entry point: covr train|eval|ablate|curate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import harness
from .config import ConfigError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covr",
        description="Teacher-guided SAC experiments on pixel-grid control tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    blurbs = {
        "train": "run the training loop for each configured seed",
        "eval": "evaluate the checkpoints in a run directory (--out)",
        "ablate": "sweep the configured variants across seeds",
        "curate": "select and weight an exported fine-tune buffer",
    }
    for name, blurb in blurbs.items():
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--seed", type=int, help="override: run this seed only")
        p.add_argument("--steps", type=int, help="override: total env steps")
        p.add_argument("--out", help="override: output directory "
                                     "(for eval: the run directory itself)")
        p.add_argument("--filter", help="override: eddf, random[:q], topk[:q]")
        p.add_argument("--weighting", help="override: ralw, uniform, random")
        p.add_argument("--guidance", help="override: on, off, anneal, or a "
                                          "lambda value")
        if name == "curate":
            p.add_argument("--buffer", help="fine-tune buffer record file")
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.run.seeds = (args.seed,)
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be at least 1")
        cfg.run.steps = args.steps
    if args.out is not None:
        cfg.run.out = args.out
    if args.filter is not None:
        try:
            kind, q = config_mod.parse_filter_spec(args.filter)
        except ValueError as err:
            raise ConfigError(f"--filter: {err}") from None
        cfg.curation.filter = kind
        if q is not None:
            cfg.curation.filter_q = q
    if args.weighting is not None:
        if args.weighting not in ("ralw", "uniform", "random"):
            raise ConfigError(f"--weighting: unknown scheme {args.weighting!r}")
        cfg.curation.weighting = args.weighting
    if args.guidance is not None:
        _apply_guidance(cfg, args.guidance)


def _apply_guidance(cfg, value):
    if value == "on":
        cfg.guidance.enabled = True
    elif value == "off":
        cfg.guidance.enabled = False
    elif value == "anneal":
        cfg.guidance.enabled = True
        cfg.guidance.annealed = True
    else:
        try:
            lam = float(value)
        except ValueError:
            raise ConfigError(f"--guidance: expected on, off, anneal, or a "
                              f"lambda value, got {value!r}") from None
        if lam < 0:
            raise ConfigError("--guidance: lambda must be non-negative")
        cfg.guidance.enabled = True
        cfg.guidance.lam = lam


def _print_result(command, result):
    if command in ("train", "ablate"):
        for d in result["run_dirs"]:
            print(f"run complete: {d}")
        for cell in result.get("cells", []):
            if cell["status"] != "ok":
                print(f"cell failed: {cell['variant']}-s{cell['seed']}: "
                      f"{cell['error']}")
    elif command == "eval":
        report = result["report"]
        line = f"agent eval mean {report['agent']['mean']:.3f}"
        if report["teacher"] is not None:
            line += f", teacher eval mean {report['teacher']['mean']:.3f}"
        print(line + f" -> {result['path']}")
    elif command == "curate":
        report = result["report"]
        print(f"kept {report['kept']}/{report['total']} "
              f"(tau {report['tau']:.4f}) -> {result['selected']}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = config_mod.load_config(args.config)
        _apply_overrides(cfg, args)
        result = harness.run_experiment(
            cfg, args.command,
            run_dir=Path(cfg.run.out) if args.command == "eval" else None,
            buffer_path=getattr(args, "buffer", None))
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    _print_result(args.command, result)
    return result["status"]


if __name__ == "__main__":
    sys.exit(main())
