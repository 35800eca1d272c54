"""Command-line entry point (``tacomap``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacomap", description="Continual neural mapping experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="show per-step warnings")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="stream a scenario into a strategy")
    r.add_argument("--config", required=True, help="run config (YAML)")
    r.add_argument("--strategy", help="override strategy.kind")
    r.add_argument("--seed", type=int, help="override seed")
    r.add_argument("--out", help="override output directory")

    c = sub.add_parser("compare", help="per-stage metric table across runs")
    c.add_argument("runs", nargs="+", help="run output directories")
    c.add_argument("--csv", help="also write the table as CSV here")

    e = sub.add_parser("export-points", help="dump the zero level set of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="CSV path (default: next to the checkpoint)")
    e.add_argument("--resolution", type=int, default=256)
    e.add_argument("--no-gt", action="store_true", help="skip ground-truth points")
    return p


def _cmd_run(args) -> int:
    from .runner import load_config, run

    overrides: dict = {}
    if args.strategy is not None:
        overrides["strategy"] = {"kind": args.strategy}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    rec = run(cfg)
    if rec.status != "ok":
        print(f"numerical failure: {rec.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    if rec.metrics:
        f = rec.final
        print(
            f"{cfg.strategy.kind.value} on {cfg.scenario.name} (seed {cfg.seed}): "
            f"chamfer {f['chamfer']:.5f}  f1 {f['f1_at_tau']:.4f}  "
            f"artifacts {f['artifacts']:.5f}  holes {f['holes']:.5f}"
        )
    if cfg.out is not None:
        print(f"results in {cfg.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .runner import compare

    table = compare(args.runs)
    sys.stdout.write(table.to_text())
    if args.csv:
        Path(args.csv).write_text(table.to_csv())
    return EXIT_OK


def _cmd_export(args) -> int:
    from .field import load_checkpoint
    from .metrics import extract_zero_set, write_points
    from .world import boundary_points, load_scenario, stage_at

    ckpt = Path(args.checkpoint)
    try:
        model, theta, meta = load_checkpoint(ckpt)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read checkpoint {ckpt}: {e}") from None
    recon = extract_zero_set(model, theta, args.resolution)
    gt = None
    if not args.no_gt and "scenario" in meta and "step" in meta:
        sc = load_scenario(meta["scenario"])
        gt = boundary_points(stage_at(sc, int(meta["step"])), sc.bounds)
    out = Path(args.out) if args.out else ckpt.with_suffix(".points.csv")
    write_points(out, recon, gt)
    print(f"{len(recon)} reconstructed points written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "compare": _cmd_compare, "export-points": _cmd_export}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
