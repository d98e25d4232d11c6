"""Command-line driver: `simulate <scenario-file> --out <dir> [overrides]`."""
from __future__ import annotations

import argparse
import logging
import sys

from .scenario import ScenarioError, load_scenario
from .simulation import run_simulation


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Needle-insertion FEM simulation with adaptive meshing.")
    p.add_argument("scenario", help="scenario configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override step count")
    p.add_argument("--theta", type=float,
                   help="override refinement threshold (0 disables adaptivity)")
    p.add_argument("--tau", type=float, help="override time step [s]")
    p.add_argument("--max-depth", type=int, help="override max refinement depth")
    p.add_argument("--uniform-refine", type=int,
                   help="override uniform pre-refinement count")
    p.add_argument("--vtk-every", type=int,
                   help="override VTK snapshot period (0 disables)")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="debug-level logging")
    return p


def apply_overrides(config, args) -> None:
    for name, attr in [("steps", "steps"), ("theta", "theta"), ("tau", "tau"),
                       ("max_depth", "max_depth"),
                       ("uniform_refine", "uniform_refine"),
                       ("vtk_every", "vtk_every")]:
        value = getattr(args, name)
        if value is not None:
            setattr(config, attr, value)
    problems = []
    if config.tau <= 0:
        problems.append("--tau must be > 0")
    if config.steps < 1:
        problems.append("--steps must be >= 1")
    if not 0.0 <= config.theta < 1.0:
        problems.append("--theta must be in [0, 1)")
    if config.max_depth < 0:
        problems.append("--max-depth must be >= 0")
    if config.uniform_refine < 0:
        problems.append("--uniform-refine must be >= 0")
    if config.vtk_every is not None and config.vtk_every < 0:
        problems.append("--vtk-every must be >= 0")
    if problems:
        raise ScenarioError(problems)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_scenario(args.scenario)
        apply_overrides(config, args)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return 1
    return run_simulation(config, args.out)


if __name__ == "__main__":
    sys.exit(main())
