#!/usr/bin/env python3
"""Phantom mesh-refinement experiment.

Runs the gelatin-phantom insertion at the three uniform resolutions and once
adaptively, then tabulates probe displacements at matched insertion depth
(the first hold-phase step).  Outputs (trace.csv, constraints.csv, final.vtk)
land in per-run subdirectories of --out.
"""
import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from needlesim.scenario import load_scenario
from needlesim.simulation import run_simulation

RESOLUTIONS = [(8, 4, 4), (16, 8, 8), (32, 16, 16)]
PROBES = ["probe-1", "probe-1a", "probe-1c", "probe-1e"]


def read_run(out_dir: Path):
    with (out_dir / "trace.csv").open() as fh:
        trace = list(csv.DictReader(fh))
    with (out_dir / "constraints.csv").open() as fh:
        phases = {row["step"]: row["phase"] for row in csv.DictReader(fh)}
    hold = next((r for r in trace if phases.get(r["step"]) == "hold"), None)
    peak = max(int(r["dofs"]) for r in trace)
    return trace, hold, peak


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=Path(__file__).resolve().parents[1]
                    / "scenarios" / "phantom.cfg")
    ap.add_argument("--out", default="out/phantom", type=Path)
    ap.add_argument("--theta", type=float, default=0.3,
                    help="threshold for the adaptive run")
    ap.add_argument("--skip-fine", action="store_true",
                    help="skip the 32x16x16 run (minutes of wall time)")
    args = ap.parse_args(argv)

    runs = {}
    for res in RESOLUTIONS:
        if args.skip_fine and res == (32, 16, 16):
            continue
        cfg = load_scenario(args.scenario)
        cfg.tissue.resolution = res
        tag = "x".join(map(str, res))
        out = args.out / f"uniform_{tag}"
        print(f"== uniform {tag} -> {out}")
        t0 = time.perf_counter()
        if run_simulation(cfg, out) != 0:
            print("run failed", file=sys.stderr)
            return 1
        print(f"   {time.perf_counter() - t0:.0f}s")
        runs[tag] = read_run(out)

    cfg = load_scenario(args.scenario)
    cfg.theta = args.theta
    out = args.out / f"adaptive_theta{args.theta:g}"
    print(f"== adaptive theta={args.theta:g} -> {out}")
    t0 = time.perf_counter()
    if run_simulation(cfg, out) != 0:
        print("run failed", file=sys.stderr)
        return 1
    print(f"   {time.perf_counter() - t0:.0f}s")
    runs[f"adaptive {args.theta:g}"] = read_run(out)

    print(f"\n{'run':>16} {'peak dofs':>10}", end="")
    for p in PROBES:
        print(f" {p + ' [um]':>14}", end="")
    print()
    for tag, (trace, hold, peak) in runs.items():
        print(f"{tag:>16} {peak:>10}", end="")
        row = hold if hold is not None else trace[-1]
        for p in PROBES:
            print(f" {1e6 * float(row[p]):>14.2f}", end="")
        print("" if hold is not None else "   (hold not reached)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
