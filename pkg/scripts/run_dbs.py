#!/usr/bin/env python3
"""Electrode-placement experiment on the brain surrogate.

Runs the full cannula insert / electrode release / cannula retract protocol
twice -- once on the uniformly refined mesh and once adaptively -- and
compares the tip-to-target distance traces and problem sizes.
"""
import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from needlesim.scenario import load_scenario
from needlesim.simulation import run_simulation


def read_run(out_dir: Path):
    with (out_dir / "trace.csv").open() as fh:
        trace = list(csv.DictReader(fh))
    with (out_dir / "constraints.csv").open() as fh:
        phases = [row["phase"] for row in csv.DictReader(fh)]
    ttd = np.array([float(r["tip_target_distance"]) for r in trace])
    peak = max(int(r["dofs"]) for r in trace)
    return ttd, phases, peak


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=Path(__file__).resolve().parents[1]
                    / "scenarios" / "dbs.cfg")
    ap.add_argument("--out", default="out/dbs", type=Path)
    args = ap.parse_args(argv)

    results = {}
    for tag, overrides in [("uniform-fine", dict(theta=0.0, uniform_refine=1)),
                           ("adaptive", {})]:
        cfg = load_scenario(args.scenario)
        for attr, value in overrides.items():
            setattr(cfg, attr, value)
        out = args.out / tag
        print(f"== {tag} (theta={cfg.theta:g}) -> {out}")
        t0 = time.perf_counter()
        if run_simulation(cfg, out) != 0:
            print("run failed", file=sys.stderr)
            return 1
        print(f"   {time.perf_counter() - t0:.0f}s")
        results[tag] = read_run(out)

    ttd_f, phases_f, peak_f = results["uniform-fine"]
    ttd_a, phases_a, peak_a = results["adaptive"]
    contact = max(phases_f.index("retract"), phases_a.index("retract"))
    rel = np.abs(ttd_a[contact:] - ttd_f[contact:]) / np.abs(ttd_f[contact:])
    print(f"\nfinal tip-target distance: fine {1e3 * ttd_f[-1]:.2f} mm, "
          f"adaptive {1e3 * ttd_a[-1]:.2f} mm")
    print(f"post-contact trace difference: max {100 * rel.max():.2f}%, "
          f"mean {100 * rel.mean():.2f}%")
    print(f"problem size: {peak_a} vs {peak_f} DOFs "
          f"({peak_f / peak_a:.1f}x reduction)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
