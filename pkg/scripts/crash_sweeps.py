#!/usr/bin/env python3
"""Crash every component of a scenario at each of its append boundaries."""

import argparse
import sys
import time

from logact.harness import crash_point_sweep, load_scenario


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="hello-task", help="built-in name or YAML file")
    ap.add_argument("--components", default="driver,decider,voter:rule,executor")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    failed = 0
    for comp in args.components.split(","):
        t0 = time.monotonic()
        rep = crash_point_sweep(load_scenario(args.scenario), comp.strip(), args.seed)
        print(f"{rep.summary()}  [{time.monotonic() - t0:.2f}s]")
        failed += len(rep.violations)
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
