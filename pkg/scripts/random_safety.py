#!/usr/bin/env python3
"""Randomized deployments with injected faults; every invariant must hold."""

import argparse
import collections
import logging
import sys
import time

from logact.harness import random_scenario, run_scenario


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0, help="first seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    t0 = time.monotonic()
    failed, kinds = [], collections.Counter()
    for seed in range(args.seed, args.seed + args.runs):
        sc = random_scenario(seed)
        kinds.update(f.kind for f in sc.faults)
        r = run_scenario(sc, seed)
        if not r.ok:
            failed.append(seed)
            print(f"FAIL seed={seed}: " + "; ".join(d for ok, d in r.oracles.values() if not ok))
    print(f"{args.runs} runs in {time.monotonic() - t0:.1f}s, {len(failed)} failed; faults injected: {dict(kinds)}")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
