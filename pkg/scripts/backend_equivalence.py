#!/usr/bin/env python3
"""Diff the memory and durable buses on random operations, then SIGKILL a writer repeatedly."""

import argparse
import sys

from logact.harness.equivalence import compare_backends, kill_trials


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sequences", type=int, default=10_000)
    ap.add_argument("--kills", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", help="scratch directory (default: system temp)")
    args = ap.parse_args(argv)

    eq = compare_backends(args.sequences, args.seed, workdir=args.workdir)
    print(f"equivalence: {eq.sequences} sequences, {eq.operations} ops, {len(eq.mismatches)} mismatches ({eq.seconds:.1f}s)")
    for m in eq.mismatches[:5]:
        print("  ", m)
    k = kill_trials(args.kills, args.seed, workdir=args.workdir)
    print(f"kill trials: {k.trials} trials, {k.acknowledged} acknowledged appends, {len(k.lost)} lost, "
          f"{len(k.wrong)} altered ({k.seconds:.1f}s)")
    return 0 if eq.ok and k.ok else 1


if __name__ == "__main__":
    sys.exit(main())
