#!/usr/bin/env python3
"""Three-phase decider hot swap: print per-phase commit/abort counts."""

import argparse
import json
import sys

from logact.harness import Simulation
from logact.harness.scenarios import hot_swap, hot_swap_phases


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--per-phase", type=int, default=50, help="intents per phase")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    sim = Simulation(hot_swap(n_per_phase=args.per_phase), args.seed)
    try:
        sim.run()
        report = sim.report()
        phases = hot_swap_phases(sim.evidence())
    finally:
        sim.close()
    if args.json:
        print(json.dumps(phases, indent=2))
    else:
        print(f"{'phase':<6}{'policy':<16}{'attacks':>8}{'committed':>10}{'aborted':>9}{'benign':>8}{'commit rate':>13}")
        for i, p in enumerate(phases, 1):
            print(f"{i:<6}{p['policy']:<16}{p['attack']:>8}{p['attack_commit']:>10}{p['attack_abort']:>9}"
                  f"{p['benign']:>8}{p['benign_commit_rate']:>13.2f}")
    print("oracles:", "PASS" if report.ok else "FAIL")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
