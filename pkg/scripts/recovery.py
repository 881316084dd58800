#!/usr/bin/env python3
"""Kill the executor partway through a batch of work items and watch it resume."""

import argparse
import sys

from logact.entries import Intent, Result
from logact.harness import Simulation
from logact.harness.scenarios import executor_kill


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--items", type=int, default=50)
    ap.add_argument("--kill-after", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    sim = Simulation(executor_kill(args.items, args.kill_after), args.seed)
    try:
        sim.run()
        report = sim.report()
        for e in sim.entries():
            p = e.payload
            if isinstance(p, Intent):
                print(f"{e.position:>4}  intent  {p.action.body}")
            elif isinstance(p, Result):
                print(f"{e.position:>4}  result  [{p.status}] {p.output.splitlines()[0] if p.output else ''}")
        counters = sim.sandbox / "counters"
        counts = sorted(len(f.read_text()) for f in counters.iterdir())
        print(f"items with counters: {len(counts)}, executions per item: min {counts[0]} max {counts[-1]}")
    finally:
        sim.close()
    for name, (ok, detail) in report.oracles.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
