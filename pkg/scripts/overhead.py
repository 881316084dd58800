#!/usr/bin/env python3
"""Delta-encoded inference log with a large system prompt; prints bytes and stage times."""

import argparse
import sys

from logact.harness import run_scenario
from logact.harness.scenarios import delta_overhead


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--turns", type=int, default=10)
    ap.add_argument("--delay", type=float, default=1.0, help="seconds of simulated inference latency per turn")
    ap.add_argument("--backend", choices=["memory", "durable"], default="durable")
    ap.add_argument("--workdir", help="keep the bus and sandbox here")
    ap.add_argument("--csv", help="write per-stage spans here")
    args = ap.parse_args(argv)

    r = run_scenario(delta_overhead(args.turns, args.delay, args.backend), 0, workdir=args.workdir)
    for name in ("delta_bytes", "inference_dominates", "task_complete"):
        ok, detail = r.oracles[name]
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    m = r.metrics
    print(f"inferring={m.inferring_ms}ms voting={m.voting_ms}ms deciding={m.deciding_ms}ms executing={m.executing_ms}ms")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(m.to_csv())
    return 0 if r.ok else 1


if __name__ == "__main__":
    sys.exit(main())
