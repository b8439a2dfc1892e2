"""Run the full finite-difference gradient suite and print the table.

    python3 scripts/run_gradcheck.py [--seeds 5]
"""

import argparse
import sys
import time

from m2s.gradcheck import format_table, run_gradchecks


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    t0 = time.perf_counter()
    results = run_gradchecks(range(args.seeds))
    print(format_table(results))
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
