"""Optimization time of hierarchical vs batch mode on the 3-floor reference world."""

import argparse

from hsgraph.cli import bench_rows, format_table


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--floors", type=int, default=3)
    p.add_argument("--cols", type=int, default=3)
    args = p.parse_args()
    rows = bench_rows(list(range(args.seeds)), dict(floors=args.floors, cols=args.cols))
    print(format_table(rows))
    h, b = (r["total_ms"] for r in rows)
    print(f"hier/batch time ratio {h / b:.3f}")


if __name__ == "__main__":
    main()
