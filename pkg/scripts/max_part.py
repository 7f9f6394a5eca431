"""Largest-part memory estimate vs. part count for every strategy (CSV)."""

import argparse

from proxytrace.metrics import tabulate_max_part, write_csv
from proxytrace.partition import STRATEGIES
from proxytrace.scene import generate_mini_island, generate_stress_island


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", choices=("stress-island", "mini-island"), default="stress-island")
    ap.add_argument("--nmax", type=int, default=32)
    ap.add_argument("--out", default="max_part.csv")
    args = ap.parse_args()

    scene = generate_stress_island() if args.scene == "stress-island" else generate_mini_island()
    rows = tabulate_max_part(scene, STRATEGIES, args.nmax)
    write_csv(rows, args.out)
    n4, n16 = rows[3], rows[min(15, len(rows) - 1)]
    print(f"wrote {args.out}")
    print(f"object-naive N=4: {n4['object-naive']:.0f} bytes, spatial-simple N={n16['N']}: "
          f"{n16['spatial-simple']:.0f} bytes")


if __name__ == "__main__":
    main()
