"""Ray forwards per view and strategy at one path per pixel (CSV)."""

import argparse

from proxytrace.engine import RenderConfig
from proxytrace.metrics import table_to_text, tabulate_forwards, write_csv
from proxytrace.partition import STRATEGIES
from proxytrace.scene import ISLAND_VIEWS, generate_mini_island, generate_stress_island


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", choices=("stress-island", "mini-island"), default="stress-island")
    ap.add_argument("--ranks", type=int, default=4)
    ap.add_argument("--size", type=int, default=128, help="square image side")
    ap.add_argument("--bounces", type=int, default=4)
    ap.add_argument("--out", default="forwards.csv")
    args = ap.parse_args()

    scene = generate_stress_island() if args.scene == "stress-island" else generate_mini_island()
    cfg = RenderConfig(width=args.size, height=args.size, max_bounce=args.bounces)
    rows, _ = tabulate_forwards(scene, ISLAND_VIEWS, STRATEGIES, args.ranks, cfg)
    write_csv(rows, args.out)
    print(table_to_text(rows), end="")


if __name__ == "__main__":
    main()
