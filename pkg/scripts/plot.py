"""Plot one metric against one grid axis from a metrics.csv.

    python3 scripts/plot.py safed-out/fig-attestation-latency/metrics.csv n latency_mean_s --by o --logx
"""

import argparse
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from safed.harness import read_csv  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("x")
    ap.add_argument("y")
    ap.add_argument("--by", help="one line per value of this column")
    ap.add_argument("--logx", action="store_true")
    ap.add_argument("--out", default="plot.png")
    args = ap.parse_args(argv)

    series = defaultdict(list)
    for r in read_csv(args.csv):
        if r["error"]:
            continue
        series[r[args.by] if args.by else ""].append((float(r[args.x]), float(r[args.y])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"{args.by}={label}" if args.by else None)
    if args.logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.y)
    if args.by:
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(args.out)


if __name__ == "__main__":
    main()
