"""Plot step-indexed loss CSVs written by ``latent-rescale train`` (one line per file and column).

Usage: python3 scripts/loss_curves.py run/losses.csv other/losses.csv --column val_res --out curves.png
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_series(path: Path, column: str, stage: str | None):
    steps, values = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if stage and row["stage"] != stage:
                continue
            if row.get(column, "") != "":
                steps.append(int(row["step"]))
                values.append(float(row[column]))
    return steps, values


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", nargs="+", type=Path)
    ap.add_argument("--column", default="val_res")
    ap.add_argument("--stage", default="1")
    ap.add_argument("--out", default="loss_curves.png")
    args = ap.parse_args()
    fig, ax = plt.subplots(figsize=(5, 4))
    for path in args.csv:
        steps, values = read_series(path, args.column, args.stage or None)
        ax.plot(steps, values, label=path.parent.name or path.stem)
    ax.set_xlabel("step")
    ax.set_ylabel(args.column)
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
