"""Dropout levels for a deep model trained on a small synthetic set.

    python scripts/dropout_depth.py [--depth 6] [--dropouts 0 0.1] [--seeds 5]
"""
import argparse
import logging
from pathlib import Path

from itgpt.experiments import dropout_at_depth, format_records, median_by_label


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--dropouts", type=float, nargs="+", default=[0.0, 0.1])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    records = dropout_at_depth(args.depth, args.dropouts, range(args.seeds), n_train=args.n_train)
    text = format_records(records)
    print(text, end="")
    for label, med in sorted(median_by_label(records).items()):
        print(f"# median {label}: {med:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
