"""Scheme CE at depth 2 on the benchmark generator, one run per fold.

    python scripts/learnability.py [--folds 0 1] [--out runs/learnability.csv]
"""
import argparse
import logging
from pathlib import Path

from itgpt.experiments import format_records, learnability


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--folds", type=int, nargs="*", help="fold indices (default all 5)")
    p.add_argument("--out", help="write per-run CSV here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    records = learnability(folds=args.folds)
    text = format_records(records)
    print(text, end="")
    hits = sum(r.auroc is not None and r.auroc >= 0.85 for r in records)
    print(f"# {hits}/{len(records)} folds reach AUROC 0.85")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
