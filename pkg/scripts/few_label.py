"""Few-label comparison of CE, CE+SSL and GPT->CE at small labeled-set sizes.

    python scripts/few_label.py [--sizes 5 10 20] [--seeds 5] [--out runs/few_label.csv]

Prints per-run AUROC and the median per (scheme, size).
"""
import argparse
import logging
from pathlib import Path

from itgpt.experiments import few_label, format_records, median_by_label


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--schemes", nargs="+", default=["CE", "CE_SSL", "GPT_then_CE"])
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    records = few_label(sizes=args.sizes, seeds=range(args.seeds), schemes=args.schemes)
    text = format_records(records)
    print(text, end="")
    for label, med in sorted(median_by_label(records).items()):
        print(f"# median {label}: {med:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
