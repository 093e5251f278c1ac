"""Cross-validated grid over depth, mixing layer and dropout; writes a results table.

    python scripts/grid.py --data DIR --depth 1 2 --mixing Linear MLP1 --epochs 5 --out runs/grid.csv
    itgpt report runs/grid.csv --group-by depth,mixing
"""
import argparse
import logging

from itgpt.data import load_dataset
from itgpt.train import TrainConfig, expand_grid, run_experiment_grid, write_results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--depth", type=int, nargs="+", default=[2])
    p.add_argument("--mixing", nargs="+", default=["Linear"])
    p.add_argument("--dropout", type=float, nargs="+", default=[0.0])
    p.add_argument("--scheme", default="CE")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    ds, _ = load_dataset(args.data)
    base = TrainConfig(scheme=args.scheme, epochs=args.epochs, valid_every=0)
    configs = expand_grid(base, depth=args.depth, mixing=args.mixing, dropout=args.dropout)
    rows = run_experiment_grid(ds, configs, k=args.folds, n_jobs=args.jobs)
    write_results(rows, args.out)
    print(f"{len(rows)} rows written to {args.out}")


if __name__ == "__main__":
    main()
