"""Synthetic-data experiments: learnability, few-label schemes, dropout at depth.

Each runner returns plain records so scripts can tabulate them and tests
can assert on them.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, SynthConfig, split_kfold, synth_generate
from .train import TrainConfig, train

log = logging.getLogger(__name__)

BENCH_SYNTH = SynthConfig(n_observations=500)
BENCH_SEED = 0


@dataclass
class RunRecord:
    label: str
    seed: int
    fold: int
    auroc: float | None
    seconds: float
    config: dict = field(default_factory=dict)


def bench_dataset(n_observations: int = 500, seed: int = BENCH_SEED) -> Dataset:
    return synth_generate(replace(BENCH_SYNTH, n_observations=n_observations), seed)


def _run(ds, cfg, tr, va, label, fold, labeled=None) -> RunRecord:
    start = time.perf_counter()
    res = train(ds, cfg, tr, va, labeled=labeled)
    rec = RunRecord(label, cfg.seed, fold, res.metrics.get("auroc"), time.perf_counter() - start, cfg.to_dict())
    log.info("%s seed=%d fold=%d auroc=%s (%.1fs)", label, cfg.seed, fold, rec.auroc, rec.seconds)
    return rec


def learnability(
    dataset: Dataset | None = None,
    k: int = 5,
    folds: Sequence[int] | None = None,
    split_seed: int = 0,
    base: TrainConfig | None = None,
) -> list[RunRecord]:
    """Scheme CE at depth 2 with the fixed defaults, one run per fold."""
    ds = bench_dataset() if dataset is None else dataset
    cfg = base or TrainConfig(scheme="CE", depth=2, valid_every=0)
    splits = split_kfold(len(ds), k, split_seed)
    return [_run(ds, cfg, *splits[f], "CE", f) for f in (range(k) if folds is None else folds)]


def few_label(
    dataset: Dataset | None = None,
    sizes: Sequence[int] = (5, 10, 20),
    seeds: Sequence[int] = range(5),
    schemes: Sequence[str] = ("CE", "CE_SSL", "GPT_then_CE"),
    fold: int = 0,
    k: int = 5,
    split_seed: int = 0,
    base: TrainConfig | None = None,
) -> list[RunRecord]:
    """Every scheme at every labeled-set size; the seed drives init, order and the labeled subset.

    ``label_fraction`` is set so that ``round(p_l * N_train)`` equals the size.
    """
    ds = bench_dataset() if dataset is None else dataset
    tr, va = split_kfold(len(ds), k, split_seed)[fold]
    base = base or TrainConfig(depth=2, valid_every=0)
    out = []
    for size in sizes:
        for seed in seeds:
            for scheme in schemes:
                cfg = replace(base, scheme=scheme, seed=seed, label_fraction=size / len(tr))
                out.append(_run(ds, cfg, tr, va, f"{cfg.scheme}@{size}", fold))
    return out


def dropout_at_depth(
    depth: int = 6,
    dropouts: Sequence[float] = (0.0, 0.1),
    seeds: Sequence[int] = range(5),
    n_train: int = 60,
    n_valid: int = 100,
    data_seed: int = 1,
    base: TrainConfig | None = None,
) -> list[RunRecord]:
    """Deep models on a small training set, compared across dropout levels."""
    ds = bench_dataset(n_train + n_valid, data_seed)
    tr, va = np.arange(n_train), np.arange(n_train, n_train + n_valid)
    base = base or TrainConfig(scheme="CE", valid_every=0)
    out = []
    for seed in seeds:
        for p in dropouts:
            cfg = replace(base, depth=depth, dropout=p, seed=seed)
            out.append(_run(ds, cfg, tr, va, f"dropout={p}", 0))
    return out


def median_by_label(records: Sequence[RunRecord]) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in records:
        if r.auroc is not None:
            groups.setdefault(r.label, []).append(r.auroc)
    return {k: statistics.median(v) for k, v in groups.items()}


def format_records(records: Sequence[RunRecord]) -> str:
    lines = ["label,seed,fold,auroc,seconds"]
    lines += [f"{r.label},{r.seed},{r.fold},{r.auroc!r},{r.seconds:.2f}" for r in records]
    return "\n".join(lines) + "\n"
