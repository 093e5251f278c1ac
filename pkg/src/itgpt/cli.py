"""Command-line entry point: synth, train, eval, check, report.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
Outputs go under ``--out`` or, by default, ``$ITGPT_OUT/<command>-<run_id>``
(``ITGPT_OUT`` defaults to ``runs``).
"""
from __future__ import annotations

import argparse
import ast
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .checks import CHECK_KINDS, run_check
from .data import (
    DataError,
    SynthConfig,
    ensure_dir,
    fingerprint,
    load_dataset,
    log_normalize_dataset,
    parse_key_values,
    split_kfold,
    synth_generate,
    write_dataset,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .objectives import canonical_scheme
from .train import (
    RESULT_COLUMNS,
    DivergenceError,
    TrainConfig,
    checkpoint_config,
    evaluate,
    result_rows,
    train,
    write_results,
    write_trace,
)

log = logging.getLogger("itgpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "ITGPT_OUT"
STAT_COLUMNS = ("n", "n_undefined", "median", "q1", "q3", "mean", "std", "min", "max")


class UsageError(Exception):
    pass


# --- manifests ---------------------------------------------------------------


def run_id_for(command: str, config: dict, data_hash: str | None) -> str:
    """Deterministic id from what ran, never from when it ran."""
    blob = json.dumps({"command": command, "config": config, "data": data_hash}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_manifest(out: Path, command: str, config: dict, data_hash: str | None, seeds: dict, started: float) -> str:
    run_id = run_id_for(command, config, data_hash)
    manifest = {
        "run_id": run_id,
        "command": command,
        "config": config,
        "dataset_fingerprint": data_hash,
        "tool_version": __version__,
        "seeds": seeds,
        "started_unix": started,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_id


def _out_dir(arg: str | None, command: str, run_id: str) -> Path:
    if arg:
        return ensure_dir(arg)
    return ensure_dir(Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{run_id}")


# --- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    text = Path(args.spec).read_text() if args.spec else ""
    try:
        cfg = SynthConfig.from_text(text, args.spec or "<defaults>")
    except TypeError as exc:
        raise DataError(f"invalid synthetic spec: {exc}") from None
    config = {"spec": {f.name: getattr(cfg, f.name) for f in fields(cfg)}, "seed": args.seed}
    run_id = run_id_for("synth", config, None)
    out = _out_dir(args.out, "synth", run_id)
    ds = synth_generate(cfg, args.seed)
    write_dataset(ds, out)
    write_manifest(out, "synth", config, None, {"data": args.seed}, started)
    print(f"wrote {len(ds)} observations to {out}")
    return EXIT_OK


# --- train / eval ------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    raw = {}
    if args.config:
        raw.update(parse_key_values(Path(args.config).read_text(), args.config))
    for f in fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            raw[f.name] = value
    if "scheme" in raw:
        try:
            canonical_scheme(str(raw["scheme"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        return TrainConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _split(n: int, cfg: TrainConfig):
    if cfg.n_folds < 2:
        return np.arange(n), np.zeros(0, dtype=np.int64)
    if not 0 <= cfg.fold < cfg.n_folds:
        raise UsageError(f"fold {cfg.fold} outside 0..{cfg.n_folds - 1}")
    if n < cfg.n_folds:
        raise DataError(f"{n} observations cannot be split into {cfg.n_folds} folds")
    return split_kfold(n, cfg.n_folds, cfg.split_seed)[cfg.fold]


def cmd_train(args) -> int:
    started = time.time()
    cfg = _train_config(args)
    ds, _ = load_dataset(args.data)
    if cfg.log_normalize:
        ds = log_normalize_dataset(ds)
    data_hash = fingerprint(args.data)
    config = cfg.to_dict()
    run_id = run_id_for("train", config, data_hash)
    out = _out_dir(args.out, "train", run_id)
    tr, va = _split(len(ds), cfg)
    try:
        res = train(ds, cfg, tr, va)
    except DivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "last_good.ckpt", exc.last_good, {"run_id": run_id, "train": config})
        write_manifest(out, "train", config, data_hash, {"model": cfg.seed, "split": cfg.split_seed}, started)
        raise
    ckpt_cfg = checkpoint_config(cfg, res.model_config)
    ckpt_cfg["run_id"] = run_id
    save_checkpoint(out / "model.ckpt", res.params, ckpt_cfg)
    write_trace(res.trace, out / "trace.csv", run_id)
    metrics = dict(res.metrics)
    metrics["n_labeled"] = len(res.labeled)
    write_results(list(result_rows(cfg.fold, cfg, metrics)), out / "results.csv", run_id)
    write_manifest(out, "train", config, data_hash, {"model": cfg.seed, "split": cfg.split_seed}, started)
    _print_metrics(res.metrics)
    print(f"outputs in {out}")
    return EXIT_OK


def _print_metrics(metrics: dict) -> None:
    for k, v in metrics.items():
        print(f"{k} = {'undefined' if v is None else f'{v:.6f}'}")


def cmd_eval(args) -> int:
    started = time.time()
    params, ckpt = load_checkpoint(args.checkpoint)
    try:
        cfg = TrainConfig.from_dict(ckpt["train"])
        mcfg = ModelConfig(**{**ckpt["model"], "modality_dims": tuple(ckpt["model"]["modality_dims"])})
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.checkpoint}: checkpoint config unreadable ({exc})") from None
    ds, _ = load_dataset(args.data)
    if ds.schema.modality_dims != mcfg.modality_dims or ds.schema.n_classes != mcfg.n_classes:
        raise DataError("dataset schema does not match the checkpoint's model")
    if cfg.log_normalize:
        ds = log_normalize_dataset(ds)
    idx = np.arange(len(ds)) if args.all else _split(len(ds), cfg)[1]
    metrics = evaluate(params, mcfg, [ds[int(i)] for i in idx], cfg.censored_class)
    data_hash = fingerprint(args.data)
    config = {"checkpoint_run_id": ckpt.get("run_id"), "train": cfg.to_dict(), "all": bool(args.all)}
    run_id = run_id_for("eval", config, data_hash)
    out = _out_dir(args.out, "eval", run_id)
    write_results(list(result_rows(cfg.fold, cfg, metrics)), out / "results.csv", run_id)
    write_manifest(out, "eval", config, data_hash, {"model": cfg.seed, "split": cfg.split_seed}, started)
    _print_metrics(metrics)
    return EXIT_OK


# --- check -------------------------------------------------------------------


def _parse_sizes(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"size parameter {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = ast.literal_eval(raw.strip())
        except (ValueError, SyntaxError):
            raise UsageError(f"size parameter {key!r}: cannot parse {raw!r}") from None
    return out


def cmd_check(args) -> int:
    sizes = _parse_sizes(args.size)
    kinds = CHECK_KINDS if args.kind == "all" else (args.kind,)
    failed = False
    for kind in kinds:
        try:
            result = run_check(kind, seed=args.seed, **sizes)
        except TypeError as exc:
            raise UsageError(f"check {kind}: {exc}") from None
        print(result.line())
        failed |= not result.passed
    return EXIT_NUMERIC if failed else EXIT_OK


# --- report ------------------------------------------------------------------


def read_results(paths: Sequence[str]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        if not lines:
            continue
        reader = csv.DictReader(lines)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise DataError(f"{path}: columns {reader.fieldnames} do not match {list(RESULT_COLUMNS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                row["value"] = float(row["value"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: value {row['value']!r} is not a number") from None
            rows.append(row)
    return rows


def summarize_groups(rows: Sequence[dict], group_by: Sequence[str]) -> list[dict]:
    """Per (group, metric): median, quartiles, mean and sample std over finite values."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(row[c] for c in group_by) + (row["metric"],)
        groups.setdefault(key, []).append(row["value"])
    table = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        finite = vals[np.isfinite(vals)]
        entry = dict(zip(tuple(group_by) + ("metric",), key))
        entry["n"] = int(finite.size)
        entry["n_undefined"] = int(vals.size - finite.size)
        if finite.size:
            q1, med, q3 = np.percentile(finite, [25, 50, 75])
            entry.update(median=float(med), q1=float(q1), q3=float(q3), mean=float(finite.mean()),
                         min=float(finite.min()), max=float(finite.max()))
            entry["std"] = float(finite.std(ddof=1)) if finite.size > 1 else 0.0
        else:
            entry.update({k: math.nan for k in STAT_COLUMNS[2:]})
        table.append(entry)
    return table


def cmd_report(args) -> int:
    group_by = [c for c in (args.group_by or "").split(",") if c]
    bad = [c for c in group_by if c not in RESULT_COLUMNS or c in ("metric", "value")]
    if bad:
        raise UsageError(f"cannot group by {bad}; choose from {[c for c in RESULT_COLUMNS[:-2]]}")
    rows = read_results(args.results)
    if not rows:
        warnings.warn("no result rows found; writing an empty table", stacklevel=1)
    table = summarize_groups(rows, group_by)
    header = list(group_by) + ["metric", *STAT_COLUMNS]
    text = ",".join(header) + "\n" + "".join(
        ",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in header) + "\n" for r in table
    )
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itgpt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="key = value file of SynthConfig fields (defaults if omitted)")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on one fold and write checkpoint, trace and results")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file of TrainConfig fields")
    t.add_argument("--out")
    for f in fields(TrainConfig):
        flags = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        t.add_argument(*flags, dest=f"cfg_{f.name}", metavar=f.name.upper(), help=f"default {f.default!r}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its validation fold")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--all", action="store_true", help="evaluate every observation instead of the fold")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run an invariant suite")
    c.add_argument("kind", choices=CHECK_KINDS + ("all",))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--size", action="append", metavar="KEY=VALUE", help="suite size parameter, repeatable")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("report", help="aggregate results files")
    r.add_argument("results", nargs="*")
    r.add_argument("--group-by", default="scheme,p_l", help="comma-separated result columns")
    r.add_argument("--out", help="also write the table to this CSV")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, ad.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
