"""ADAM training loop, evaluation and experiment grids."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, Observation, observation_strata, parse_key_values, split_kfold
from .metrics import ScoredPredictions, summarize
from .model import (
    ModelConfig,
    checkpoint_bytes,
    init_params,
    itgpt_forward,
    make_anchor,
    model_config_dict,
    predict_labels,
    predict_next_inputs,
)
from .objectives import LossConfig, canonical_scheme, ce_loss, loss_terms, ssl_mse_loss, subsample_labels
from .time_encoding import default_lambda

log = logging.getLogger(__name__)

DEPTH_GRID = tuple(range(1, 8))
DROPOUT_GRID = (0.0, 0.1, 0.2, 0.3)
MIXING_GRID = ("Linear", "MLP1", "MLP2")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, last_good: Mapping[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    d_k: int = 32
    d_o: int | None = None
    d_a: int = 64
    batch_size: int = 64
    learning_rate: float = 5e-4
    epochs: int = 20
    depth: int = 2
    dropout: float = 0.0
    mixing: str = "Linear"
    label_fraction: float = 1.0
    scheme: str = "CE"
    seed: int = 0
    anchor_length: int = 64
    lambda_scale: float = 10.0
    lam: float | None = None
    pretrain_epochs: int = 2
    finetune_epochs: int = 5
    censored_class: int | None = None
    query_map: bool = False
    grad_clip: float | None = None
    log_normalize: bool = False
    n_folds: int = 5
    fold: int = 0
    split_seed: int = 0
    valid_every: int = 1

    def __post_init__(self):
        self.scheme = canonical_scheme(self.scheme)
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @property
    def epoch_budget(self) -> int:
        if self.scheme == "GPT_then_CE":
            return self.pretrain_epochs + self.finetune_epochs
        return self.epochs

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in d.items():
            if key not in types:
                raise ValueError(f"unknown config field {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        return cls.from_dict(parse_key_values(text, source))

    def model_config(self, dataset: Dataset) -> ModelConfig:
        lam = self.lam if self.lam is not None else default_lambda(dataset.max_time(), self.lambda_scale)
        return ModelConfig(
            modality_dims=dataset.schema.modality_dims,
            n_classes=dataset.schema.n_classes,
            d_k=self.d_k,
            d_o=self.d_o,
            d_a=self.d_a,
            depth=self.depth,
            mixing=self.mixing,
            dropout=self.dropout,
            anchor_length=self.anchor_length,
            lam=lam,
            query_map=self.query_map,
        )


def _coerce(key, raw, annotation):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = "None" in str(annotation)
    if optional and text.lower() in ("none", ""):
        return None
    kind = str(annotation).replace(" | None", "")
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ValueError(f"config field {key!r}: cannot parse {raw!r} as {kind}") from None
    return text


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    clip: float | None = None,
) -> None:
    """Bias-corrected ADAM update, in place.

    A non-finite gradient or an overflowing update aborts before anything
    is modified.
    """
    for path, g in grads.items():
        if g.shape != params[path].shape:
            raise ad.ShapeError(f"gradient for {path} has shape {g.shape}, parameter {params[path].shape}")
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for parameter {path}")
    if clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = clip / norm if norm > clip else 1.0
    else:
        scale = 1.0
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    staged = {}
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            g = np.zeros_like(p)
        elif scale != 1.0:
            g = g * scale
        with np.errstate(over="ignore", invalid="ignore"):
            m = b1 * state.m[path] + (1.0 - b1) * g
            v = b2 * state.v[path] + (1.0 - b2) * (g * g)
            new = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        # a huge finite gradient can still overflow the second moment
        if not (np.isfinite(v).all() and np.isfinite(new).all()):
            raise ad.NonFiniteError(f"optimizer state overflowed for parameter {path}")
        staged[path] = (m, v, new)
    state.step += 1
    for path, (m, v, new) in staged.items():
        state.m[path], state.v[path] = m, v
        params[path][...] = new


# --- per-observation loss ----------------------------------------------------


@dataclass
class ObservationLoss:
    total: ad.Node
    ce: float | None = None
    mse: float | None = None


def observation_loss(
    obs: Observation,
    params: Mapping[str, Any],
    mcfg: ModelConfig,
    use_ce: bool,
    use_mse: bool,
    censored_class: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ObservationLoss:
    anchor = make_anchor(obs, mcfg.anchor_length, mcfg.d_a)
    fwd = itgpt_forward(obs, anchor, params, mcfg, training, rng, decode_last=use_mse)
    total = None
    ce_val = mse_val = None
    if use_ce and obs.target is not None and obs.target.times.size:
        logits, cov = predict_labels(fwd.anchor_state, anchor.times, obs.target.times, params, mcfg)
        probs = ad.softmax(logits)
        ce = ce_loss(obs.target.one_hot(mcfg.n_classes), probs, censored_class, cov)
        ce_val = float(ce.value)
        total = ce
    if use_mse:
        preds = predict_next_inputs(fwd.embeddings, params)
        mse = ssl_mse_loss([m.values for m in obs.modalities], preds, fwd.coverage)
        mse_val = float(mse.value)
        total = mse if total is None else total + mse
    return ObservationLoss(ad.constant(0.0) if total is None else total, ce_val, mse_val)


def loss_and_grad(obs, params, mcfg, use_ce, use_mse, censored_class=None, training=False, rng=None):
    tape = ad.Tape()
    leaves = tape.leaves(params)
    res = observation_loss(obs, leaves, mcfg, use_ce, use_mse, censored_class, training, rng)
    if res.total.tape is tape:
        tape.backward(res.total)
    return res, {k: tape.grad(n) for k, n in leaves.items()}


# --- evaluation --------------------------------------------------------------


def predict_dataset(params, mcfg: ModelConfig, observations: Sequence[Observation], censored_class=None):
    """Eval-mode class probabilities for every covered target row."""
    scores, truths = [], []
    for obs in observations:
        if obs.target is None or obs.target.times.size == 0:
            continue
        anchor = make_anchor(obs, mcfg.anchor_length, mcfg.d_a)
        fwd = itgpt_forward(obs, anchor, params, mcfg, training=False, decode_last=False)
        logits, cov = predict_labels(fwd.anchor_state, anchor.times, obs.target.times, params, mcfg)
        probs = ad.softmax(logits).value
        keep = cov.copy()
        if censored_class is not None:
            keep &= obs.target.labels != censored_class
        scores.append(probs[keep])
        truths.append(obs.target.labels[keep])
    if not scores:
        return ScoredPredictions(np.zeros((0, mcfg.n_classes)), np.zeros(0, dtype=np.int64))
    return ScoredPredictions(np.concatenate(scores), np.concatenate(truths))


def evaluate(params, mcfg: ModelConfig, observations: Sequence[Observation], censored_class=None) -> dict:
    preds = predict_dataset(params, mcfg, observations, censored_class)
    if preds.truths.size == 0:
        return {}
    out = summarize(preds)
    p = preds.scores[np.arange(preds.truths.size), preds.truths]
    out["ce"] = float(-np.mean(np.log(np.maximum(p, 1e-12))))
    return out


# --- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    config: TrainConfig
    trace: list[tuple[int, str, str, float]] = field(default_factory=list)
    metrics: dict[str, float | None] = field(default_factory=dict)
    labeled: frozenset[int] = frozenset()

    def checkpoint(self) -> bytes:
        return checkpoint_bytes(self.params, checkpoint_config(self.config, self.model_config))


def checkpoint_config(cfg: TrainConfig, mcfg: ModelConfig) -> dict[str, Any]:
    return {"train": cfg.to_dict(), "model": model_config_dict(mcfg)}


def _objective_name(scheme: str, epoch: int, cfg: LossConfig) -> str:
    if scheme == "CE":
        return "ce"
    if scheme == "CE_SSL":
        return "ce+mse"
    return "mse" if epoch <= cfg.pretrain_epochs else "ce"


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    train_idx: Sequence[int] | None = None,
    valid_idx: Sequence[int] | None = None,
    labeled: Iterable[int] | None = None,
    on_epoch: Callable[[int, dict[str, np.ndarray]], None] | None = None,
) -> TrainResult:
    """Train on ``train_idx`` and evaluate on ``valid_idx``.

    Each observation is its own tape; gradients are averaged over the batch
    before one ADAM step. ``labeled`` defaults to a ``label_fraction``
    subsample of the training indices.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    train_idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx, dtype=np.int64)
    valid_idx = np.zeros(0, dtype=np.int64) if valid_idx is None else np.asarray(valid_idx, dtype=np.int64)
    train_set = dataset.subset(train_idx)
    mcfg = cfg.model_config(train_set)
    if labeled is None:
        strata = observation_strata(train_set)
        labeled = subsample_labels(train_idx.tolist(), cfg.label_fraction, cfg.seed, strata)
    loss_cfg = LossConfig(cfg.scheme, cfg.pretrain_epochs, cfg.finetune_epochs, frozenset(labeled), cfg.censored_class)

    params = init_params(mcfg, cfg.seed)
    state = AdamState.zeros_like(params)
    order_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(params, mcfg, cfg, labeled=loss_cfg.labeled)
    last_good = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, cfg.epoch_budget + 1):
        order = order_rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                use_ce, use_mse = loss_terms(cfg.scheme, epoch, int(i), loss_cfg)
                if not (use_ce or use_mse):
                    continue
                try:
                    res, g = loss_and_grad(dataset[int(i)], params, mcfg, use_ce, use_mse,
                                           cfg.censored_class, True, dropout_rng)
                except ad.NonFiniteError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}", last_good) from exc
                if res.total.tape is None:
                    continue
                losses.append(float(res.total.value))
                for k in grads:
                    grads[k] += g[k]
            for k in grads:
                grads[k] /= batch.size
            try:
                adam_step(params, grads, state, cfg.learning_rate, cfg.grad_clip)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", last_good) from exc
        mean_loss = float(np.mean(losses)) if losses else 0.0
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"epoch {epoch}: loss is not finite", last_good)
        last_good = {k: v.copy() for k, v in params.items()}
        result.trace.append((epoch, "train", _objective_name(cfg.scheme, epoch, loss_cfg), mean_loss))
        if valid_idx.size and cfg.valid_every > 0 and epoch % cfg.valid_every == 0:
            vm = evaluate(params, mcfg, [dataset[int(i)] for i in valid_idx], cfg.censored_class)
            if "ce" in vm:
                result.trace.append((epoch, "valid", "ce", vm["ce"]))
        log.debug("epoch %d loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, params)

    if valid_idx.size:
        result.metrics = evaluate(params, mcfg, [dataset[int(i)] for i in valid_idx], cfg.censored_class)
    return result


# --- experiment grids --------------------------------------------------------

RESULT_COLUMNS = ("fold", "scheme", "depth", "mixing", "dropout", "p_l", "seed", "metric", "value")


def expand_grid(base: TrainConfig, **axes: Sequence[Any]) -> list[TrainConfig]:
    """Cartesian product of ``axes`` over ``base``."""
    configs = [base]
    for name, values in axes.items():
        configs = [replace(c, **{name: v}) for c in configs for v in values]
    return configs


def result_rows(fold, cfg: TrainConfig, metrics: Mapping[str, Any]):
    for metric, value in metrics.items():
        yield {
            "fold": fold,
            "scheme": cfg.scheme,
            "depth": cfg.depth,
            "mixing": cfg.mixing,
            "dropout": cfg.dropout,
            "p_l": cfg.label_fraction,
            "seed": cfg.seed,
            "metric": metric,
            "value": float("nan") if value is None else float(value),
        }


def run_cell(dataset: Dataset, cfg: TrainConfig, fold: int, train_idx, valid_idx) -> list[dict]:
    try:
        res = train(dataset, cfg, train_idx, valid_idx)
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("grid cell fold=%d %s failed: %s", fold, cfg, exc)
        return list(result_rows(fold, cfg, {"error": None}))
    metrics = dict(res.metrics)
    metrics["n_labeled"] = len(res.labeled)
    return list(result_rows(fold, cfg, metrics))


def run_experiment_grid(
    dataset: Dataset,
    configs: Sequence[TrainConfig],
    k: int = 5,
    split_seed: int = 0,
    folds: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> list[dict]:
    """Train and evaluate every (fold, config) cell.

    Folds come from ``split_seed`` alone, so they are identical across configs.
    """
    if not configs:
        raise ValueError("empty grid")
    splits = split_kfold(len(dataset), k, split_seed)
    folds = range(k) if folds is None else folds
    cells = [(cfg, f) for cfg in configs for f in folds]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n_jobs) as pool:
            futures = [pool.submit(run_cell, dataset, cfg, f, *splits[f]) for cfg, f in cells]
            chunks = [fu.result() for fu in futures]
    else:
        chunks = [run_cell(dataset, cfg, f, *splits[f]) for cfg, f in cells]
    return [row for chunk in chunks for row in chunk]


def write_results(rows: Iterable[Mapping[str, Any]], path, run_id: str | None = None) -> None:
    with open(path, "w") as fh:
        if run_id:
            fh.write(f"# run_id={run_id}\n")
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in RESULT_COLUMNS) + "\n")


def write_trace(trace, path, run_id: str | None = None) -> None:
    with open(path, "w") as fh:
        if run_id:
            fh.write(f"# run_id={run_id}\n")
        fh.write("epoch,split,objective,loss\n")
        for epoch, split, objective, loss in trace:
            fh.write(f"{epoch},{split},{objective},{loss!r}\n")
