"""Losses and the training-scheme dispatch."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

SCHEMES = ("CE", "CE_SSL", "GPT_then_CE")
SCHEME_ALIASES = {
    "CE": "CE",
    "CE_SSL": "CE_SSL",
    "CE+SSL": "CE_SSL",
    "GPT_then_CE": "GPT_then_CE",
    "GPT->CE": "GPT_then_CE",
    "GPT→CE": "GPT_then_CE",
}
PROB_FLOOR = 1e-12

USE_MSE = "use_MSE"
USE_CE = "use_CE"
SKIP = "skip"


class EmptyLossWarning(UserWarning):
    """No rows contributed to a loss term; the term is reported as 0."""


def canonical_scheme(name: str) -> str:
    try:
        return SCHEME_ALIASES[name]
    except KeyError:
        raise ValueError(
            f"unknown scheme {name!r}; expected one of CE, CE+SSL (CE_SSL), GPT->CE (GPT_then_CE)"
        ) from None


@dataclass
class LossConfig:
    scheme: str = "CE"
    pretrain_epochs: int = 2
    finetune_epochs: int = 5
    labeled: frozenset[int] = field(default_factory=frozenset)
    censored_class: int | None = None

    def __post_init__(self):
        self.scheme = canonical_scheme(self.scheme)
        self.labeled = frozenset(int(i) for i in self.labeled)

    @property
    def gpt_epochs(self) -> int:
        return self.pretrain_epochs + self.finetune_epochs


def ce_loss(true_labels, probs, censored_class: int | None = None, coverage=None) -> ad.Node:
    """Mean over included rows of ``-sum_k y_k ln p_k``.

    Rows whose true class is ``censored_class`` or that are uncovered are
    excluded. With nothing left the loss is 0 and an :class:`EmptyLossWarning`
    is emitted.
    """
    y = np.asarray(true_labels, dtype=np.float64)
    probs = ad.constant(probs)
    if y.shape != probs.value.shape:
        raise ad.ShapeError(f"labels {y.shape} vs probabilities {probs.value.shape}")
    include = np.ones(y.shape[0], dtype=bool)
    if coverage is not None:
        include &= np.asarray(coverage, dtype=bool)
    if censored_class is not None and y.shape[0]:
        include &= y[:, censored_class] != 1.0
    rows = np.flatnonzero(include)
    if rows.size == 0:
        warnings.warn("cross-entropy has no included rows", EmptyLossWarning, stacklevel=2)
        return ad.constant(0.0)
    logp = ad.log(ad.take_rows(probs, rows), floor=PROB_FLOOR)
    return ad.sum(ad.mul(logp, y[rows])) * (-1.0 / rows.size)


def ssl_mse_loss(data: Sequence[np.ndarray], predictions: Sequence, coverage: Sequence | None = None) -> ad.Node:
    """``sum_m (1/L_m) sum_{t >= 2, covered} ||x_t - xhat_t||^2``.

    ``data`` holds each modality's value matrix; the first sample of every
    modality is never scored, and normalization stays ``1/L_m``.
    """
    if len(data) != len(predictions):
        raise ad.ShapeError("one prediction per modality required")
    total = None
    for m, (x, pred) in enumerate(zip(data, predictions)):
        x = np.asarray(x, dtype=np.float64)
        pred = ad.constant(pred)
        if pred.value.shape != x.shape:
            raise ad.ShapeError(f"modality {m}: prediction {pred.value.shape} vs data {x.shape}")
        n = x.shape[0]
        include = np.arange(n) >= 1
        if coverage is not None:
            include &= np.asarray(coverage[m], dtype=bool)
        rows = np.flatnonzero(include)
        if rows.size == 0:
            continue
        term = ad.sum(ad.square(ad.take_rows(pred, rows) - x[rows])) * (1.0 / n)
        total = term if total is None else total + term
    return ad.constant(0.0) if total is None else total


def combined_loss(i: int, cfg: LossConfig, ce, ssl) -> ad.Node:
    if cfg.scheme != "CE_SSL":
        raise ValueError("combined_loss applies to the CE_SSL scheme only")
    return ad.constant(ssl) + ad.constant(ce) if i in cfg.labeled else ad.constant(ssl)


def schedule_select(epoch: int, i: int, cfg: LossConfig) -> str:
    """Epochs are 1-based: MSE pretraining first, then CE on labeled samples only."""
    if cfg.scheme != "GPT_then_CE":
        raise ValueError("schedule_select applies to the GPT_then_CE scheme only")
    if not 1 <= epoch <= cfg.gpt_epochs:
        raise ValueError(f"epoch {epoch} outside the budget 1..{cfg.gpt_epochs}")
    if epoch <= cfg.pretrain_epochs:
        return USE_MSE
    return USE_CE if i in cfg.labeled else SKIP


def loss_terms(scheme: str, epoch: int, i: int, cfg: LossConfig) -> tuple[bool, bool]:
    """Which of (CE, MSE) contribute for sample ``i`` at ``epoch``."""
    labeled = i in cfg.labeled
    if scheme == "CE":
        return labeled, False
    if scheme == "CE_SSL":
        return labeled, True
    choice = schedule_select(epoch, i, cfg)
    return choice == USE_CE, choice == USE_MSE


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample_labels(
    all_indices: Iterable[int],
    fraction: float,
    seed: int,
    strata: Sequence[int] | None = None,
) -> frozenset[int]:
    """Deterministic subset of size ``round(fraction * N)``.

    With ``strata`` (one class id per index) the subset is allocated across
    classes proportionally, by largest remainder.
    """
    idx = np.asarray(list(all_indices), dtype=np.int64)
    perm = np.argsort(idx, kind="stable")
    idx = idx[perm]
    if not 0.0 < fraction <= 1.0:
        raise ValueError("label fraction must lie in (0, 1]")
    size = _round_half_up(fraction * idx.size)
    if size == 0:
        raise ValueError(
            f"label fraction {fraction} of {idx.size} observations selects nobody; raise the fraction or N"
        )
    if size >= idx.size:
        return frozenset(idx.tolist())
    rng = np.random.default_rng(seed)
    if strata is None:
        return frozenset(rng.choice(idx, size=size, replace=False).tolist())
    strata = np.asarray(strata)
    if strata.size != idx.size:
        raise ValueError("strata must have one entry per index")
    strata = strata[perm]
    classes, counts = np.unique(strata, return_counts=True)
    quota = counts * size / idx.size
    alloc = np.floor(quota).astype(int)
    remainder = size - alloc.sum()
    order = np.lexsort((classes, -(quota - alloc)))
    alloc[order[:remainder]] += 1
    chosen = []
    for c, k in zip(classes, alloc):
        if k:
            chosen.extend(rng.choice(idx[strata == c], size=k, replace=False).tolist())
    return frozenset(chosen)
