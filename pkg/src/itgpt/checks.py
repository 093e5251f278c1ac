"""Invariant suites: gradients, oracle equivalence, causality, encodings, metrics, schemes.

Each suite returns a :class:`CheckResult` with the worst observed error and
the threshold it is held to. Brute-force metric oracles live here too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attention_oracle, causal_cross_attention
from .data import Dataset, ModalitySeries, Observation, Schema, Target
from .itnet import MIXING_KINDS, ItnetParams, MixingLayer, itnet_forward, itnet_oracle, mixing_stages
from .metrics import ScoredPredictions, auprc_macro_ovr, auroc, confusion_matrix, threshold_metrics
from .model import (
    ModelConfig,
    init_params,
    itgpt_forward,
    itgpt_oracle,
    make_anchor,
    predict_labels,
    predict_next_inputs,
)
from .objectives import LossConfig, loss_terms
from .time_encoding import PeConfig, encode_timeline, translation_kernel
from .train import TrainConfig, loss_and_grad, observation_loss, train

CHECK_KINDS = ("grad", "oracle", "causality", "pe", "metrics", "schemes")
LABEL_HEAD_PREFIX = "head.label."


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} vs threshold {self.threshold:.1e}{extra}"


# --- random toy instances ----------------------------------------------------


def random_times(rng: np.random.Generator, n: int, lo: float = 0.0, hi: float = 10.0) -> np.ndarray:
    """``n`` sorted distinct times in ``[lo, hi)``."""
    t = np.unique(rng.uniform(lo, hi, size=n))
    while t.size < n:
        t = np.unique(np.r_[t, rng.uniform(lo, hi, size=n - t.size)])
    return t


def random_observation(
    rng: np.random.Generator,
    dims: tuple[int, ...],
    n_classes: int = 2,
    max_len: int = 16,
    horizon: float = 10.0,
    with_target: bool = True,
    target_start: float = 0.0,
) -> Observation:
    """Modalities sampled on ``[0, horizon)``, targets on ``[target_start, horizon)``."""
    mods = []
    for m, d in enumerate(dims):
        n = int(rng.integers(1, max_len + 1))
        mods.append(ModalitySeries(f"m{m}", random_times(rng, n, 0.0, horizon), rng.standard_normal((n, d))))
    target = None
    if with_target:
        n = int(rng.integers(1, max_len + 1))
        target = Target(random_times(rng, n, target_start, horizon), rng.integers(0, n_classes, size=n))
    return Observation("toy", mods, target)


def random_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.5) -> dict[str, np.ndarray]:
    """Dense random weights of the model's shapes (no identity or zero starts)."""
    base = init_params(cfg, int(rng.integers(2**31)))
    return {k: rng.standard_normal(v.shape) * scale for k, v in base.items()}


def _random_attention(rng, d_in, d_k, d_o, query_map):
    return AttentionParams(
        rng.standard_normal((d_in, d_k)) * 0.5,
        rng.standard_normal((d_in, d_o)) * 0.5,
        rng.standard_normal((d_k, d_k)) * 0.5 if query_map else None,
    )


def _random_itnet(rng, dims, d_k, d_o, d_a, kind, query_map):
    per = [_random_attention(rng, d, d_k, d_o, query_map) for d in dims]
    width = len(dims) * d_o
    weights, biases = [], []
    for j in range(mixing_stages(kind)):
        out = d_a
        weights.append(rng.standard_normal((width, out)) * 0.5)
        biases.append(rng.standard_normal(out) * 0.5)
        width = out
    return ItnetParams(per, MixingLayer(kind, weights, biases, 0.0))


# --- gradient check ----------------------------------------------------------


def full_loss(obs: Observation, params, cfg: ModelConfig) -> ad.Node:
    """CE plus next-step MSE through every parameter of the model (eval mode)."""
    return observation_loss(obs, params, cfg, use_ce=True, use_mse=True).total


def grad_suite(
    seeds: int = 5,
    n_coords: int = 200,
    max_depth: int = 3,
    d_k: int = 8,
    d_a: int = 8,
    max_len: int = 16,
    dims: tuple[int, ...] = (2, 3),
    tol: float = 1e-4,
    seed: int = 0,
) -> CheckResult:
    """Finite-difference check of the full loss; depth cycles through ``1..max_depth``."""
    worst, worst_seed = 0.0, None
    for s in range(seeds):
        rng = np.random.default_rng([seed, s])
        cfg = ModelConfig(
            modality_dims=dims,
            n_classes=2,
            d_k=d_k,
            d_a=d_a,
            depth=1 + s % max_depth,
            mixing=MIXING_KINDS[s % len(MIXING_KINDS)],
            anchor_length=int(rng.integers(4, 12)),
            lam=100.0,
            query_map=True,
        )
        obs = random_observation(rng, dims, max_len=max_len, target_start=2.0)
        params = random_params(cfg, rng)
        err = ad.grad_check(lambda p: full_loss(obs, p, cfg), params, n_coords=n_coords, seed=s)
        if err >= worst:
            worst, worst_seed = err, s
    return CheckResult(
        "grad", worst, tol, worst < tol, f"{seeds} seeds x {n_coords} coordinates, worst seed {worst_seed}"
    )


# --- oracle equivalence ------------------------------------------------------


def _max_abs(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return math.inf
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def oracle_instance(kind: str, rng: np.random.Generator) -> float:
    """Worst absolute deviation between the fast path and the scalar-loop oracle."""
    d_k = 2 * int(rng.integers(1, 4))
    d_o = 2 * int(rng.integers(1, 4))
    lam = float(rng.uniform(5.0, 200.0))
    pe_k, pe_v = PeConfig(d_k, lam), PeConfig(d_o, lam)
    query_map = bool(rng.integers(2))
    if kind == "attention":
        d_in = int(rng.integers(1, 5))
        n_q, n_kv = int(rng.integers(1, 9)), int(rng.integers(0, 9))
        q_t, k_t = random_times(rng, n_q), random_times(rng, n_kv)
        x = rng.standard_normal((n_kv, d_in))
        p = _random_attention(rng, d_in, d_k, d_o, query_map)
        ref = attention_oracle(q_t, k_t, x, p, pe_k, pe_v)
        worst = 0.0
        for fused in (True, False):
            out = causal_cross_attention(q_t, k_t, x, p, pe_k, pe_v, fused=fused)
            if not np.array_equal(out.coverage, ref[2]):
                return math.inf
            worst = max(worst, _max_abs(out.values.value, ref[0]), _max_abs(out.weights.value, ref[1]))
        return worst
    if kind == "itnet":
        dims = tuple(int(d) for d in rng.integers(1, 4, size=int(rng.integers(1, 4))))
        d_a = int(rng.integers(1, 7))
        mix = MIXING_KINDS[int(rng.integers(len(MIXING_KINDS)))]
        p = _random_itnet(rng, dims, d_k, d_o, d_a, mix, query_map)
        mods = [(random_times(rng, int(rng.integers(0, 8))), None) for _ in dims]
        mods = [(t, rng.standard_normal((t.size, d))) for (t, _), d in zip(mods, dims)]
        out_t = random_times(rng, int(rng.integers(1, 8)))
        fast = itnet_forward(mods, out_t, p, pe_k, pe_v, training=False, rng=None)
        return _max_abs(fast.value, itnet_oracle(mods, out_t, p, pe_k, pe_v))
    if kind == "itgpt":
        dims = tuple(int(d) for d in rng.integers(1, 4, size=int(rng.integers(1, 3))))
        cfg = ModelConfig(
            modality_dims=dims,
            n_classes=int(rng.integers(2, 4)),
            d_k=d_k,
            d_o=d_o,
            d_a=int(rng.integers(1, 7)),
            depth=int(rng.integers(1, 3)),
            mixing=MIXING_KINDS[int(rng.integers(len(MIXING_KINDS)))],
            anchor_length=int(rng.integers(2, 8)),
            lam=lam,
            query_map=query_map,
        )
        obs = random_observation(rng, dims, cfg.n_classes, max_len=6)
        params = random_params(cfg, rng)
        anchor = make_anchor(obs, cfg.anchor_length, cfg.d_a)
        ref = itgpt_oracle(obs, anchor, params, cfg)
        fwd = itgpt_forward(obs, anchor, params, cfg)
        worst = _max_abs(fwd.anchor_state.value, ref["anchor_state"])
        for e, r in zip(fwd.embeddings, ref["embeddings"]):
            worst = max(worst, _max_abs(e.value, r))
        for e, r in zip(predict_next_inputs(fwd.embeddings, params), ref["next_inputs"]):
            worst = max(worst, _max_abs(e.value, r))
        logits, _ = predict_labels(fwd.anchor_state, anchor.times, obs.target.times, params, cfg)
        return max(worst, _max_abs(logits.value, ref["logits"]))
    raise ValueError(f"unknown oracle kind {kind!r}")


def oracle_suite(n_instances: int = 1000, tol: float = 1e-8, seed: int = 0) -> CheckResult:
    kinds = ("attention", "itnet", "itgpt")
    worst = {k: 0.0 for k in kinds}
    for i in range(n_instances):
        kind = kinds[i % len(kinds)]
        worst[kind] = max(worst[kind], oracle_instance(kind, np.random.default_rng([seed, i])))
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("oracle", top, tol, top < tol, f"{n_instances} instances; {detail}")


# --- causality ---------------------------------------------------------------


def _outputs(obs: Observation, params, cfg: ModelConfig):
    anchor = make_anchor(obs, cfg.anchor_length, cfg.d_a)
    fwd = itgpt_forward(obs, anchor, params, cfg)
    logits, _ = predict_labels(fwd.anchor_state, anchor.times, obs.target.times, params, cfg)
    preds = predict_next_inputs(fwd.embeddings, params)
    out = [(anchor.times, fwd.anchor_state.value), (obs.target.times, logits.value)]
    out += [(m.times, e.value) for m, e in zip(obs.modalities, fwd.embeddings)]
    out += [(m.times, p.value) for m, p in zip(obs.modalities, preds)]
    return out


def perturb_after(obs: Observation, cut: float, rng: np.random.Generator) -> Observation:
    """Replace every modality value at times ``>= cut``; timestamps are kept."""
    mods = []
    for m in obs.modalities:
        values = m.values.copy()
        late = m.times >= cut
        values[late] = rng.standard_normal((int(late.sum()), m.dim)) * 10.0
        mods.append(ModalitySeries(m.name, m.times, values))
    return Observation(obs.id, mods, obs.target)


def causality_suite(n_obs: int = 100, n_cuts: int = 20, depth: int = 2, seed: int = 0) -> CheckResult:
    """Outputs at times before a cut must be bitwise unchanged by perturbing data after it."""
    dims = (2, 1, 3)
    worst = 0.0
    checked = changed_late = 0
    for i in range(n_obs):
        rng = np.random.default_rng([seed, i])
        cfg = ModelConfig(
            modality_dims=dims, n_classes=2, d_k=8, d_a=8, depth=depth,
            mixing=MIXING_KINDS[i % len(MIXING_KINDS)], anchor_length=16, lam=100.0, query_map=True,
        )
        obs = random_observation(rng, dims, max_len=16)
        params = random_params(cfg, rng)
        base = _outputs(obs, params, cfg)
        lo, hi = obs.span()
        for cut in rng.uniform(lo, hi, size=n_cuts):
            pert = _outputs(perturb_after(obs, cut, rng), params, cfg)
            for (times, a), (_, b) in zip(base, pert):
                early = times < cut
                if early.any():
                    checked += int(early.sum())
                    if not np.array_equal(a[early], b[early]):
                        worst = max(worst, float(np.max(np.abs(a[early] - b[early]))), math.ulp(0.0))
                if (~early).any() and not np.array_equal(a[~early], b[~early]):
                    changed_late += 1
    detail = f"{checked} early rows compared, {changed_late} late blocks changed"
    return CheckResult("causality", worst, 0.0, worst == 0.0, detail)


# --- positional encoding -----------------------------------------------------


def pe_suite(n_pairs: int = 10_000, dims=(8, 32, 64), horizon: float = 1000.0, tol: float = 1e-9, seed: int = 0):
    worst = 0.0
    for dim in dims:
        rng = np.random.default_rng([seed, dim])
        cfg = PeConfig(dim, 10.0 * horizon)
        t = rng.uniform(-horizon, horizon, size=n_pairs)
        u = rng.uniform(-horizon, horizon, size=n_pairs)
        order_t, order_u = np.argsort(t), np.argsort(u)
        p_t = np.empty((n_pairs, dim))
        p_u = np.empty((n_pairs, dim))
        p_t[order_t] = encode_timeline(t[order_t], cfg)
        p_u[order_u] = encode_timeline(u[order_u], cfg)
        err = np.abs(np.einsum("ij,ij->i", p_t, p_u) - translation_kernel(t - u, cfg))
        worst = max(worst, float(err.max()))
    return CheckResult("pe", worst, tol, worst < tol, f"{n_pairs} pairs per dim {tuple(dims)}")


# --- brute-force metric oracles ----------------------------------------------


def auroc_bruteforce(scores, positives) -> float:
    """Pairwise count over every (positive, negative) pair; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    sp, sn = scores[pos], scores[~pos]
    greater = int(np.sum(sp[:, None] > sn[None, :]))
    ties = int(np.sum(sp[:, None] == sn[None, :]))
    return float(Fraction(2 * greater + ties, 2 * sp.size * sn.size))


def ap_bruteforce_exact(scores, positives) -> Fraction | None:
    """Enumerate every distinct threshold from the top; precision times recall gain."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return None
    total = Fraction(0)
    prev_recall = Fraction(0)
    for thr in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= thr
        tp = int(np.sum(predicted & pos))
        fp = int(np.sum(predicted & ~pos))
        recall = Fraction(tp, n_pos)
        total += (recall - prev_recall) * Fraction(tp, tp + fp)
        prev_recall = recall
    return total


def auprc_macro_bruteforce(scores, truths) -> float | None:
    scores = np.asarray(scores)
    vals = [ap_bruteforce_exact(scores[:, c], truths == c) for c in range(scores.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(sum(vals, Fraction(0)) / len(vals)) if vals else None


def rates_bruteforce(scores, truths, positive_class: int, threshold: float):
    tp = fn = fp = tn = 0
    for s, y in zip(np.asarray(scores)[:, positive_class], truths):
        if y == positive_class:
            tp, fn = (tp + 1, fn) if s >= threshold else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if s >= threshold else (fp, tn + 1)

    def ratio(a, b):
        return None if b == 0 else float(Fraction(a, b))

    return ratio(tp, tp + fn), ratio(tn, tn + fp), ratio(2 * tp, 2 * tp + fp + fn), (tp, fn, fp, tn)


def confusion_bruteforce(scores, truths, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for row, y in zip(np.asarray(scores), truths):
        best = 0
        for c in range(1, n_classes):
            if row[c] > row[best]:
                best = c
        out[y, best] += 1
    return out


def random_predictions(rng: np.random.Generator, max_n: int = 300) -> ScoredPredictions:
    n = int(rng.integers(1, max_n + 1))
    k = int(rng.integers(2, 5))
    scores = rng.random((n, k))
    if rng.random() < 0.5:  # coarse scores force ties
        scores = np.round(scores * int(rng.integers(2, 10))) / 10.0
    truths = rng.integers(0, k, size=n)
    exclude = rng.random(n) < 0.1 if rng.random() < 0.3 else None
    return ScoredPredictions(scores, truths, exclude)


def metric_instance_mismatches(preds: ScoredPredictions, threshold: float = 0.5) -> list[str]:
    """Names of metrics that differ (not bitwise equal) from the brute-force oracles."""
    scores, truths = preds.included()
    bad = []
    if auprc_macro_ovr(preds).macro != auprc_macro_bruteforce(scores, truths):
        bad.append("auprc")
    if not np.array_equal(confusion_matrix(preds), confusion_bruteforce(scores, truths, preds.n_classes)):
        bad.append("confusion")
    for c in range(preds.n_classes):
        pos = truths == c
        if pos.any() and (~pos).any() and auroc(preds, c) != auroc_bruteforce(scores[:, c], pos):
            bad.append(f"auroc[{c}]")
        th = threshold_metrics(preds, c, threshold)
        rec, spec, f1, counts = rates_bruteforce(scores, truths, c, threshold)
        if (th.recall, th.specificity, th.f1) != (rec, spec, f1):
            bad.append(f"rates[{c}]")
        if th.confusion.reshape(-1).tolist() != list(counts):
            bad.append(f"counts[{c}]")
    return bad


def metrics_suite(n_instances: int = 500, max_n: int = 300, seed: int = 0) -> CheckResult:
    failures = []
    for i in range(n_instances):
        bad = metric_instance_mismatches(random_predictions(np.random.default_rng([seed, i]), max_n))
        if bad:
            failures.append(f"#{i}:{'/'.join(bad)}")
    detail = f"{n_instances} instances" + (f"; mismatches {failures[:5]}" if failures else "")
    return CheckResult("metrics", float(len(failures)), 0.0, not failures, detail)


# --- loss-scheme semantics ---------------------------------------------------


def tiny_dataset(n: int = 12, seed: int = 0, dims=(2, 1)) -> Dataset:
    rng = np.random.default_rng(seed)
    obs = []
    for i in range(n):
        o = random_observation(rng, dims, max_len=10, target_start=2.0)
        obs.append(Observation(f"obs{i:04d}", o.modalities, o.target))
    return Dataset(Schema(tuple(f"m{m}" for m in range(len(dims))), dims, 2), obs)


def _label_head(params):
    return {k: v.copy() for k, v in params.items() if k.startswith(LABEL_HEAD_PREFIX)}


def gpt_head_frozen(seed: int = 0) -> tuple[bool, bool]:
    """(label head bitwise unchanged through epochs 1-2, label head moved in epoch 3)."""
    ds = tiny_dataset(seed=seed)
    cfg = TrainConfig(d_k=8, d_a=8, anchor_length=8, batch_size=4, scheme="GPT_then_CE", seed=seed)
    snaps = {}

    def record(epoch, params):
        snaps[epoch] = _label_head(params)

    mcfg = cfg.model_config(ds)
    init = _label_head(init_params(mcfg, cfg.seed))
    train(ds, cfg, on_epoch=record)
    frozen = all(np.array_equal(init[k], snaps[e][k]) for e in (1, 2) for k in init)
    moved = any(not np.array_equal(init[k], snaps[3][k]) for k in init)
    return frozen, moved


def ssl_head_grads_zero(seed: int = 0) -> tuple[bool, bool]:
    """(label head gradients identically zero with no labels, other gradients nonzero)."""
    ds = tiny_dataset(seed=seed)
    cfg = TrainConfig(d_k=8, d_a=8, anchor_length=8, scheme="CE+SSL", seed=seed)
    mcfg = cfg.model_config(ds)
    params = init_params(mcfg, seed)
    loss_cfg = LossConfig("CE_SSL", labeled=frozenset())
    head_zero, other_nonzero = True, False
    for i, obs in enumerate(ds.observations):
        use_ce, use_mse = loss_terms("CE_SSL", 1, i, loss_cfg)
        _, grads = loss_and_grad(obs, params, mcfg, use_ce, use_mse)
        for k, g in grads.items():
            if k.startswith(LABEL_HEAD_PREFIX):
                head_zero &= not np.any(g)
            elif np.any(g):
                other_nonzero = True
    return head_zero, other_nonzero


def schemes_suite(seeds: int = 3) -> CheckResult:
    bad = []
    for s in range(seeds):
        frozen, moved = gpt_head_frozen(s)
        zero, other = ssl_head_grads_zero(s)
        if not (frozen and moved):
            bad.append(f"seed {s} GPT->CE frozen={frozen} moved={moved}")
        if not (zero and other):
            bad.append(f"seed {s} CE+SSL head_zero={zero} others_nonzero={other}")
    return CheckResult("schemes", float(len(bad)), 0.0, not bad, "; ".join(bad) or f"{seeds} seeds")


def run_check(kind: str, seed: int = 0, **size) -> CheckResult:
    suites = {
        "grad": grad_suite,
        "oracle": oracle_suite,
        "causality": causality_suite,
        "pe": pe_suite,
        "metrics": metrics_suite,
        "schemes": schemes_suite,
    }
    if kind not in suites:
        raise ValueError(f"unknown check {kind!r}; choose from {', '.join(CHECK_KINDS)}")
    if kind == "schemes":
        return schemes_suite(**size)
    return suites[kind](seed=seed, **size)
