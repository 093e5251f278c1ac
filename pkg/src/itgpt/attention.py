"""Strictly-causal single-head cross-attention with additive time encoding.

For a query at time ``t`` only keys with timestamp ``t' < t`` receive weight.
Queries with no strictly-past key produce a zero row and are flagged as
uncovered.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, fields
from typing import Any, Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .time_encoding import PeConfig, encode_time, encode_timeline

ORACLE_MAX_PAIRS = 10_000


@dataclass
class AttentionParams:
    """Key/value projections; ``w_query`` is an optional square map on the query encoding.

    Entries may be numpy arrays or tape nodes.
    """

    w_key: Any
    w_value: Any
    w_query: Any = None

    @classmethod
    def from_mapping(cls, params: Mapping[str, Any], prefix: str) -> "AttentionParams":
        return cls(
            w_key=params[f"{prefix}.w_key"],
            w_value=params[f"{prefix}.w_value"],
            w_query=params.get(f"{prefix}.w_query"),
        )

    def numpy(self) -> "AttentionParams":
        def arr(x):
            return None if x is None else np.asarray(x.value if isinstance(x, ad.Node) else x)

        return AttentionParams(*(arr(getattr(self, f.name)) for f in fields(self)))


class AttentionOutput(NamedTuple):
    values: ad.Node
    weights: ad.Node
    coverage: np.ndarray


def causal_mask(query_times, key_times) -> np.ndarray:
    """``mask[i, j]`` is true iff ``key_times[j] < query_times[i]`` (cached, read-only)."""
    q = np.ascontiguousarray(query_times, dtype=np.float64)
    k = np.ascontiguousarray(key_times, dtype=np.float64)
    return _mask_cached(q.tobytes(), k.tobytes())


@lru_cache(maxsize=8192)
def _mask_cached(q_raw: bytes, k_raw: bytes) -> np.ndarray:
    q = np.frombuffer(q_raw, dtype=np.float64)
    k = np.frombuffer(k_raw, dtype=np.float64)
    mask = k[None, :] < q[:, None]
    mask.flags.writeable = False
    return mask


def _check_sorted(times, name):
    times = np.ascontiguousarray(times, dtype=np.float64)
    if times.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if times.size > 1 and not _is_sorted(times.tobytes()):
        raise ValueError(f"{name} is not sorted ascending")
    return times


@lru_cache(maxsize=8192)
def _is_sorted(raw: bytes) -> bool:
    t = np.frombuffer(raw, dtype=np.float64)
    return bool(np.all(t[1:] >= t[:-1]))


def causal_cross_attention(
    query_times,
    key_times,
    key_data,
    params: AttentionParams,
    pe_key: PeConfig,
    pe_value: PeConfig,
    fused: bool = True,
) -> AttentionOutput:
    """Attend from ``query_times`` to strictly earlier rows of ``key_data``.

    Keys are ``x W_K + p(t')``, values ``x W_V + p(t')`` (encoded at the value
    width) and queries ``p(t)``, optionally times ``w_query``. Scores are
    scaled by ``1/sqrt(d_k)`` and normalized with a max-shifted softmax over
    the strictly-past keys. ``fused=False`` builds the same graph from
    elementary tape ops; the fused op carries a hand-written backward and
    exposes ``weights`` as a constant.
    """
    query_times = _check_sorted(query_times, "query_times")
    key_times = _check_sorted(key_times, "key_times")
    key_data = ad.constant(key_data)
    n_q, n_kv = query_times.size, key_times.size
    if key_data.value.ndim != 2 or key_data.value.shape[0] != n_kv:
        raise ad.ShapeError(f"key_data has shape {key_data.value.shape}, expected ({n_kv}, d_in)")
    d_k, d_o = pe_key.dim, pe_value.dim
    if n_kv == 0:
        weights = ad.constant(np.zeros((n_q, 0)))
        return AttentionOutput(ad.constant(np.zeros((n_q, d_o))), weights, np.zeros(n_q, dtype=bool))

    q_pe = encode_timeline(query_times, pe_key)
    k_pe = encode_timeline(key_times, pe_key)
    v_pe = encode_timeline(key_times, pe_value)
    mask = causal_mask(query_times, key_times)
    coverage = mask.any(axis=1)
    scale = 1.0 / math.sqrt(d_k)
    if not fused:
        queries = q_pe if params.w_query is None else ad.matmul(q_pe, params.w_query)
        keys = ad.matmul(key_data, params.w_key) + k_pe
        values = ad.matmul(key_data, params.w_value) + v_pe
        scores = ad.matmul(queries, ad.transpose(keys)) * scale
        weights = ad.masked_softmax(scores, mask)
        return AttentionOutput(ad.matmul(weights, values), weights, coverage)

    w_key, w_value = ad.constant(params.w_key), ad.constant(params.w_value)
    w_query = None if params.w_query is None else ad.constant(params.w_query)
    x, wk, wv = key_data.value, w_key.value, w_value.value
    if wk.shape != (x.shape[1], d_k) or wv.shape != (x.shape[1], d_o):
        raise ad.ShapeError(
            f"projection shapes {wk.shape}, {wv.shape} do not fit input width {x.shape[1]} and d_k={d_k}, d_o={d_o}"
        )
    q = q_pe if w_query is None else q_pe @ w_query.value
    k = x @ wk + k_pe
    v = x @ wv + v_pe
    a = ad.masked_softmax_values((q @ k.T) * scale, mask)
    out = a @ v

    def backward(g):
        d_a = g @ v.T
        d_v = a.T @ g
        d_s = a * (d_a - (d_a * a).sum(axis=1, keepdims=True)) * scale
        d_k_ = d_s.T @ q
        grads = [d_k_ @ wk.T + d_v @ wv.T, x.T @ d_k_, x.T @ d_v]
        if w_query is not None:
            grads.append(q_pe.T @ (d_s @ k))
        return grads

    parents = [key_data, w_key, w_value] + ([] if w_query is None else [w_query])
    return AttentionOutput(ad.custom(out, parents, backward), ad.constant(a), coverage)


def attention_oracle(
    query_times,
    key_times,
    key_data,
    params: AttentionParams,
    pe_key: PeConfig,
    pe_value: PeConfig,
):
    """Literal scalar-loop evaluation; returns ``(values, weights, coverage)`` as arrays."""
    query_times = [float(t) for t in query_times]
    key_times = [float(t) for t in key_times]
    n_q, n_kv = len(query_times), len(key_times)
    if n_q * n_kv > ORACLE_MAX_PAIRS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_PAIRS} query/key pairs, got {n_q * n_kv}")
    p = params.numpy()
    x = np.asarray(key_data.value if isinstance(key_data, ad.Node) else key_data, dtype=np.float64)
    d_in = x.shape[1] if n_kv else 0
    d_k, d_o = pe_key.dim, pe_value.dim

    keys, values = [], []
    for j in range(n_kv):
        pk = encode_time(key_times[j], pe_key)
        pv = encode_time(key_times[j], pe_value)
        k = [sum(x[j, a] * p.w_key[a, c] for a in range(d_in)) + pk[c] for c in range(d_k)]
        v = [sum(x[j, a] * p.w_value[a, c] for a in range(d_in)) + pv[c] for c in range(d_o)]
        keys.append(k)
        values.append(v)

    out = np.zeros((n_q, d_o))
    weights = np.zeros((n_q, n_kv))
    coverage = np.zeros(n_q, dtype=bool)
    for i, t in enumerate(query_times):
        q = encode_time(t, pe_key)
        if p.w_query is not None:
            q = [sum(q[a] * p.w_query[a, c] for a in range(d_k)) for c in range(d_k)]
        sims = []
        for j in range(n_kv):
            if key_times[j] < t:
                dot = sum(q[c] * keys[j][c] for c in range(d_k))
                sims.append(math.exp(dot / math.sqrt(d_k)))
            else:
                sims.append(0.0)
        total = sum(sims)
        if total == 0.0:
            continue
        coverage[i] = True
        for j in range(n_kv):
            weights[i, j] = sims[j] / total
            for c in range(d_o):
                out[i, c] += weights[i, j] * values[j][c]
    return out, weights, coverage
