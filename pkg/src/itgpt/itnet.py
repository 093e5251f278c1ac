"""Per-modality causal attentions onto a shared timeline, concatenated and mixed."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attention_oracle, causal_cross_attention
from .time_encoding import PeConfig

MIXING_KINDS = ("Linear", "MLP1", "MLP2")
_HIDDEN_LAYERS = {"Linear": 0, "MLP1": 1, "MLP2": 2}


@dataclass
class MixingLayer:
    """Affine map (``Linear``) or MLP with 1-2 ReLU hidden layers.

    ``weights``/``biases`` hold one entry per affine stage.
    """

    kind: str
    weights: list[Any]
    biases: list[Any]
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in MIXING_KINDS:
            raise ValueError(f"unknown mixing kind {self.kind!r}; expected one of {MIXING_KINDS}")
        if len(self.weights) != _HIDDEN_LAYERS[self.kind] + 1 or len(self.biases) != len(self.weights):
            raise ValueError(f"{self.kind} mixing needs {_HIDDEN_LAYERS[self.kind] + 1} affine stages")

    @property
    def in_width(self) -> int:
        return _value(self.weights[0]).shape[0]

    @classmethod
    def from_mapping(cls, params, prefix: str, kind: str, dropout_p: float = 0.0) -> "MixingLayer":
        n = _HIDDEN_LAYERS[kind] + 1
        return cls(
            kind,
            [params[f"{prefix}.{j}.weight"] for j in range(n)],
            [params[f"{prefix}.{j}.bias"] for j in range(n)],
            dropout_p,
        )


@dataclass
class ItnetParams:
    per_modality: list[AttentionParams]
    mixing: MixingLayer = field(default=None)


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x)


def mixing_stages(kind: str) -> int:
    return _HIDDEN_LAYERS[kind] + 1


def dropout(x: ad.Node, p: float, rng: np.random.Generator | None) -> ad.Node:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(x.value.shape) >= p) / (1.0 - p)
    return ad.mul(x, keep)


def mixing_apply(
    concat,
    layer: MixingLayer,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Node:
    concat = ad.constant(concat)
    width = concat.value.shape[1]
    if width != layer.in_width:
        raise ad.ShapeError(f"mixing input width {width} does not match layer width {layer.in_width}")
    h = concat
    last = len(layer.weights) - 1
    for j, (w, b) in enumerate(zip(layer.weights, layer.biases)):
        h = ad.linear(h, w, b)
        if j < last:
            h = ad.relu(h)
            if training:
                h = dropout(h, layer.dropout_p, rng)
    return h


def itnet_forward(
    modalities: Sequence[tuple[Any, Any]],
    out_times,
    params: ItnetParams,
    pe_key: PeConfig,
    pe_value: PeConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_coverage: bool = False,
):
    """Row ``t`` of the result is ``mixing([g_1(t), ..., g_M(t)])``.

    ``modalities`` is a sequence of ``(timestamps, data)`` pairs in schema order.
    """
    if len(modalities) != len(params.per_modality):
        raise ValueError(
            f"got {len(modalities)} modalities but parameters for {len(params.per_modality)}"
        )
    blocks, coverage = [], []
    for (times, data), attn in zip(modalities, params.per_modality):
        res = causal_cross_attention(out_times, times, data, attn, pe_key, pe_value)
        blocks.append(res.values)
        coverage.append(res.coverage)
    out = mixing_apply(ad.concat(blocks, axis=1), params.mixing, training, rng)
    if return_coverage:
        return out, np.stack(coverage, axis=1)
    return out


def mixing_oracle(concat: np.ndarray, layer: MixingLayer) -> np.ndarray:
    """Scalar-loop evaluation of :func:`mixing_apply` in eval mode."""
    h = [list(row) for row in np.asarray(concat, dtype=np.float64)]
    last = len(layer.weights) - 1
    for j, (w, b) in enumerate(zip(layer.weights, layer.biases)):
        w, b = _value(w), _value(b)
        h = [
            [sum(row[a] * w[a, c] for a in range(w.shape[0])) + b[c] for c in range(w.shape[1])]
            for row in h
        ]
        if j < last:
            h = [[v if v > 0.0 else 0.0 for v in row] for row in h]
    return np.array(h, dtype=np.float64).reshape(len(h), _value(layer.weights[-1]).shape[1])


def itnet_oracle(modalities, out_times, params: ItnetParams, pe_key: PeConfig, pe_value: PeConfig) -> np.ndarray:
    blocks = [
        attention_oracle(out_times, times, data, attn, pe_key, pe_value)[0]
        for (times, data), attn in zip(modalities, params.per_modality)
    ]
    concat = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(out_times), 0))
    return mixing_oracle(concat, params.mixing)
