"""Encoder/decoder chain around a residual anchor state, plus prediction heads.

Parameter paths (``m`` indexes modalities in schema order, ``l`` layers)::

    layers.{l}.encoder.attn.{m}.w_key / w_value [/ w_query]
    layers.{l}.encoder.mix.{j}.weight / bias
    layers.{l}.decoder.attn.{m}.w_key / w_value [/ w_query]
    layers.{l}.decoder.out.{m}.weight / bias        d_o -> d_m
    head.label.attn.w_key / w_value [/ w_query]
    head.label.out.weight / bias                      d_o -> d_c
    head.ssl.{m}.weight / bias                        d_m -> d_m
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attention_oracle, causal_cross_attention
from .data import Observation
from .itnet import MIXING_KINDS, ItnetParams, MixingLayer, dropout, itnet_forward, itnet_oracle, mixing_stages
from .time_encoding import PeConfig


@dataclass(frozen=True)
class ModelConfig:
    modality_dims: tuple[int, ...]
    n_classes: int
    d_k: int = 32
    d_o: int | None = None
    d_a: int = 64
    depth: int = 2
    mixing: str = "Linear"
    dropout: float = 0.0
    anchor_length: int = 64
    lam: float = 1000.0
    query_map: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        if self.d_o is None:
            object.__setattr__(self, "d_o", self.d_k)
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.mixing not in MIXING_KINDS:
            raise ValueError(f"unknown mixing kind {self.mixing!r}")
        if self.anchor_length < 1:
            raise ValueError("anchor_length must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        # validates evenness of d_k / d_o
        PeConfig(self.d_k, self.lam)
        PeConfig(self.d_o, self.lam)

    @property
    def pe_key(self) -> PeConfig:
        return PeConfig(self.d_k, self.lam)

    @property
    def pe_value(self) -> PeConfig:
        return PeConfig(self.d_o, self.lam)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass(frozen=True)
class AnchorSpec:
    times: np.ndarray
    dim: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if times.size == 0:
            raise ValueError("anchor timeline is empty")
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise ValueError("anchor timeline is not sorted")
        object.__setattr__(self, "times", times)

    @property
    def length(self) -> int:
        return self.times.size


def make_anchor(obs: Observation, length: int, dim: int) -> AnchorSpec:
    """Uniform grid of ``length`` points over the observation's time span."""
    lo, hi = obs.span()
    return AnchorSpec(np.linspace(lo, hi, length), dim)


# --- parameters --------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _attn_shapes(prefix, d_in, cfg):
    out = {f"{prefix}.w_key": (d_in, cfg.d_k), f"{prefix}.w_value": (d_in, cfg.d_o)}
    if cfg.query_map:
        out[f"{prefix}.w_query"] = (cfg.d_k, cfg.d_k)
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    widths = [cfg.n_modalities * cfg.d_o] + [cfg.d_a] * (mixing_stages(cfg.mixing) - 1) + [cfg.d_a]
    for l in range(cfg.depth):
        for m, d_m in enumerate(cfg.modality_dims):
            shapes.update(_attn_shapes(f"layers.{l}.encoder.attn.{m}", d_m, cfg))
        for j in range(len(widths) - 1):
            shapes[f"layers.{l}.encoder.mix.{j}.weight"] = (widths[j], widths[j + 1])
            shapes[f"layers.{l}.encoder.mix.{j}.bias"] = (widths[j + 1],)
        for m, d_m in enumerate(cfg.modality_dims):
            shapes.update(_attn_shapes(f"layers.{l}.decoder.attn.{m}", cfg.d_a, cfg))
            shapes[f"layers.{l}.decoder.out.{m}.weight"] = (cfg.d_o, d_m)
            shapes[f"layers.{l}.decoder.out.{m}.bias"] = (d_m,)
    shapes.update(_attn_shapes("head.label.attn", cfg.d_a, cfg))
    shapes["head.label.out.weight"] = (cfg.d_o, cfg.n_classes)
    shapes["head.label.out.bias"] = (cfg.n_classes,)
    for m, d_m in enumerate(cfg.modality_dims):
        shapes[f"head.ssl.{m}.weight"] = (d_m, d_m)
        shapes[f"head.ssl.{m}.bias"] = (d_m,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Matrices uniform in +-1/sqrt(fan_in), biases zero; the query map starts at identity.

    The label output layer starts at zero, so class scores rank by learned
    signal only instead of by a random initial projection.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for path, shape in param_shapes(cfg).items():
        if path.endswith("bias") or path == "head.label.out.weight":
            params[path] = np.zeros(shape)
        elif path.endswith("w_query"):
            params[path] = np.eye(shape[0])
        else:
            params[path] = _uniform(rng, shape[0], shape)
    return params


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return sum(int(np.asarray(v).size) for v in params.values())


def encoder_params(params, l: int, cfg: ModelConfig) -> ItnetParams:
    return ItnetParams(
        [AttentionParams.from_mapping(params, f"layers.{l}.encoder.attn.{m}") for m in range(cfg.n_modalities)],
        MixingLayer.from_mapping(params, f"layers.{l}.encoder.mix", cfg.mixing, cfg.dropout),
    )


# --- forward -----------------------------------------------------------------


class ForwardResult(NamedTuple):
    anchor_state: ad.Node
    embeddings: list[ad.Node]
    coverage: list[np.ndarray]


def _check_anchor(obs: Observation, anchor: AnchorSpec) -> None:
    lo, hi = obs.span()
    if anchor.times[0] > hi or anchor.times[-1] < lo:
        raise ValueError(
            f"anchor span [{anchor.times[0]}, {anchor.times[-1]}] does not overlap observation span [{lo}, {hi}]"
        )


def itgpt_forward(
    obs: Observation,
    anchor: AnchorSpec,
    params: Mapping[str, Any],
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    decode_last: bool = True,
) -> ForwardResult:
    """Run ``cfg.depth`` encoder/decoder pairs.

    Per layer: the encoder attends from the anchor timeline to every
    modality, ``Z += dropout(relu(A))``, then each modality's decoder
    attends from its own timeline to ``Z`` and maps back to ``d_m``.
    With ``decode_last=False`` the final decoder is skipped (its outputs
    do not reach the label head) and ``embeddings`` is empty.
    """
    if cfg.depth < 1:
        raise ValueError("depth must be at least 1")
    if len(obs.modalities) != cfg.n_modalities:
        raise ValueError(f"observation has {len(obs.modalities)} modalities, model expects {cfg.n_modalities}")
    _check_anchor(obs, anchor)
    pe_k, pe_v = cfg.pe_key, cfg.pe_value
    embeddings: list[Any] = [m.values for m in obs.modalities]
    coverage: list[np.ndarray] = []
    z = None
    for l in range(cfg.depth):
        inputs = [(m.times, e) for m, e in zip(obs.modalities, embeddings)]
        a = itnet_forward(inputs, anchor.times, encoder_params(params, l, cfg), pe_k, pe_v, training, rng)
        update = ad.relu(a)
        if training:
            update = dropout(update, cfg.dropout, rng)
        z = update if z is None else z + update
        embeddings, coverage = [], []
        if l == cfg.depth - 1 and not decode_last:
            break
        for m, series in enumerate(obs.modalities):
            attn = AttentionParams.from_mapping(params, f"layers.{l}.decoder.attn.{m}")
            res = causal_cross_attention(series.times, anchor.times, z, attn, pe_k, pe_v)
            prefix = f"layers.{l}.decoder.out.{m}"
            embeddings.append(ad.linear(res.values, params[f"{prefix}.weight"], params[f"{prefix}.bias"]))
            coverage.append(res.coverage)
    return ForwardResult(z, embeddings, coverage)


def predict_labels(
    anchor_state,
    anchor_times,
    target_times,
    params: Mapping[str, Any],
    cfg: ModelConfig,
) -> tuple[ad.Node, np.ndarray]:
    """Logits at each target time from anchor points strictly before it.

    Uncovered rows (no earlier anchor point) are zero.
    """
    attn = AttentionParams.from_mapping(params, "head.label.attn")
    res = causal_cross_attention(target_times, anchor_times, anchor_state, attn, cfg.pe_key, cfg.pe_value)
    logits = ad.linear(res.values, params["head.label.out.weight"], params["head.label.out.bias"])
    logits = ad.mul(logits, res.coverage[:, None].astype(np.float64) * np.ones(logits.value.shape))
    return logits, res.coverage


def predict_next_inputs(embeddings: Sequence[Any], params: Mapping[str, Any]) -> list[ad.Node]:
    return [
        ad.linear(e, params[f"head.ssl.{m}.weight"], params[f"head.ssl.{m}.bias"])
        for m, e in enumerate(embeddings)
    ]


# --- oracle ------------------------------------------------------------------


def _affine_oracle(x, w, b):
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    return np.array(
        [[sum(x[i, a] * w[a, c] for a in range(w.shape[0])) + b[c] for c in range(w.shape[1])] for i in range(x.shape[0])]
    ).reshape(x.shape[0], w.shape[1])


def itgpt_oracle(obs: Observation, anchor: AnchorSpec, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> dict:
    """Hand-chained evaluation (eval mode) from scalar-loop attention and mixing."""
    pe_k, pe_v = cfg.pe_key, cfg.pe_value
    emb = [np.asarray(m.values) for m in obs.modalities]
    z = np.zeros((anchor.length, cfg.d_a))
    for l in range(cfg.depth):
        a = itnet_oracle([(m.times, e) for m, e in zip(obs.modalities, emb)], anchor.times,
                         encoder_params(params, l, cfg), pe_k, pe_v)
        z = z + np.array([[v if v > 0 else 0.0 for v in row] for row in a]).reshape(a.shape)
        new = []
        for m, series in enumerate(obs.modalities):
            attn = AttentionParams.from_mapping(params, f"layers.{l}.decoder.attn.{m}")
            vals = attention_oracle(series.times, anchor.times, z, attn, pe_k, pe_v)[0]
            p = f"layers.{l}.decoder.out.{m}"
            new.append(_affine_oracle(vals, params[f"{p}.weight"], params[f"{p}.bias"]))
        emb = new
    out = {"anchor_state": z, "embeddings": emb}
    out["next_inputs"] = [
        _affine_oracle(e, params[f"head.ssl.{m}.weight"], params[f"head.ssl.{m}.bias"]) for m, e in enumerate(emb)
    ]
    if obs.target is not None:
        attn = AttentionParams.from_mapping(params, "head.label.attn")
        vals, _, cov = attention_oracle(obs.target.times, anchor.times, z, attn, pe_k, pe_v)
        logits = _affine_oracle(vals, params["head.label.out.weight"], params["head.label.out.bias"])
        logits[~cov] = 0.0
        out["logits"] = logits
    return out


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"ITGPTCKP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> bytes:
    """Magic, u32 version, u64 header length, JSON header, little-endian float64 payload."""
    entries, chunks, offset = [], [], 0
    for path, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"path": path, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = json.dumps({"config": dict(config), "params": entries}, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def parse_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    payload = np.frombuffer(blob[20 + hlen:], dtype="<f8")
    params = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        params[e["path"]] = payload[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
    return params, header["config"]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return parse_checkpoint(Path(path).read_bytes())


def model_config_dict(cfg: ModelConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["modality_dims"] = list(cfg.modality_dims)
    return d
