"""Sinusoidal encoding of continuous timestamps."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class PeConfig:
    dim: int
    lam: float

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"encoding dimension must be even and positive, got {self.dim}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    @property
    def frequencies(self) -> np.ndarray:
        """omega_i = lam ** (-2 i / dim) for i = 1 .. dim/2."""
        i = np.arange(1, self.dim // 2 + 1, dtype=np.float64)
        return self.lam ** (-2.0 * i / self.dim)


def encode_time(t: float, cfg: PeConfig) -> np.ndarray:
    """Interleaved ``[sin(w_1 t), cos(w_1 t), sin(w_2 t), ...]``."""
    phase = cfg.frequencies * float(t)
    out = np.empty(cfg.dim)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out


def encode_timeline(tau, cfg: PeConfig) -> np.ndarray:
    """Row ``i`` is ``encode_time(tau[i])``. The result is cached and read-only."""
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    if tau.ndim != 1:
        raise ValueError(f"timeline must be one-dimensional, got shape {tau.shape}")
    return _encode_cached(tau.tobytes(), cfg)


@lru_cache(maxsize=8192)
def _encode_cached(raw: bytes, cfg: PeConfig) -> np.ndarray:
    tau = np.frombuffer(raw, dtype=np.float64)
    if tau.size > 1 and np.any(tau[1:] < tau[:-1]):
        raise ValueError("timeline is not sorted ascending")
    phase = np.outer(tau, cfg.frequencies)
    out = np.empty((tau.size, cfg.dim))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    out.flags.writeable = False
    return out


def translation_kernel(dt, cfg: PeConfig) -> np.ndarray:
    """``sum_i cos(w_i dt)``: the value of ``p(t) . p(t - dt)`` for any ``t``."""
    dt = np.asarray(dt, dtype=np.float64)
    return np.cos(np.multiply.outer(dt, cfg.frequencies)).sum(axis=-1)


def default_lambda(max_timestamp: float, scale: float = 10.0) -> float:
    """Wavelength scale chosen as ``scale`` times the largest absolute timestamp."""
    span = abs(float(max_timestamp))
    return scale * span if span > 0 else scale
