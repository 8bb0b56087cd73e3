"""Shared building blocks for the small frame networks."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, as_tensor, concat, pad_time

TIME_FEATURES = 8


def xavier(gen: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, (fan_in, fan_out))


def time_features(t, n: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; returns (B, n) for scalar or (B,) input."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * 2.0 ** np.arange(n // 2)
    ang = t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def conv3_input(x) -> Tensor:
    """Stack each frame with its neighbours, zero-padded: (B, L, C) -> (B, L, 3C)."""
    x = as_tensor(x)
    L = x.shape[-2]
    padded = pad_time(x, 1, 1)
    return concat([padded[:, 0:L, :], padded[:, 1 : L + 1, :], padded[:, 2 : L + 2, :]], axis=-1)


def batch_frames(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (L, C) or (B, L, C) frames, got {x.shape}")
    return x


def batch_vector(v, batch: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return np.broadcast_to(v, (batch, v.shape[0]))
    if v.ndim != 2 or v.shape[0] != batch:
        raise ValueError(f"{name} must be (d,) or (B, d)")
    return v


def batch_times(t, batch: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.shape[0] == 1:
        t = np.full(batch, t[0])
    if t.shape != (batch,):
        raise ValueError("t must be a scalar or one value per batch entry")
    return t
