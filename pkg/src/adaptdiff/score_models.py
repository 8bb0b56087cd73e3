"""Score models: an analytic Gaussian oracle and the trainable speaker-conditional network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .layers import TIME_FEATURES, batch_frames, batch_times, batch_vector, conv3_input, time_features, xavier
from .numerics import Tensor, as_tensor, concat, constants, global_norm, silu
from .sde import NoiseSchedule

__all__ = [
    "ScoreModel",
    "NullEmbeddingError",
    "oracle_score",
    "GaussianOracleScore",
    "null_embedding",
    "ConditionalScoreNet",
]

NULL = None  # pass as the condition to request the unconditional score


class ScoreModel(Protocol):
    def score(self, x_t: np.ndarray, t: float, condition: Optional[np.ndarray] = NULL) -> np.ndarray: ...


class NullEmbeddingError(ValueError):
    """The raw null vector collapsed to ~0 and must be re-initialised."""


def oracle_score(x_t, t: float, mean, std: float, schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Exact score of the time-t marginal of N(mean, std^2 I) data."""
    if t == 0 and std == 0:
        raise ValueError("degenerate: t=0 with zero data std")
    a = float(schedule.alpha(t))
    lam = float(schedule.lambda_t(t)) if t > 0 else 0.0
    return -(np.asarray(x_t, dtype=float) - a * np.asarray(mean, dtype=float)) / (a * a * std * std + lam)


@dataclass
class GaussianOracleScore:
    mean: np.ndarray
    std: float
    schedule: NoiseSchedule = NoiseSchedule()

    def score(self, x_t, t: float, condition=NULL) -> np.ndarray:
        return oracle_score(x_t, t, self.mean, self.std, self.schedule)


def null_embedding(w):
    """Unit-norm null condition w / |w|; accepts an array or a tracked tensor."""
    w = as_tensor(w)
    if np.linalg.norm(w.data) < 1e-12:
        raise NullEmbeddingError("null embedding vector has (near) zero norm")
    return w / global_norm(w)


@dataclass
class ConditionalScoreNet:
    """Frame-wise residual MLP with a kernel-3 temporal input layer.

    Conditioning vector per utterance is [time features, speaker embedding]; it is
    concatenated onto every frame and also projected into each residual block. The
    raw network output is divided by sqrt(lambda(t)) so targets stay O(1) inside
    the network while the returned quantity is the score itself.
    """

    channels: int
    embed_dim: int = 16
    hidden: int = 128
    depth: int = 4
    schedule: NoiseSchedule = NoiseSchedule()
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    prefix = "score."

    def init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        C, d, H, p = self.channels, self.embed_dim, self.hidden, self.prefix
        cond = TIME_FEATURES + d
        params = {
            p + "in_w": xavier(gen, 3 * C + cond, H),
            p + "in_b": np.zeros(H),
            p + "out_w": xavier(gen, H, C, gain=0.1),
            p + "out_b": np.zeros(C),
        }
        for i in range(self.depth):
            params[f"{p}blk{i}.w1"] = xavier(gen, H, H)
            params[f"{p}blk{i}.b1"] = np.zeros(H)
            params[f"{p}blk{i}.c"] = xavier(gen, cond, H)
            params[f"{p}blk{i}.w2"] = xavier(gen, H, H, gain=0.5)
            params[f"{p}blk{i}.b2"] = np.zeros(H)
        w = gen.standard_normal(d)
        params[p + "null_w"] = w
        self.params = params
        return params

    def null_embedding(self, params: Optional[dict] = None) -> np.ndarray:
        p = self.params if params is None else params
        return null_embedding(p[self.prefix + "null_w"]).data

    def condition(self, p: dict[str, Tensor], e: Optional[np.ndarray], null_mask: Optional[np.ndarray],
                  batch: int) -> Tensor:
        """(B, d) conditions; rows with ``null_mask`` (or all rows if ``e`` is None) use e_phi."""
        e_phi = null_embedding(p[self.prefix + "null_w"])
        if e is None:
            return e_phi.reshape(1, -1) * np.ones((batch, 1))
        e = batch_vector(e, batch, "embedding")
        if e.shape[1] != self.embed_dim:
            raise ValueError(f"embedding dim {e.shape[1]} != {self.embed_dim}")
        if null_mask is None or not np.any(null_mask):
            return Tensor(e)
        m = np.asarray(null_mask, dtype=np.float64)[:, None]
        return Tensor(e * (1.0 - m)) + e_phi.reshape(1, -1) * m

    def apply(self, p: dict[str, Tensor], x, t, e: Optional[np.ndarray] = NULL,
              null_mask: Optional[np.ndarray] = None) -> Tensor:
        """Differentiable forward pass; returns scores shaped (B, L, C)."""
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, L, C = x.shape
        if C != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {C}")
        tb = batch_times(t, B)
        cond = concat([Tensor(time_features(tb)), self.condition(p, e, null_mask, B)], axis=-1)  # (B, 8+d)
        pre = self.prefix
        feats = concat([conv3_input(x), cond.reshape(B, 1, -1) * np.ones((1, L, 1))], axis=-1)
        h = silu(feats @ p[pre + "in_w"] + p[pre + "in_b"])
        for i in range(self.depth):
            c = (cond @ p[f"{pre}blk{i}.c"]).reshape(B, 1, self.hidden)
            u = silu(h @ p[f"{pre}blk{i}.w1"] + p[f"{pre}blk{i}.b1"] + c)
            h = h + u @ p[f"{pre}blk{i}.w2"] + p[f"{pre}blk{i}.b2"]
        raw = h @ p[pre + "out_w"] + p[pre + "out_b"]
        inv_std = 1.0 / np.sqrt(self.schedule.lambda_t(tb))
        return raw * inv_std.reshape(B, 1, 1)

    def score(self, x_t, t, condition: Optional[np.ndarray] = NULL, params: Optional[dict] = None) -> np.ndarray:
        """Score for a condition embedding (or the null condition when ``condition`` is None)."""
        x = np.asarray(x_t, dtype=np.float64)
        xb = batch_frames(x)
        out = self.apply(constants(self.params if params is None else params), xb, t, condition).data
        return out.reshape(x.shape)

    def with_params(self, params: dict[str, np.ndarray]) -> "ConditionalScoreNet":
        return ConditionalScoreNet(self.channels, self.embed_dim, self.hidden, self.depth, self.schedule,
                                   dict(params))
