"""Speaker-dependent auxiliary models: noisy frame classifier, duration predictor, speaker encoders."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .layers import TIME_FEATURES, batch_frames, batch_times, batch_vector, conv3_input, time_features, xavier
from .numerics import (
    AdamState,
    Rng,
    Tape,
    Tensor,
    adam_step,
    as_tensor,
    concat,
    constants,
    gather_last,
    log_softmax,
    silu,
    sqrt,
    transpose,
    watch_all,
)
from .sde import NoiseSchedule, forward_marginal
from .toyworld import ToyWorld, Utterance

__all__ = [
    "PhonemeClassifier",
    "DurationPredictor",
    "OracleEncoder",
    "TrainedEncoder",
    "fit",
    "label_crops",
]


def fit(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[dict[str, Tensor], int], Tensor],
    iterations: int,
    lr: float,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Plain Adam loop over ``loss_fn(watched_params, iteration)``."""
    state = AdamState(lr=lr)
    losses = []
    names = list(params)
    for it in range(iterations):
        tape = Tape()
        with tape:
            p = watch_all(tape, params)
            loss = loss_fn(p, it)
        grads = tape.gradient(loss, [p[k] for k in names])
        params, state = adam_step(params, dict(zip(names, grads)), state)
        losses.append(float(loss.data))
    return params, losses


def label_crops(utterances: Sequence[Utterance], gen: np.random.Generator, size: int, crop: int):
    """Random fixed-length crops with their frame labels and speaker ids."""
    eligible = [u for u in utterances if len(u) >= crop]
    if not eligible:
        raise ValueError(f"no utterance has {crop} frames")
    xs, ys, spk = [], [], []
    for i in gen.integers(0, len(eligible), size):
        u = eligible[i]
        s = int(gen.integers(0, len(u) - crop + 1))
        xs.append(u.frames[s : s + crop])
        ys.append(u.frame_labels[s : s + crop])
        spk.append(u.speaker)
    return np.stack(xs), np.stack(ys), np.array(spk)


@dataclass
class PhonemeClassifier:
    """Two kernel-3 temporal layers over [frames, time features, speaker embedding] -> K logits per frame."""

    channels: int
    num_classes: int
    embed_dim: int = 16
    hidden: int = 64
    schedule: NoiseSchedule = NoiseSchedule()
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    prefix = "classifier."

    def init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        C, H, K, p = self.channels, self.hidden, self.num_classes, self.prefix
        cond = TIME_FEATURES + self.embed_dim
        self.params = {
            p + "in_w": xavier(gen, 3 * C + cond, H),
            p + "in_b": np.zeros(H),
            p + "mid_w": xavier(gen, 3 * H, H),
            p + "mid_c": xavier(gen, cond, H),
            p + "mid_b": np.zeros(H),
            # zero head: uniform predictions before training
            p + "out_w": np.zeros((H, K)),
            p + "out_b": np.zeros(K),
        }
        return self.params

    def apply(self, p: dict[str, Tensor], x, t, e) -> Tensor:
        """Per-frame log-probabilities, (B, L, K)."""
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, L, C = x.shape
        if L == 0:
            raise ValueError("empty input")
        tb = batch_times(t, B)
        e = batch_vector(e, B, "embedding")
        cond = np.concatenate([time_features(tb), e], axis=1)
        pre = self.prefix
        feats = concat([conv3_input(x), np.broadcast_to(cond[:, None, :], (B, L, cond.shape[1]))], axis=-1)
        h = silu(feats @ p[pre + "in_w"] + p[pre + "in_b"])
        c = (Tensor(cond) @ p[pre + "mid_c"]).reshape(B, 1, -1)
        h2 = silu(conv3_input(h) @ p[pre + "mid_w"] + p[pre + "mid_b"] + c)
        h = h + h2
        return log_softmax(h @ p[pre + "out_w"] + p[pre + "out_b"], axis=-1)

    def classify_frames(self, x_t, t, e) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64)
        out = self.apply(constants(self.params), batch_frames(x), t, e).data
        return out[0] if x.ndim == 2 else out

    def _check_labels(self, labels, L: int) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[-1] != L:
            raise ValueError(f"label length {labels.shape[-1]} != frame count {L}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("label id out of range")
        return labels

    def frame_logp_seq(self, x_t, t, e, labels) -> float:
        """Sum over frames of log p(label_i | x_t, t, e)."""
        x = batch_frames(x_t)
        labels = self._check_labels(labels, x.shape[1])
        lp = self.apply(constants(self.params), x, t, e).data
        return float(np.take_along_axis(lp, np.broadcast_to(labels, lp.shape[:2])[..., None], -1).sum())

    def frame_logp_grad(self, x_t, t, e, labels) -> tuple[float, np.ndarray]:
        """Value and input-gradient of :meth:`frame_logp_seq`; each call owns a private tape."""
        x_arr = np.asarray(x_t, dtype=np.float64)
        x = batch_frames(x_arr)
        labels = np.broadcast_to(self._check_labels(labels, x.shape[1]), x.shape[:2])
        tape = Tape()
        with tape:
            xt = tape.watch(x)
            lp = self.apply(constants(self.params), xt, t, e)
            total = gather_last(lp, labels).sum()
        (g,) = tape.gradient(total, [xt])
        return float(total.data), g.reshape(x_arr.shape)

    def train(self, utterances: Sequence[Utterance], embed: Callable[[int], np.ndarray], rng: Rng,
              iterations: int = 2000, batch: int = 16, crop: int = 24, lr: float = 1e-3,
              t_range: tuple[float, float] = (0.0, 1.0)) -> list[float]:
        """Cross-entropy on frames corrupted at t ~ U(t_range)."""
        g = rng.stream("classifier", "data")
        if not self.params:
            self.init_params(rng.stream("classifier", "init"))

        def loss_fn(p, it):
            x0, y, spk = label_crops(utterances, g, batch, crop)
            t = g.uniform(*t_range, batch)
            xt = forward_marginal(x0, t, g.standard_normal(x0.shape), self.schedule)
            e = np.stack([embed(s) for s in spk])
            lp = self.apply(p, xt, t, e)
            return gather_last(lp, y).sum() * (-1.0 / y.size)

        self.params, losses = fit(self.params, loss_fn, iterations, lr)
        return losses


@dataclass
class DurationPredictor:
    """Per-phoneme regressor of log duration from [one-hot phoneme, speaker embedding]."""

    num_classes: int
    embed_dim: int = 16
    hidden: int = 32
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    prefix = "duration."

    def init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        K, d, H, p = self.num_classes, self.embed_dim, self.hidden, self.prefix
        self.params = {
            p + "w1": xavier(gen, K + d, H),
            p + "b1": np.zeros(H),
            p + "w2": xavier(gen, H, H),
            p + "b2": np.zeros(H),
            p + "w3": xavier(gen, H, 1),
            p + "b3": np.zeros(1),
        }
        return self.params

    def _inputs(self, phonemes, e) -> np.ndarray:
        phonemes = np.asarray(phonemes, dtype=np.int64)
        if phonemes.size == 0:
            raise ValueError("empty phoneme sequence")
        if phonemes.min() < 0 or phonemes.max() >= self.num_classes:
            raise ValueError("unknown phoneme id")
        e = batch_vector(e, phonemes.size, "embedding")
        return np.concatenate([np.eye(self.num_classes)[phonemes], e], axis=1)

    def apply(self, p: dict[str, Tensor], inputs: np.ndarray) -> Tensor:
        pre = self.prefix
        h = silu(inputs @ p[pre + "w1"] + p[pre + "b1"])
        h = silu(h @ p[pre + "w2"] + p[pre + "b2"])
        return (h @ p[pre + "w3"] + p[pre + "b3"]).reshape(-1)

    def log_durations(self, phonemes, e) -> np.ndarray:
        return self.apply(constants(self.params), self._inputs(phonemes, e)).data

    def predict_durations(self, phonemes, e) -> np.ndarray:
        """Integer frame counts: round(exp(log-duration)), floored at one frame."""
        return np.maximum(1, np.round(np.exp(self.log_durations(phonemes, e)))).astype(np.int64)

    def train(self, utterances: Sequence[Utterance], embed: Callable[[int], np.ndarray], rng: Rng,
              iterations: int = 1500, batch: int = 64, lr: float = 3e-3) -> list[float]:
        """L2 on log durations over (phoneme, speaker) pairs drawn from the alignments."""
        if not self.params:
            self.init_params(rng.stream("duration", "init"))
        ph = np.concatenate([u.phonemes for u in utterances])
        logd = np.log(np.concatenate([u.durations for u in utterances]).astype(np.float64))
        emb = np.concatenate([np.repeat(embed(u.speaker)[None], len(u.phonemes), 0) for u in utterances])
        g = rng.stream("duration", "data")

        def loss_fn(p, it):
            idx = g.integers(0, ph.size, batch)
            r = self.apply(p, self._inputs(ph[idx], emb[idx])) - logd[idx]
            return (r * r).mean()

        self.params, losses = fit(self.params, loss_fn, iterations, lr)
        return losses


@dataclass
class OracleEncoder:
    """Exact embedding from the toy world's latent speaker parameters."""

    world: ToyWorld

    def encode_speaker(self, utterance) -> np.ndarray:
        sid = utterance.speaker if isinstance(utterance, Utterance) else int(utterance)
        return self.world.embedding(sid)

    __call__ = encode_speaker


@dataclass
class TrainedEncoder:
    """Frame MLP, mean+std pooling over time, linear projection, unit normalisation.

    Trained with a GE2E-style softmax loss over speaker centroids.
    """

    channels: int
    embed_dim: int = 16
    hidden: int = 64
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    prefix = "spkenc."

    def init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        C, H, d, p = self.channels, self.hidden, self.embed_dim, self.prefix
        self.params = {
            p + "w1": xavier(gen, C, H),
            p + "b1": np.zeros(H),
            p + "w2": xavier(gen, H, H),
            p + "b2": np.zeros(H),
            p + "proj": xavier(gen, 2 * H, d),
            p + "proj_b": np.zeros(d),
            p + "ge2e_w": np.array([10.0]),
            p + "ge2e_b": np.array([-5.0]),
        }
        return self.params

    def apply(self, p: dict[str, Tensor], x) -> Tensor:
        """(B, L, C) frames -> (B, d) unit embeddings."""
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[1] == 0:
            raise ValueError("empty utterance")
        pre = self.prefix
        h = silu(x @ p[pre + "w1"] + p[pre + "b1"])
        h = silu(h @ p[pre + "w2"] + p[pre + "b2"])
        mu = h.mean(axis=1)
        var = ((h - mu.reshape(mu.shape[0], 1, -1)) ** 2).mean(axis=1)
        z = concat([mu, sqrt(var + 1e-6)], axis=-1) @ p[pre + "proj"] + p[pre + "proj_b"]
        return z / sqrt((z * z).sum(axis=-1, keepdims=True))

    def encode_speaker(self, utterance) -> np.ndarray:
        frames = utterance.frames if isinstance(utterance, Utterance) else np.asarray(utterance, dtype=np.float64)
        if frames.shape[-2] == 0:
            raise ValueError("empty utterance")
        out = self.apply(constants(self.params), batch_frames(frames)).data
        return out[0] if frames.ndim == 2 else out

    __call__ = encode_speaker

    def ge2e_loss(self, p: dict[str, Tensor], x, n_speakers: int, per_speaker: int) -> Tensor:
        """Softmax GE2E loss; clips are grouped speaker-major.

        ``x`` is a (N*M, L, C) array or a list of (L_i, C) clips of mixed length.
        """
        N, M = n_speakers, per_speaker
        if isinstance(x, np.ndarray):
            e = self.apply(p, x)
        else:
            e = concat([self.apply(p, c) for c in x], axis=0)  # (N*M, d)
        d = e.shape[-1]
        sums = e.reshape(N, M, d).sum(axis=1)  # (N, d)
        cent = sums * (1.0 / M)
        own = (sums.reshape(N, 1, d) - e.reshape(N, M, d)) * (1.0 / (M - 1))  # exclusive centroids
        cent_n = cent / sqrt((cent * cent).sum(axis=-1, keepdims=True))
        own_n = own / sqrt((own * own).sum(axis=-1, keepdims=True))
        sim = e.reshape(N * M, d) @ transpose(cent_n)  # (N*M, N)
        own_sim = (e.reshape(N, M, d) * own_n).sum(axis=-1).reshape(N * M)
        mask = np.repeat(np.eye(N), M, axis=0)  # (N*M, N) own-speaker column
        sim = sim * (1.0 - mask) + own_sim.reshape(N * M, 1) * mask
        w = p[self.prefix + "ge2e_w"]
        b = p[self.prefix + "ge2e_b"]
        logits = sim * w + b
        lp = log_softmax(logits, axis=-1)
        target = np.repeat(np.arange(N), M)
        return gather_last(lp, target).sum() * (-1.0 / (N * M))

    def train(self, world: ToyWorld, rng: Rng, iterations: int = 1500, n_speakers: int = 8, per_speaker: int = 4,
              crop: tuple[int, int] = (10, 40), pool: int = 64, lr: float = 2e-3) -> list[float]:
        """Train on a pool of extra synthetic speakers disjoint from the world's own speakers.

        Every clip gets its own crop length from the inclusive ``crop`` range, so
        short and long clips of one speaker are pulled to the same centroid.
        """
        if not self.params:
            self.init_params(rng.stream("spkenc", "init"))
        speakers = world.extra_speakers(pool, "encoder-pool")
        g = rng.stream("spkenc", "data")
        lo, hi = crop

        def clip(spk):
            n = int(g.integers(lo, hi + 1))
            u = world.render(spk, world.random_phonemes(max(4, n // 2), g), g)
            while len(u) < n:
                u = world.render(spk, world.random_phonemes(n, g), g)
            s = int(g.integers(0, len(u) - n + 1))
            return u.frames[s : s + n]

        def loss_fn(p, it):
            chosen = g.choice(len(speakers), n_speakers, replace=False)
            clips = [clip(speakers[j]) for j in chosen for _ in range(per_speaker)]
            return self.ge2e_loss(p, clips, n_speakers, per_speaker)

        self.params, losses = fit(self.params, loss_fn, iterations, lr)
        # keep the similarity scale positive, as GE2E requires
        self.params[self.prefix + "ge2e_w"] = np.abs(self.params[self.prefix + "ge2e_w"])
        return losses
