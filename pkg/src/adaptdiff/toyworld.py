"""Procedural stand-in for a multi-speaker speech corpus.

Each speaker applies a per-channel affine map to a shared set of phoneme
templates; an utterance is a sequence of phoneme spans whose frames are noisy
copies of the speaker-transformed template. Alignments are exact by
construction. Analytic Gaussian benchmarks live here too because they play the
same role: data with a known score.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .numerics import Rng
from .sde import NoiseSchedule

__all__ = [
    "ToySpeaker",
    "ToyPhonemeSet",
    "Utterance",
    "ToyWorld",
    "gen_world",
    "GaussianBenchmark",
    "GaussianMixtureBenchmark",
    "gaussian_benchmark",
    "GaussianSpeakerWorld",
    "two_speaker_gaussian_world",
]


@dataclass(frozen=True)
class ToySpeaker:
    id: int
    offset: np.ndarray
    scale: np.ndarray
    rate: float

    def transform(self, mu: np.ndarray) -> np.ndarray:
        return self.scale * mu + self.offset

    def latent(self) -> np.ndarray:
        return np.concatenate([self.offset, np.log(self.scale), [np.log(self.rate)]])


@dataclass(frozen=True)
class ToyPhonemeSet:
    templates: np.ndarray  # (K, C)
    durations: np.ndarray  # (K,) nominal frames

    @property
    def K(self) -> int:
        return self.templates.shape[0]

    @property
    def C(self) -> int:
        return self.templates.shape[1]


@dataclass
class Utterance:
    frames: np.ndarray  # (L, C)
    phonemes: np.ndarray  # (n,)
    spans: np.ndarray  # (n, 2) half-open [start, end)
    speaker: int

    @property
    def durations(self) -> np.ndarray:
        return self.spans[:, 1] - self.spans[:, 0]

    @property
    def frame_labels(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def validate(self, C: Optional[int] = None, K: Optional[int] = None) -> None:
        L = self.frames.shape[0]
        if self.frames.ndim != 2 or (C is not None and self.frames.shape[1] != C):
            raise ValueError("frames must be (L, C)")
        if len(self.phonemes) != len(self.spans) or len(self.phonemes) == 0:
            raise ValueError("phonemes and spans disagree")
        if K is not None and (self.phonemes.min() < 0 or self.phonemes.max() >= K):
            raise ValueError("phoneme id out of range")
        starts, ends = self.spans[:, 0], self.spans[:, 1]
        if starts[0] != 0 or ends[-1] != L or np.any(ends <= starts) or np.any(starts[1:] != ends[:-1]):
            raise ValueError("alignment spans do not partition the frames")


def spans_from_durations(durations: Sequence[int]) -> np.ndarray:
    ends = np.cumsum(durations)
    return np.stack([ends - np.asarray(durations), ends], axis=1).astype(np.int64)


@dataclass
class ToyWorld:
    seed: int
    phonemes: ToyPhonemeSet
    speakers: list[ToySpeaker]
    train_speakers: list[int]
    heldout_speakers: list[int]
    sigma_obs: float
    jitter: float
    projection: np.ndarray  # (d, 2C+1)
    bias: np.ndarray  # (d,)
    offset_std: float = 0.5
    log_scale_range: float = 0.25
    log_rate_range: float = 0.223
    _extra: dict = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return self.phonemes.K

    @property
    def C(self) -> int:
        return self.phonemes.C

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[0]

    def speaker(self, sid: int) -> ToySpeaker:
        if 0 <= sid < len(self.speakers):
            return self.speakers[sid]
        if sid in self._extra:
            return self._extra[sid]
        raise KeyError(f"unknown speaker {sid}")

    def embedding(self, speaker) -> np.ndarray:
        """Oracle speaker embedding: fixed projection of the latent, normalised."""
        spk = speaker if isinstance(speaker, ToySpeaker) else self.speaker(int(speaker))
        v = self.projection @ spk.latent() + self.bias
        return v / np.linalg.norm(v)

    def _draw_speaker(self, sid: int, gen: np.random.Generator) -> ToySpeaker:
        C = self.C
        return ToySpeaker(
            id=sid,
            offset=gen.normal(0.0, self.offset_std, C),
            scale=np.exp(gen.uniform(-self.log_scale_range, self.log_scale_range, C)),
            rate=float(np.exp(gen.uniform(-self.log_rate_range, self.log_rate_range))),
        )

    def extra_speakers(self, n: int, tag: str = "pool") -> list[ToySpeaker]:
        """Fresh speakers from the same prior, disjoint from the world's own ids.

        Used as the speaker-verification corpus for the trained encoder.
        """
        base = 10_000 + 1_000 * (zlib.crc32(tag.encode()) % 1000)
        gen = Rng(self.seed).stream("extra-speakers", tag)
        out = []
        for i in range(n):
            spk = self._draw_speaker(base + i, gen)
            self._extra[spk.id] = spk
            out.append(spk)
        return out

    def random_phonemes(self, n: int, gen: np.random.Generator) -> np.ndarray:
        """Random sequence with no immediate repeats."""
        seq = [int(gen.integers(self.K))]
        while len(seq) < n:
            k = int(gen.integers(self.K - 1))
            seq.append(k if k < seq[-1] else k + 1)
        return np.array(seq, dtype=np.int64)

    def durations_for(self, speaker: ToySpeaker, phonemes, gen: Optional[np.random.Generator] = None,
                      jitter: Optional[float] = None) -> np.ndarray:
        jitter = self.jitter if jitter is None else jitter
        base = speaker.rate * self.phonemes.durations[np.asarray(phonemes)]
        if jitter > 0 and gen is not None:
            base = base * (1.0 + gen.uniform(-jitter, jitter, base.shape))
        return np.maximum(1, np.round(base)).astype(np.int64)

    def render(self, speaker, phonemes, gen: np.random.Generator, jitter: Optional[float] = None) -> Utterance:
        spk = speaker if isinstance(speaker, ToySpeaker) else self.speaker(int(speaker))
        phonemes = np.asarray(phonemes, dtype=np.int64)
        if phonemes.size == 0 or phonemes.min() < 0 or phonemes.max() >= self.K:
            raise ValueError("invalid phoneme sequence")
        dur = self.durations_for(spk, phonemes, gen, jitter)
        labels = np.repeat(phonemes, dur)
        means = spk.transform(self.phonemes.templates[labels])
        frames = means + self.sigma_obs * gen.standard_normal(means.shape)
        return Utterance(frames, phonemes, spans_from_durations(dur), spk.id)

    def corpus(self, speaker_ids: Sequence[int], per_speaker: int, gen: np.random.Generator,
               n_phonemes: tuple[int, int] = (6, 12)) -> list[Utterance]:
        out = []
        for sid in speaker_ids:
            for _ in range(per_speaker):
                n = int(gen.integers(n_phonemes[0], n_phonemes[1] + 1))
                out.append(self.render(sid, self.random_phonemes(n, gen), gen))
        return out

    def decode_frames(self, frames: np.ndarray, speaker) -> np.ndarray:
        """Bayes-optimal per-frame phoneme decision under the speaker's transform (equal priors)."""
        spk = speaker if isinstance(speaker, ToySpeaker) else self.speaker(int(speaker))
        means = spk.transform(self.phonemes.templates)  # (K, C)
        d2 = ((np.asarray(frames)[..., None, :] - means) ** 2).sum(-1)
        return d2.argmin(-1)

    def config_block(self) -> dict:
        return {
            "seed": self.seed, "num_speakers": len(self.speakers), "K": self.K, "C": self.C,
            "d": self.embed_dim, "heldout": len(self.heldout_speakers),
            "sigma_obs": self.sigma_obs, "jitter": self.jitter,
        }


def _templates(gen: np.random.Generator, K: int, C: int, delta_min: float, tries: int = 100) -> np.ndarray:
    for _ in range(tries):
        mu = gen.standard_normal((K, C))
        d = np.sqrt(((mu[:, None] - mu[None]) ** 2).sum(-1))
        if d[np.triu_indices(K, 1)].min() >= delta_min:
            return mu
    raise ValueError(f"could not place {K} templates in {C} dims with separation {delta_min}")


def gen_world(
    seed: int,
    num_speakers: int = 16,
    K: int = 8,
    C: int = 8,
    d: int = 16,
    num_heldout: int = 4,
    sigma_obs: float = 0.1,
    delta_min: float = 1.0,
    jitter: float = 0.2,
    duration_range: tuple[int, int] = (2, 6),
    templates: Optional[np.ndarray] = None,
) -> ToyWorld:
    """Build a deterministic toy world; the last ``num_heldout`` speakers are never used for training."""
    if num_speakers < 2 or K < 2:
        raise ValueError("need at least 2 speakers and 2 phonemes")
    if not 1 <= num_heldout < num_speakers:
        raise ValueError("held-out count must leave at least one training speaker")
    rng = Rng(seed)
    g = rng.stream("world", "templates")
    mu = np.asarray(templates, dtype=np.float64) if templates is not None else _templates(g, K, C, delta_min)
    if mu.shape != (K, C):
        raise ValueError("template shape must be (K, C)")
    durs = rng.stream("world", "durations").integers(duration_range[0], duration_range[1] + 1, K)
    gp = rng.stream("world", "projection")
    projection = gp.standard_normal((d, 2 * C + 1)) / np.sqrt(2 * C + 1)
    bias = gp.standard_normal(d)
    bias *= 1.5 / np.linalg.norm(bias)
    world = ToyWorld(seed, ToyPhonemeSet(mu, durs), [], [], [], sigma_obs, jitter, projection, bias)
    gs = rng.stream("world", "speakers")
    world.speakers = [world._draw_speaker(i, gs) for i in range(num_speakers)]
    world.train_speakers = list(range(num_speakers - num_heldout))
    world.heldout_speakers = list(range(num_speakers - num_heldout, num_speakers))
    return world


@dataclass(frozen=True)
class GaussianBenchmark:
    """Isotropic Gaussian data N(mean, std^2 I) with closed-form VP-SDE marginals."""

    mean: np.ndarray
    std: float
    schedule: NoiseSchedule = NoiseSchedule()

    def sample(self, shape, gen: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * gen.standard_normal(shape)

    def marginal(self, t: float) -> tuple[np.ndarray, float]:
        if t == 0:
            return np.asarray(self.mean, dtype=float), self.std**2
        a = float(self.schedule.alpha(t))
        return a * np.asarray(self.mean, dtype=float), a * a * self.std**2 + float(self.schedule.lambda_t(t))

    def log_density(self, x, t: float) -> float:
        m, v = self.marginal(t)
        x = np.asarray(x, dtype=float)
        r = x - m
        return float(-0.5 * (r * r).sum() / v - 0.5 * x.size * np.log(2 * np.pi * v))

    def score(self, x, t: float, condition=None) -> np.ndarray:
        m, v = self.marginal(t)
        return -(np.asarray(x, dtype=float) - m) / v


@dataclass(frozen=True)
class GaussianMixtureBenchmark:
    """Mixture of isotropic Gaussians sharing one std; each mean has the full sample shape."""

    means: tuple[np.ndarray, ...]
    std: float
    weights: tuple[float, ...] = ()
    schedule: NoiseSchedule = NoiseSchedule()

    def _w(self) -> np.ndarray:
        w = np.asarray(self.weights if self.weights else [1.0] * len(self.means), dtype=float)
        return w / w.sum()

    def components(self) -> list[GaussianBenchmark]:
        return [GaussianBenchmark(np.asarray(m, dtype=float), self.std, self.schedule) for m in self.means]

    def sample(self, n: int, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = gen.choice(len(self.means), size=n, p=self._w())
        means = np.stack([np.asarray(self.means[i], dtype=float) for i in idx])
        return means + self.std * gen.standard_normal(means.shape), idx

    def _log_terms(self, x, t: float) -> np.ndarray:
        """Per-component log(w_j N(x; a m_j, v I)) for x with a leading batch axis."""
        x = np.asarray(x, dtype=float)
        out = []
        for w, comp in zip(self._w(), self.components()):
            m, v = comp.marginal(t)
            r = (x - m).reshape(x.shape[0], -1)
            out.append(np.log(w) - 0.5 * (r * r).sum(1) / v - 0.5 * r.shape[1] * np.log(2 * np.pi * v))
        return np.stack(out, axis=1)

    def log_density(self, x, t: float) -> np.ndarray:
        return logsumexp(self._log_terms(x, t), axis=1)

    def posterior(self, x, t: float) -> np.ndarray:
        lt = self._log_terms(x, t)
        return np.exp(lt - logsumexp(lt, axis=1, keepdims=True))

    def class_log_prob(self, x, t: float, j: int) -> np.ndarray:
        lt = self._log_terms(x, t)
        return lt[:, j] - logsumexp(lt, axis=1)

    def score(self, x, t: float, condition=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        post = self.posterior(x, t)
        out = np.zeros_like(x)
        for j, comp in enumerate(self.components()):
            out += post[:, j].reshape((-1,) + (1,) * (x.ndim - 1)) * comp.score(x, t)
        return out

    def class_log_prob_grad(self, x, t: float, j: int) -> np.ndarray:
        """Analytic gradient of log p_t(j | x): component score minus mixture score."""
        return self.components()[j].score(x, t) - self.score(x, t)


def gaussian_benchmark(mean, std: float, schedule: NoiseSchedule = NoiseSchedule()) -> GaussianBenchmark:
    if std <= 0:
        raise ValueError("std must be positive")
    return GaussianBenchmark(np.asarray(mean, dtype=float), float(std), schedule)


@dataclass
class GaussianSpeakerWorld:
    """Speakers whose single-frame 'utterances' are N(mean_S, std^2 I); each has a unit embedding."""

    means: list[np.ndarray]  # each (L, C)
    std: float
    embeddings: np.ndarray  # (S, d)
    schedule: NoiseSchedule = NoiseSchedule()

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.means[0].shape

    def benchmark(self, speaker: int) -> GaussianBenchmark:
        return GaussianBenchmark(self.means[speaker], self.std, self.schedule)

    def mixture(self) -> GaussianMixtureBenchmark:
        return GaussianMixtureBenchmark(tuple(self.means), self.std, (), self.schedule)

    def batch(self, gen: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = gen.integers(len(self.means), size=size)
        x0 = np.stack([self.means[i] for i in idx]) + self.std * gen.standard_normal((size,) + self.frame_shape)
        return x0, self.embeddings[idx]


def two_speaker_gaussian_world(m: float = 1.0, std: float = 0.5, C: int = 2, L: int = 1, d: int = 16,
                               seed: int = 0) -> GaussianSpeakerWorld:
    """Symmetric world: speaker 0 has mean +m, speaker 1 has mean -m in every entry."""
    g = Rng(seed).stream("gaussian-world", "embeddings")
    e = g.standard_normal((2, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    base = np.full((L, C), float(m))
    return GaussianSpeakerWorld([base, -base], float(std), e)
