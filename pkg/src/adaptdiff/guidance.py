"""Guidance combinators that turn raw scores and classifier gradients into a modified score."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "GuidanceConfig",
    "GuidanceWarning",
    "GuidanceStep",
    "MODES",
    "classifier_guided_score",
    "scaled_classifier_score",
    "cfg_score",
    "norm_based_score",
    "combined_score",
    "guided_score",
]

MODES = ("plain_classifier", "scaled_classifier", "cfg", "norm_based", "combined")

GRAD_FLOOR = 1e-12


class GuidanceWarning(UserWarning):
    """The classifier gradient vanished, so the text guidance term was skipped for a step."""


@dataclass(frozen=True)
class GuidanceConfig:
    gamma_s: float = 1.0
    gamma_t: float = 0.3
    mode: str = "combined"
    per_frame_norm: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.gamma_s < 0 or self.gamma_t < 0:
            raise ValueError("guidance scales must be non-negative")


@dataclass(frozen=True)
class GuidanceStep:
    score_norm: float  # norm of the score the text term is scaled against
    guidance_norm: float  # norm of the added text term
    skipped: bool = False


def classifier_guided_score(s_uncond, grad_logp):
    """Unconditional score plus classifier gradient."""
    s_uncond, grad_logp = np.asarray(s_uncond), np.asarray(grad_logp)
    if s_uncond.shape != grad_logp.shape:
        raise ValueError("score and gradient shapes differ")
    return s_uncond + grad_logp


def scaled_classifier_score(s_cond, grad_logp, gamma: float):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return np.asarray(s_cond) + gamma * np.asarray(grad_logp)


def cfg_score(s_cond, s_uncond, gamma: float):
    """s_cond + gamma * (s_cond - s_uncond); returns ``s_cond`` bit-for-bit where the difference is zero."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    s_cond = np.asarray(s_cond, dtype=np.float64)
    diff = s_cond - np.asarray(s_uncond, dtype=np.float64)
    return np.where(diff == 0, s_cond, s_cond + gamma * diff)


def _norm(x: np.ndarray, per_frame: bool) -> np.ndarray:
    if per_frame:
        return np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.sqrt((x * x).sum())


def norm_based_score(base, grad_logp, gamma_t: float, per_frame: bool = False,
                     return_step: bool = False):
    """Add the classifier gradient rescaled to ``gamma_t`` times the norm of ``base``.

    Norms are global over the whole tensor unless ``per_frame`` is set, in which
    case each frame (last axis) is rescaled on its own. A gradient norm below
    1e-12 skips the term and emits :class:`GuidanceWarning`.
    """
    if gamma_t < 0:
        raise ValueError("gamma_t must be non-negative")
    base = np.asarray(base, dtype=np.float64)
    g = np.asarray(grad_logp, dtype=np.float64)
    if base.shape != g.shape:
        raise ValueError("score and gradient shapes differ")
    bn, gn = _norm(base, per_frame), _norm(g, per_frame)
    if gamma_t == 0:
        out, term, skipped = base.copy(), np.zeros_like(base), False
    elif np.all(gn < GRAD_FLOOR):
        warnings.warn("classifier gradient norm below 1e-12; text guidance skipped", GuidanceWarning, stacklevel=2)
        out, term, skipped = base.copy(), np.zeros_like(base), True
    else:
        coef = gamma_t * bn / np.where(gn < GRAD_FLOOR, np.inf, gn)
        term = coef * g
        out, skipped = base + term, False
    if return_step:
        return out, GuidanceStep(float(np.sqrt((base * base).sum())), float(np.sqrt((term * term).sum())), skipped)
    return out


def combined_score(x_t, t: float, e_s, frame_labels, score_model, classifier, config: GuidanceConfig,
                   return_step: bool = False):
    """Speaker classifier-free guidance followed by norm-based text guidance.

    The text term is scaled against the norm of the classifier-free score, not
    the raw conditional score.
    """
    s_cond = score_model.score(x_t, t, e_s)
    if config.gamma_s == 0:
        s_hat = s_cond
    else:
        s_hat = cfg_score(s_cond, score_model.score(x_t, t, None), config.gamma_s)
    if config.gamma_t == 0:
        out, step = s_hat, GuidanceStep(float(np.linalg.norm(s_hat)), 0.0)
    else:
        _, g = classifier.frame_logp_grad(x_t, t, e_s, frame_labels)
        out, step = norm_based_score(s_hat, g, config.gamma_t, config.per_frame_norm, return_step=True)
    return (out, step) if return_step else out


def guided_score(x_t, t: float, e_s, frame_labels, score_model, classifier, config: GuidanceConfig):
    """Dispatch on ``config.mode``; returns (score, GuidanceStep).

    ``plain_classifier`` adds the raw classifier gradient to the null-condition
    score. ``scaled_classifier`` adds ``gamma_t`` times it to the speaker score.
    ``norm_based`` applies norm-scaled text guidance to the speaker score without
    classifier-free amplification.
    """
    mode = config.mode
    if mode == "combined":
        return combined_score(x_t, t, e_s, frame_labels, score_model, classifier, config, return_step=True)
    if mode == "cfg":
        s_cond = score_model.score(x_t, t, e_s)
        out = cfg_score(s_cond, score_model.score(x_t, t, None), config.gamma_s)
        return out, GuidanceStep(float(np.linalg.norm(out)), 0.0)
    _, g = classifier.frame_logp_grad(x_t, t, e_s, frame_labels)
    if mode == "plain_classifier":
        s = score_model.score(x_t, t, None)
        return classifier_guided_score(s, g), GuidanceStep(float(np.linalg.norm(s)), float(np.linalg.norm(g)))
    s_cond = score_model.score(x_t, t, e_s)
    if mode == "scaled_classifier":
        out = scaled_classifier_score(s_cond, g, config.gamma_t)
        return out, GuidanceStep(float(np.linalg.norm(s_cond)), config.gamma_t * float(np.linalg.norm(g)))
    return norm_based_score(s_cond, g, config.gamma_t, config.per_frame_norm, return_step=True)
