"""
Guidance on a two-speaker Gaussian world
========================================

Two speakers emit frames from N(+m, s^2) and N(-m, s^2). Everything about the
noised mixture is analytic here, so each guidance rule can be compared against
the exact class-conditional score.
"""

import numpy as np

from adaptdiff.guidance import cfg_score, classifier_guided_score, norm_based_score
from adaptdiff.numerics import Rng, Tape, concat, log_softmax
from adaptdiff.sde import NoiseSchedule
from adaptdiff.toyworld import GaussianMixtureBenchmark

m, s = 1.0, 0.5
mix = GaussianMixtureBenchmark((np.array([m, m]), np.array([-m, -m])), s)
schedule = NoiseSchedule()
x = Rng(0).stream("demo").normal(0, 2, size=(500, 2))


def marginal(t):
    a = float(schedule.alpha(t))
    return a * m, a * a * s * s + float(schedule.lambda_t(t))


def log_posterior_grad(x, t):
    """Gradient of log p(speaker 0 | x_t), through the tape."""
    mu, v = marginal(t)
    tape = Tape()
    with tape:
        xt = tape.watch(x)
        d0, d1 = xt - mu, xt + mu
        l0 = (d0 * d0).sum(axis=-1, keepdims=True) * (-0.5 / v)
        l1 = (d1 * d1).sum(axis=-1, keepdims=True) * (-0.5 / v)
        total = log_softmax(concat([l0, l1], axis=-1))[:, 0].sum()
    return tape.gradient(total, [xt])[0]


###############################################################################
# Mixture score plus the Bayes posterior gradient gives the speaker-0 score.

for t in (0.1, 0.5, 0.9):
    mu, v = marginal(t)
    exact = -(x - mu) / v
    guided = classifier_guided_score(mix.score(x, t), log_posterior_grad(x, t))
    print(f"t={t}: max |guided - exact| = {np.abs(guided - exact).max():.1e}")

###############################################################################
# Classifier-free guidance extrapolates from the unconditional score towards
# the conditional one. At gamma = 0 it returns the conditional score.

t = 0.5
mu, v = marginal(t)
cond, uncond = -(x - mu) / v, mix.score(x, t)
for gamma in (0.0, 1.0, 3.0):
    out = cfg_score(cond, uncond, gamma)
    print(f"gamma_s={gamma}: mean shift towards speaker 0 = {np.mean(out - uncond):+.3f}")

###############################################################################
# Norm-based guidance fixes the size of the push relative to the score, so an
# overconfident classifier gradient cannot swamp it.

grad = log_posterior_grad(x, t)
for scale in (1.0, 1e3):
    out = norm_based_score(cond, scale * grad, 0.3)
    print(f"gradient x{scale:g}: |push| / |score| = {np.linalg.norm(out - cond) / np.linalg.norm(cond):.6f}")
