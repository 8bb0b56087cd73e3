"""
Adapting to an unseen speaker
=============================

Trains a reduced voice on the toy acoustic world, then fine-tunes its score
network on one clip of a held-out speaker. Takes about a minute on one core.
"""

from adaptdiff.config import Config
from adaptdiff.experiment import (
    cfg_train_voice,
    eval_case,
    finetune_voice,
    guidance_config,
    pretrain_voice,
    sampler_config,
)
from adaptdiff.numerics import Rng
from adaptdiff.synthesis import SynthesisRequest, synthesize

cfg = Config().with_overrides(hidden=64, iterations=1500, cfg_iterations=500, encoder_iterations=800)
voice = cfg_train_voice(pretrain_voice(cfg, on_log=print), on_log=print)
ev = voice.evaluator()

###############################################################################
# One reference clip from a speaker the score network never saw, and a text.

reference, text = eval_case(voice.world, cfg, run=0)
print("reference speaker", reference.speaker, "with", len(reference), "frames; text", text.tolist())

###############################################################################
# Fine-tune and keep snapshots. Sampling reuses one random stream so that the
# only thing changing between rows is the network.

iters = (0, 50, 200, 500)
_, snaps = finetune_voice(voice, reference, max(iters), rng=Rng(1), snapshots=iters)
for n in iters:
    req = SynthesisRequest(text, reference=reference, guidance=guidance_config(cfg), sampler=sampler_config(cfg))
    out = synthesize(req, voice.models(voice.score.with_params(snaps[n])), Rng(2))
    print(f"{n:>3} iterations: frame error {ev.frame_error(out.frames, out.labels, reference.speaker):.3f}, "
          f"similarity {ev.similarity(out.frames, reference):.4f}")

###############################################################################
# Raising the speaker scale pushes harder towards the reference voice, at some
# cost in pronunciation.

for gamma_s in (0.0, 2.0, 6.0):
    req = SynthesisRequest(text, reference=reference, guidance=guidance_config(cfg, gamma_s=gamma_s),
                           sampler=sampler_config(cfg))
    out = synthesize(req, voice.models(), Rng(2))
    print(f"gamma_s={gamma_s}: frame error {ev.frame_error(out.frames, out.labels, reference.speaker):.3f}, "
          f"similarity {ev.similarity(out.frames, reference):.4f}")
