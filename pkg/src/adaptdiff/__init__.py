"""Adaptive score-based speech synthesis on a toy acoustic world.

numpy-only reimplementation of a guided VP-SDE decoder: reverse-mode autodiff,
speaker-conditional score training with null-condition dropout, classifier-free
speaker guidance combined with norm-scaled phoneme-classifier guidance, and
few-step fine-tuning to an unseen speaker.
"""
from .config import Config, ConfigError
from .experiment import Voice, cfg_train_voice, finetune_voice, pretrain_voice, run_experiment
from .guidance import (
    GuidanceConfig,
    GuidanceWarning,
    cfg_score,
    classifier_guided_score,
    combined_score,
    norm_based_score,
    scaled_classifier_score,
)
from .numerics import AdamState, DivergenceError, Rng, Tape, Tensor, adam_step, grad, value_and_grad
from .score_models import ConditionalScoreNet, GaussianOracleScore, NullEmbeddingError, oracle_score
from .sde import NoiseSchedule, ReverseSamplerConfig, forward_marginal, reverse_sample, reverse_step, sample_prior
from .storage import CheckpointError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .synthesis import SynthesisRequest, ToyEvaluator, VoiceModels, gamma_sweep, synthesize
from .toyworld import Utterance, gen_world, two_speaker_gaussian_world
from .training import TrainConfig, cfg_stage, finetune, pretrain, score_loss

__version__ = "0.1.0"
