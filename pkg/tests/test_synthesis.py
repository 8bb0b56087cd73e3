"""Label expansion, guided synthesis and the speaker-scale sweep."""
import csv
import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptdiff.experiment import guidance_config, sampler_config
from adaptdiff.guidance import GuidanceConfig
from adaptdiff.numerics import Rng
from adaptdiff.score_models import GaussianOracleScore
from adaptdiff.sde import ReverseSamplerConfig, reverse_sample, sample_prior
from adaptdiff.synthesis import (
    SynthesisError,
    SynthesisRequest,
    VoiceModels,
    expand_labels,
    gamma_sweep,
    run_length_encode,
    sweep_csv,
    synthesize,
)


class TestExpand:
    def test_example(self):
        np.testing.assert_array_equal(expand_labels([0, 1], [2, 3]), [0, 0, 1, 1, 1])

    def test_single(self):
        np.testing.assert_array_equal(expand_labels([4], [1]), [4])

    def test_zero_duration(self):
        with pytest.raises(ValueError):
            expand_labels([0, 1], [2, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            expand_labels([0, 1], [2])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(1, 9)), min_size=1, max_size=20))
    def test_run_length_round_trip(self, pairs):
        ph, dur = [pairs[0][0]], [pairs[0][1]]
        for p, d in pairs[1:]:
            if p != ph[-1]:
                ph.append(p)
                dur.append(d)
        y, d = run_length_encode(expand_labels(ph, dur))
        np.testing.assert_array_equal(y, ph)
        np.testing.assert_array_equal(d, dur)


class FixedDurations:
    def __init__(self, d):
        self.d = d

    def predict_durations(self, phonemes, e):
        return np.full(len(phonemes), self.d)


class NoClassifier:
    def frame_logp_grad(self, x_t, t, e, labels):
        raise AssertionError("classifier must not be consulted at gamma_t = 0")


class FixedEncoder:
    def encode_speaker(self, u):
        return np.array([1.0, 0.0])


def oracle_models(mean, std, frames_per_phoneme):
    return VoiceModels(GaussianOracleScore(np.asarray(mean, dtype=float), std), NoClassifier(),
                       FixedDurations(frames_per_phoneme), FixedEncoder())


class TestUnguidedOracle:
    def test_matches_plain_reverse_sampling_exactly(self):
        models = oracle_models([0.5, -1.0], 0.7, 10)
        sampler = ReverseSamplerConfig(50, 1.0)
        req = SynthesisRequest(np.arange(4), embedding=np.array([1.0, 0.0]), guidance=GuidanceConfig(0.0, 0.0),
                               sampler=sampler)
        out = synthesize(req, models, Rng(3))
        rng = Rng(3)
        x1 = sample_prior((40, 2), 1.0, rng.stream("synth", "prior"))
        ref = reverse_sample(lambda x, t: models.score.score(x, t), x1, sampler, rng.stream("synth", "steps"))
        assert out.frames.tobytes() == ref.tobytes()

    def test_moments(self):
        mean, std = np.array([0.5, -1.0]), 0.7
        models = oracle_models(mean, std, 100)
        req = SynthesisRequest(np.arange(10), embedding=np.array([1.0, 0.0]), guidance=GuidanceConfig(0.0, 0.0),
                               sampler=ReverseSamplerConfig(50, 1.0))
        x = synthesize(req, models, Rng(0)).frames
        assert x.shape == (1000, 2)
        se = std / np.sqrt(len(x))
        assert np.all(np.abs(x.mean(0) - mean) < 4 * se)
        assert np.all(np.abs(x.var(0) / std**2 - 1) < 0.1)


class TestRequest:
    def test_empty_text(self):
        with pytest.raises(ValueError):
            SynthesisRequest([], embedding=np.ones(2))

    def test_exactly_one_speaker_source(self, tiny_voice):
        ref = tiny_voice.world.render(12, [0, 1], Rng(0).stream("r"))
        with pytest.raises(ValueError):
            SynthesisRequest([0], reference=ref, embedding=np.ones(2))
        with pytest.raises(ValueError):
            SynthesisRequest([0])


@pytest.fixture
def request_for(tiny_voice):
    v = tiny_voice
    ref = v.world.render(v.world.heldout_speakers[0], v.world.random_phonemes(8, Rng(0).stream("ref")),
                         Rng(0).stream("ref-frames"))

    def make(**kw):
        base = dict(reference=ref, guidance=guidance_config(v.config), sampler=sampler_config(v.config))
        base.update(kw)
        return SynthesisRequest(np.array([1, 4, 2, 6]), **base)

    return make


class TestTrainedPipeline:
    def test_length_equals_predicted_durations(self, tiny_voice, request_for):
        req = request_for()
        out = synthesize(req, tiny_voice.models(), Rng(0))
        d = tiny_voice.duration.predict_durations(req.phonemes, tiny_voice.encoder(req.reference))
        assert len(out.frames) == d.sum() == len(out.labels)
        np.testing.assert_array_equal(out.labels, expand_labels(req.phonemes, d))

    def test_deterministic(self, tiny_voice, request_for):
        a = synthesize(request_for(), tiny_voice.models(), Rng(4))
        b = synthesize(request_for(), tiny_voice.models(), Rng(4))
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.diagnostics == b.diagnostics

    def test_diagnostics_ratio_is_text_scale(self, tiny_voice, request_for):
        out = synthesize(request_for(sampler=ReverseSamplerConfig(20, 1.5)), tiny_voice.models(), Rng(1))
        assert len(out.diagnostics) == 20
        for d in out.diagnostics:
            assert not d.skipped
            assert abs(d.guidance_norm / d.score_norm - 0.3) <= 1e-9

    def test_diagnostics_csv(self, tiny_voice, request_for):
        out = synthesize(request_for(), tiny_voice.models(), Rng(1))
        rows = list(csv.reader(io.StringIO(out.diagnostics_csv())))
        assert rows[0] == ["step", "t", "score_norm", "guidance_norm", "skipped"]
        assert len(rows) == 1 + tiny_voice.config.steps

    def test_adapted_path_differs_only_in_score(self, tiny_voice, request_for):
        base = synthesize(request_for(), tiny_voice.models(), Rng(2))
        same = synthesize(request_for(adapted_model=True), tiny_voice.models(), Rng(2))
        assert same.adapted_model and not base.adapted_model
        assert same.frames.tobytes() == base.frames.tobytes()

    def test_component_failure_reports_step(self, tiny_voice, request_for):
        class Failing:
            channels = tiny_voice.world.C

            def score(self, x, t, condition=None):
                if t < 0.5:
                    raise FloatingPointError("boom")
                return -x

        req = request_for(sampler=ReverseSamplerConfig(10, 1.0), guidance=GuidanceConfig(0.0, 0.0))
        with pytest.raises(SynthesisError) as info:
            synthesize(req, tiny_voice.models().with_score(Failing()), Rng(0))
        assert info.value.step == 6


class TestSweep:
    def test_rows_and_csv_shape(self, tiny_voice, request_for):
        rows = gamma_sweep(request_for(), tiny_voice.models(), tiny_voice.evaluator(), Rng(0), gammas=(0.0, 2.0),
                           runs=2)
        assert [r["gamma_s"] for r in rows] == [0.0, 2.0]
        table = list(csv.reader(io.StringIO(sweep_csv(rows))))
        assert table[0] == ["gamma_s", "frame_error", "similarity"]
        assert len(table) == 3 and all(len(r) == 3 for r in table)

    def test_zero_scale_row_equals_run_without_cfg(self, tiny_voice, request_for):
        v = tiny_voice
        req = request_for()
        rows = gamma_sweep(req, v.models(), v.evaluator(), Rng(0), gammas=(0.0,), runs=2)
        ev = v.evaluator()
        fe, sim = [], []
        plain = replace(req, guidance=GuidanceConfig(0.0, 0.3, "norm_based"))
        for r in range(2):
            out = synthesize(plain, v.models(), Rng(0).child("sweep", 0, r))
            fe.append(ev.frame_error(out.frames, out.labels, req.reference.speaker))
            sim.append(ev.similarity(out.frames, req.reference))
        assert rows[0]["frame_error"] == np.mean(fe) and rows[0]["similarity"] == np.mean(sim)

    def test_empty_gamma_list(self, tiny_voice, request_for):
        with pytest.raises(ValueError):
            gamma_sweep(request_for(), tiny_voice.models(), tiny_voice.evaluator(), Rng(0), gammas=())
