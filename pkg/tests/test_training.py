"""Score loss, the three training stages, and their reports."""
import csv
import io

import numpy as np
import pytest
from scipy.integrate import quad

from adaptdiff.experiment import finetune_voice
from adaptdiff.numerics import DivergenceError, Rng, checksum
from adaptdiff.score_models import ConditionalScoreNet
from adaptdiff.sde import NoiseSchedule
from adaptdiff.toyworld import Utterance, spans_from_durations
from adaptdiff.training import ReferenceCrops, TrainConfig, cfg_stage, finetune, pretrain, score_loss

from oracles import central_diff, rel_err

SCHED = NoiseSchedule()


class AffineToy:
    """s(x, t) = a * x + b * t, two scalar parameters."""

    schedule = SCHED

    def apply(self, p, x, t, e=None, null_mask=None):
        tt = np.asarray(t, dtype=float).reshape((-1,) + (1,) * (np.ndim(x) - 1))
        return p["a"] * x + p["b"] * np.broadcast_to(tt, np.shape(x))


class OraclePlug:
    """Outputs exactly the regression target for a known eps."""

    schedule = SCHED

    def __init__(self, eps):
        self.eps = eps

    def apply(self, p, x, t, e=None, null_mask=None):
        lam = SCHED.lambda_t(np.asarray(t)).reshape((-1,) + (1,) * (self.eps.ndim - 1))
        return p["z"] * 0.0 - self.eps / np.sqrt(lam)


class TestScoreLoss:
    def test_oracle_plug_gives_zero(self):
        g = Rng(0).stream("plug")
        x0 = g.normal(size=(8, 5, 2))
        eps = g.standard_normal(x0.shape)
        t = g.uniform(1e-4, 1, 8)
        for weighting in ("none", "lambda"):
            loss, _ = score_loss(OraclePlug(eps), {"z": np.zeros(1)}, x0, None, t=t, eps=eps, weighting=weighting)
            assert loss == 0.0

    def test_zero_model_matches_expected_loss(self):
        """With s = 0 the loss is |eps|^2 / lambda summed over entries; its mean is C * E[1/lambda]."""
        g = Rng(0).stream("zero-model")
        C, B = 3, 20000
        t = np.linspace(0.1, 1.0, B)
        loss, _ = score_loss(AffineToy(), {"a": np.zeros(1), "b": np.zeros(1)}, np.zeros((B, C)), None,
                             t=t, eps=g.standard_normal((B, C)))
        expected = C * np.mean(1.0 / SCHED.lambda_t(t))
        # relative standard error is about sqrt(2 / (B C))
        assert loss == pytest.approx(expected, rel=4 * np.sqrt(2 / (B * C)))

    def test_zero_model_with_sampled_times(self):
        g = Rng(0).stream("zero-model-t")
        C, B, t_min = 2, 40000, 0.05
        loss, _ = score_loss(AffineToy(), {"a": np.zeros(1), "b": np.zeros(1)}, np.zeros((B, C)), None, g,
                             t_min=t_min)
        inv, _ = quad(lambda s: 1.0 / float(SCHED.lambda_t(s)), t_min, 1.0)
        inv2, _ = quad(lambda s: 1.0 / float(SCHED.lambda_t(s)) ** 2, t_min, 1.0)
        mean = C * inv / (1 - t_min)
        # per-sample variance: 3C E[1/lam^2] - (C E[1/lam])^2 plus the C(C-1) cross terms
        var = (3 * C + C * (C - 1)) * inv2 / (1 - t_min) - mean**2
        assert abs(loss - mean) < 4 * np.sqrt(var / B)

    def test_nonnegative(self):
        g = Rng(1).stream("nonneg")
        loss, _ = score_loss(AffineToy(), {"a": np.array([0.3]), "b": np.array([-2.0])}, g.normal(size=(16, 4)),
                             None, g)
        assert loss > 0

    @pytest.mark.parametrize("weighting", ["none", "lambda"])
    def test_gradient_matches_finite_differences(self, weighting):
        g = Rng(2).stream("fd", weighting)
        x0 = g.normal(size=(6, 3))
        eps = g.standard_normal(x0.shape)
        t = g.uniform(0.05, 1.0, 6)
        p = {"a": np.array([0.7]), "b": np.array([-0.4])}
        _, grads = score_loss(AffineToy(), p, x0, None, t=t, eps=eps, weighting=weighting)
        for k in p:
            def f(v, k=k):
                q = dict(p)
                q[k] = v
                return score_loss(AffineToy(), q, x0, None, t=t, eps=eps, weighting=weighting)[0]
            assert rel_err(grads[k], central_diff(f, p[k])) < 1e-5

    def test_net_gradient_matches_finite_differences(self):
        net = ConditionalScoreNet(2, 4, hidden=8, depth=1)
        net.init_params(Rng(0).stream("init"))
        g = Rng(3).stream("fd-net")
        x0 = g.normal(size=(3, 4, 2))
        e = g.normal(size=(3, 4))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        eps, t = g.standard_normal(x0.shape), g.uniform(0.1, 1, 3)
        mask = np.array([True, False, False])
        _, grads = score_loss(net, net.params, x0, e, t=t, eps=eps, null_mask=mask, weighting="lambda")
        for name in ("score.null_w", "score.in_w"):
            def f(v, name=name):
                q = dict(net.params)
                q[name] = v
                return score_loss(net, q, x0, e, t=t, eps=eps, null_mask=mask, weighting="lambda")[0]
            assert rel_err(grads[name], central_diff(f, net.params[name])) < 1e-5

    def test_nan_aborts(self):
        with pytest.raises(DivergenceError):
            score_loss(AffineToy(), {"a": np.ones(1), "b": np.ones(1)}, np.full((2, 2), np.nan), None,
                       Rng(0).stream("nan"))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    ft = TrainConfig.for_finetune()
    assert (ft.lr, ft.iterations, ft.reset_optimizer, ft.dropout_p) == (2e-5, 500, True, 0.0)
    assert TrainConfig().lr == 1e-4 and TrainConfig().dropout_p == 0.5


@pytest.fixture
def small_net():
    net = ConditionalScoreNet(2, 16, hidden=16, depth=1)
    net.init_params(Rng(0).stream("init"))
    return net


class TestPretrain:
    def test_zero_lr_leaves_parameters(self, small_net, gaussian_world):
        res = pretrain(gaussian_world, small_net, TrainConfig(lr=0.0, iterations=20), Rng(0))
        assert checksum(res.params) == checksum(small_net.params)
        for k in small_net.params:
            assert res.params[k].tobytes() == small_net.params[k].tobytes()
        assert all(np.isfinite(res.report.losses))

    def test_seeded_rerun_is_identical(self, small_net, gaussian_world):
        cfg = TrainConfig(lr=1e-3, iterations=30)
        a = pretrain(gaussian_world, small_net, cfg, Rng(5))
        b = pretrain(gaussian_world, small_net, cfg, Rng(5))
        assert a.report.losses == b.report.losses
        assert a.report.checksum == b.report.checksum

    def test_loss_decreases(self, small_net, gaussian_world):
        res = pretrain(gaussian_world, small_net, TrainConfig(lr=1e-3, iterations=400, batch=32), Rng(0))
        n = len(res.report.losses) // 10
        assert np.median(res.report.losses[-n:]) < np.median(res.report.losses[:n])

    def test_report_csv(self, small_net, gaussian_world):
        res = pretrain(gaussian_world, small_net, TrainConfig(iterations=3), Rng(0))
        rows = list(csv.reader(io.StringIO(res.report.to_csv())))
        assert rows[0] == ["iteration", "loss", "wall_ms"]
        assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]
        assert [float(r[1]) for r in rows[1:]] == res.report.losses

    def test_divergence_detected(self, small_net):
        class Growing:
            calls = 0

            def batch(self, gen, size):
                self.calls += 1
                e = np.zeros((size, 16))
                e[:, 0] = 1.0
                return np.full((size, 1, 2), 10.0 * self.calls), e

        with pytest.raises(DivergenceError):
            pretrain(Growing(), small_net, TrainConfig(lr=0.0, iterations=400), Rng(0))

    def test_per_speaker_scores_match_oracle(self, gaussian_nets, gaussian_world):
        pre, _ = gaussian_nets
        g = Rng(0).stream("pretrain-mae")
        for sid in (0, 1):
            bench = gaussian_world.benchmark(sid)
            err = []
            for t in np.linspace(0.2, 0.9, 8):
                m, v = bench.marginal(t)
                x = m + np.sqrt(v) * g.standard_normal((200, 1, 2))
                err.append(np.abs(pre.score(x, t, gaussian_world.embeddings[sid]) - bench.score(x, t)).mean())
            assert np.mean(err) < 0.1


class RecordingNet:
    """Delegates to a score net and records every null mask it is given."""

    def __init__(self, net):
        self.net = net
        self.masks = []

    def apply(self, p, x, t, e=None, null_mask=None):
        self.masks.append(None if null_mask is None else np.array(null_mask))
        return self.net.apply(p, x, t, e, null_mask)

    def __getattr__(self, name):
        return getattr(self.net, name)


class TestCFGStage:
    def test_zero_dropout_equals_pretrain(self, small_net, gaussian_world):
        a = pretrain(gaussian_world, small_net, TrainConfig(lr=1e-3, iterations=25), Rng(4))
        b = cfg_stage(gaussian_world, small_net, TrainConfig(lr=1e-3, iterations=25, dropout_p=0.0), Rng(4))
        assert a.report.losses == b.report.losses
        assert a.report.checksum == b.report.checksum

    def test_replacement_frequency(self, small_net, gaussian_world):
        rec = RecordingNet(small_net)
        cfg_stage(gaussian_world, rec, TrainConfig(lr=0.0, iterations=100, batch=100), Rng(0))
        masks = np.concatenate(rec.masks)
        assert masks.size == 10**4
        assert abs(masks.mean() - 0.5) <= 0.015

    def test_full_dropout_trains_only_null_branch(self, small_net, gaussian_world):
        rec = RecordingNet(small_net)
        cfg_stage(gaussian_world, rec, TrainConfig(lr=0.0, iterations=3, batch=8, dropout_p=1.0), Rng(0))
        assert all(m.all() for m in rec.masks)

    def test_unconditional_score_matches_mixture(self, gaussian_nets, gaussian_world):
        _, net = gaussian_nets
        mix = gaussian_world.mixture()
        g = Rng(0).stream("mixture-mae")
        err = []
        for t in np.linspace(0.2, 0.9, 8):
            x, _ = mix.sample(400, g)
            a = float(SCHED.alpha(t))
            xt = a * x + np.sqrt(float(SCHED.lambda_t(t))) * g.standard_normal(x.shape)
            err.append(np.abs(net.score(xt, t, None) - mix.score(xt, t)).mean())
        assert np.mean(err) < 0.15


def unit(d, k=0):
    e = np.zeros(d)
    e[k] = 1.0
    return e


class TestFinetune:
    @pytest.fixture
    def reference(self):
        frames = Rng(7).stream("ref").normal(0.5, 0.3, size=(40, 2))
        return Utterance(frames, np.array([0, 1]), spans_from_durations([20, 20]), 0)

    def test_zero_iterations_is_identity(self, small_net, reference):
        res = finetune(reference, small_net, unit(16), TrainConfig.for_finetune(iterations=0))
        for k in small_net.params:
            assert res.params[k].tobytes() == small_net.params[k].tobytes()
        assert res.report.losses == []

    def test_exact_iteration_count(self, small_net, reference):
        res = finetune(reference, small_net, unit(16), TrainConfig.for_finetune(iterations=7))
        assert len(res.report.losses) == 7 and res.optimizer.step == 7

    def test_reset_optimizer_ignores_history(self, small_net, reference, gaussian_world):
        hist_a = pretrain(gaussian_world, small_net, TrainConfig(lr=1e-3, iterations=5), Rng(1)).optimizer
        hist_b = pretrain(gaussian_world, small_net, TrainConfig(lr=1e-3, iterations=9), Rng(2)).optimizer
        cfg = TrainConfig.for_finetune(iterations=1)
        a = finetune(reference, small_net, unit(16), cfg, Rng(3), optimizer=hist_a)
        b = finetune(reference, small_net, unit(16), cfg, Rng(3), optimizer=hist_b)
        assert checksum(a.params) == checksum(b.params)
        # loading the history instead changes the step
        c = finetune(reference, small_net, unit(16), TrainConfig.for_finetune(iterations=1, reset_optimizer=False),
                     Rng(3), optimizer=hist_a)
        assert checksum(c.params) != checksum(a.params)

    def test_short_reference_used_whole(self, small_net):
        short = Utterance(np.ones((5, 2)), np.array([0]), spans_from_durations([5]), 0)
        res = finetune(short, small_net, unit(16), TrainConfig.for_finetune(iterations=2, crop_frames=32))
        assert len(res.report.losses) == 2
        x, e = ReferenceCrops(short, unit(16), crop=32).batch(Rng(0).stream("b"), 3)
        assert x.shape == (3, 5, 2)
        np.testing.assert_array_equal(e, np.tile(unit(16), (3, 1)))

    def test_only_score_parameters_change(self, tiny_voice):
        v = tiny_voice
        before = {n: checksum(m.params) for n, m in
                  (("clf", v.classifier), ("dur", v.duration), ("enc", v.judge))}
        ref = v.world.render(v.world.heldout_speakers[0], [0, 1, 2, 3, 4, 5], Rng(0).stream("ref"))
        adapted, _ = finetune_voice(v, ref, iterations=3)
        assert checksum(adapted.score.params) != checksum(v.score.params)
        after = {n: checksum(m.params) for n, m in
                 (("clf", adapted.classifier), ("dur", adapted.duration), ("enc", adapted.judge))}
        assert after == before
