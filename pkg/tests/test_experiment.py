"""Experiment grids, metrics CSV and voice checkpoints."""
import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from adaptdiff import experiment
from adaptdiff.experiment import CSV_COLUMNS, Voice, run_experiment
from adaptdiff.storage import CheckpointError, load_checkpoint, save_checkpoint

HEADER = ",".join(CSV_COLUMNS) + "\n"


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def metrics(tiny_voice):
    return run_experiment(tiny_voice)


def test_grid_shapes(tiny_voice, metrics):
    cfg = tiny_voice.config
    rows = parse(metrics)
    sweep = [r for r in rows if r["experiment"] == "finetune_sweep"]
    gammas = [r for r in rows if r["experiment"] == "gamma_sweep"]
    assert len(sweep) == len(cfg.grid_optimizer) * len(cfg.grid_iterations)
    assert len(gammas) == 2 * len(cfg.grid_gamma_s)
    assert {r["reset_optimizer"] for r in sweep} == {"true", "false"}
    assert {r["iterations"] for r in gammas} == {"0", str(cfg.finetune_iterations)}
    for r in rows:
        assert 0.0 <= float(r["frame_error"]) <= 1.0
        assert -1.0 <= float(r["similarity"]) <= 1.0
        assert r["seed"] == str(cfg.seed)


def test_zero_iterations_agree_across_arms(metrics):
    """Both optimizer arms evaluate the untouched model at 0 iterations."""
    rows = [r for r in parse(metrics) if r["experiment"] == "finetune_sweep" and r["iterations"] == "0"]
    assert len(rows) == 2
    assert rows[0]["frame_error"] == rows[1]["frame_error"]
    assert rows[0]["similarity"] == rows[1]["similarity"]


def test_byte_identical_rerun(tiny_voice, metrics, tmp_path):
    again = run_experiment(tiny_voice, tmp_path / "m.csv")
    assert again == metrics
    assert (tmp_path / "m.csv").read_text() == metrics


def test_empty_grid_is_header_only(tiny_voice, tmp_path):
    cfg = tiny_voice.config.with_overrides(experiment=())
    assert run_experiment(tiny_voice, tmp_path / "e.csv", cfg) == HEADER
    assert (tmp_path / "e.csv").read_text() == HEADER
    cfg = tiny_voice.config.with_overrides(experiment=("finetune_sweep",), grid_iterations=())
    assert run_experiment(tiny_voice, config=cfg) == HEADER


def test_appends_after_existing_rows(tiny_voice, tmp_path):
    out = tmp_path / "m.csv"
    old = HEADER + "finetune_sweep,1.0,0.3,0,true,0.5,0.5,0\n"
    out.write_text(old)
    cfg = tiny_voice.config.with_overrides(experiment=("gamma_sweep",), grid_gamma_s=(0.0,))
    text = run_experiment(tiny_voice, out, cfg)
    assert out.read_text() == old + text[len(HEADER):]


def test_foreign_header_rejected(tiny_voice, tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        run_experiment(tiny_voice, tmp_path / "m.csv")


def test_interrupted_run_keeps_completed_rows(tiny_voice, metrics, tmp_path, monkeypatch):
    real = experiment._evaluate
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) > 2 * tiny_voice.config.runs:
            raise KeyboardInterrupt
        return real(*a, **kw)

    monkeypatch.setattr(experiment, "_evaluate", flaky)
    with pytest.raises(KeyboardInterrupt):
        run_experiment(tiny_voice, tmp_path / "m.csv")
    kept = (tmp_path / "m.csv").read_text()
    assert kept == "".join(metrics.splitlines(keepends=True)[:3])


def test_load_arm_needs_optimizer(tiny_voice):
    with pytest.raises(ValueError, match="optimizer"):
        run_experiment(replace(tiny_voice, optimizer=None))
    # the init arm alone does not
    cfg = tiny_voice.config.with_overrides(grid_optimizer=("init",), experiment=("finetune_sweep",),
                                           grid_iterations=(0,))
    assert len(parse(run_experiment(replace(tiny_voice, optimizer=None), config=cfg))) == 1


def test_unknown_grid_entries(tiny_voice):
    with pytest.raises(ValueError):
        run_experiment(tiny_voice, config=tiny_voice.config.with_overrides(experiment=("nope",)))
    with pytest.raises(ValueError):
        run_experiment(tiny_voice, config=tiny_voice.config.with_overrides(grid_optimizer=("warm",)))


class TestVoiceArrays:
    def test_round_trip_through_file(self, tiny_voice, tmp_path):
        save_checkpoint(tmp_path / "v.ckpt", tiny_voice.to_arrays())
        back = Voice.from_arrays(load_checkpoint(tmp_path / "v.ckpt"))
        assert back.stage == tiny_voice.stage == "cfg_stage"
        for a, b in ((back.score, tiny_voice.score), (back.classifier, tiny_voice.classifier),
                     (back.duration, tiny_voice.duration), (back.judge, tiny_voice.judge)):
            assert a.params.keys() == b.params.keys()
            assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert back.optimizer.step == tiny_voice.optimizer.step
        assert all(back.optimizer.m[k].tobytes() == tiny_voice.optimizer.m[k].tobytes() for k in back.optimizer.m)
        assert back.config.hidden == tiny_voice.config.hidden
        assert back.to_arrays().keys() == tiny_voice.to_arrays().keys()

    def test_rebuilt_voice_evaluates_identically(self, tiny_voice, metrics):
        back = Voice.from_arrays(tiny_voice.to_arrays(), tiny_voice.config)
        assert run_experiment(back) == metrics

    def test_missing_model_arrays(self, tiny_voice):
        arrays = {k: v for k, v in tiny_voice.to_arrays().items() if not k.startswith("duration.")}
        with pytest.raises(CheckpointError):
            Voice.from_arrays(arrays)

    def test_without_optimizer(self, tiny_voice):
        arrays = replace(tiny_voice, optimizer=None).to_arrays()
        assert not any(k.startswith("opt.") for k in arrays)
        assert Voice.from_arrays(arrays).optimizer is None

    def test_no_metadata(self):
        with pytest.raises(CheckpointError):
            Voice.from_arrays({"score.w": np.zeros(2)})
