"""Optimizer, curriculum, config parsing, gradient checker, and trainer
round-trips.

The trainer tests run real (tiny) episodes; determinism and resume
equality are asserted bitwise on the parameter arrays because the
serial path promises bit-reproducibility.
"""

import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from sparsemem.container import load_file
from sparsemem.sparse import ContractViolation
from sparsemem.tasks import TaskConfig, batch_episodes, input_width, output_width
from sparsemem.training import (
    CurriculumState,
    LstmOnly,
    OptState,
    TrainConfig,
    Trainer,
    TrainingAbort,
    build_from_config,
    clip_global_norm,
    curriculum_step,
    evaluate,
    gradient_check,
    load_train_config,
    rmsprop_update,
    run_episode,
)

from conftest import random_episode


def tiny_cfg(**kw):
    """A trainer config small enough that one minibatch takes milliseconds.

    threshold is set effectively unreachable so the curriculum stays at
    h0 during smoke runs, keeping episode shapes stable.
    """
    base = dict(task="copy", model="sam", slots=16, task_word=4, lr=1e-3,
                minibatch=2, workers=1, hidden=16, mem_word=8, mem_k=3,
                heads=1, k_link=4, seed=7, checkpoint_every=5,
                threshold=1e-9, patience=50)
    base.update(kw)
    return TrainConfig(**base)


def read_metrics(path):
    """Parse a metrics stream, dropping the wall-clock field (the only
    legitimately non-deterministic one)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rec.pop("wall_time")
            rows.append(rec)
    return rows


# ------------------------------------------------------------- optimizer

class TestClipGlobalNorm:
    def test_scales_to_limit_and_returns_preclip_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        norm = clip_global_norm(grads, 2.5)
        assert norm == 5.0
        np.testing.assert_allclose(grads["a"], [1.5, 0.0], rtol=0, atol=0)
        np.testing.assert_allclose(grads["b"], [[2.0]], rtol=0, atol=0)

    def test_under_the_limit_is_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        norm = clip_global_norm(grads, 2.5)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])

    def test_zero_limit_disables_clipping(self):
        grads = {"a": np.array([10.0])}
        assert clip_global_norm(grads, 0.0) == 10.0
        assert grads["a"][0] == 10.0


class TestRmsprop:
    def test_matches_manual_recurrence(self):
        rng = np.random.default_rng(3)
        params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
        shadow = {k: v.copy() for k, v in params.items()}
        opt = OptState(params)
        mom = opt.new_momentum(params)
        sq_ref = {k: np.zeros_like(v) for k, v in params.items()}
        mom_ref = {k: np.zeros_like(v) for k, v in params.items()}
        lr, decay, eps, beta = 2e-3, 0.85, 1e-6, 0.7
        for _ in range(4):
            grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
            frozen = {k: g.copy() for k, g in grads.items()}
            rmsprop_update(params, grads, opt, mom,
                           lr=lr, decay=decay, eps=eps, beta=beta)
            for k, g in frozen.items():
                sq_ref[k] = decay * sq_ref[k] + (1.0 - decay) * g * g
                mom_ref[k] = beta * mom_ref[k] + lr * g / np.sqrt(sq_ref[k] + eps)
                shadow[k] = shadow[k] - mom_ref[k]
        for k in params:
            np.testing.assert_allclose(params[k], shadow[k], rtol=0, atol=0)
            np.testing.assert_allclose(opt.sq[k], sq_ref[k], rtol=0, atol=0)
            np.testing.assert_allclose(mom[k], mom_ref[k], rtol=0, atol=0)
        assert opt.updates == 4

    def test_first_step_closed_form(self):
        params = {"w": np.array([1.0, -2.0])}
        g = np.array([0.5, -0.25])
        opt = OptState(params)
        mom = opt.new_momentum(params)
        rmsprop_update(params, {"w": g.copy()}, opt, mom,
                       lr=0.01, decay=0.9, eps=1e-6, beta=0.9)
        expect = np.array([1.0, -2.0]) - 0.01 * g / np.sqrt(0.1 * g * g + 1e-6)
        np.testing.assert_allclose(params["w"], expect, rtol=0, atol=0)

    def test_nan_gradient_aborts_before_touching_anything(self):
        # the clean block comes first in iteration order, so a naive
        # implementation would have updated it before seeing the NaN
        params = {"clean": np.ones(3), "dirty": np.ones(2)}
        keep = {k: v.copy() for k, v in params.items()}
        opt = OptState(params)
        mom = opt.new_momentum(params)
        grads = {"clean": np.ones(3), "dirty": np.array([0.0, np.nan])}
        with pytest.raises(TrainingAbort,
                           match=r"NaN gradient in block 'dirty' \(1 of 2"):
            rmsprop_update(params, grads, opt, mom, lr=0.01)
        for k in params:
            np.testing.assert_array_equal(params[k], keep[k])
            np.testing.assert_array_equal(opt.sq[k], np.zeros_like(keep[k]))
        assert opt.updates == 0


# ------------------------------------------------------------ curriculum

class TestCurriculum:
    def test_doubles_exactly_when_full_window_mean_drops(self):
        cur = CurriculumState(h0=1, threshold=0.5, patience=4)
        rng = np.random.default_rng(0)
        for _ in range(4):
            curriculum_step(cur, 0.6, rng)
        assert cur.h == 1
        assert cur.episodes_at_level == 4
        # the window rolls: [0.6, 0.6, 0.6, 0.1] has mean 0.475 < 0.5
        curriculum_step(cur, 0.1, rng)
        assert cur.h == 2
        assert len(cur.window) == 0
        assert cur.episodes_at_level == 0

    def test_mean_exactly_at_threshold_does_not_double(self):
        cur = CurriculumState(h0=1, threshold=0.5, patience=2)
        rng = np.random.default_rng(0)
        curriculum_step(cur, 0.5, rng)
        curriculum_step(cur, 0.5, rng)
        assert cur.h == 1

    def test_partial_window_never_doubles(self):
        cur = CurriculumState(h0=1, threshold=10.0, patience=5)
        rng = np.random.default_rng(0)
        for _ in range(4):
            curriculum_step(cur, 0.0, rng)
        assert cur.h == 1
        curriculum_step(cur, 0.0, rng)
        assert cur.h == 2

    def test_levels_sampled_uniformly_from_zero_to_h(self):
        cur = CurriculumState(h0=4, threshold=1e-12, patience=10)
        rng = np.random.default_rng(99)
        draws = np.array([curriculum_step(cur, 1.0, rng)
                          for _ in range(20000)])
        assert cur.h == 4
        assert draws.min() == 0
        assert draws.max() == 4
        counts = np.bincount(draws, minlength=5)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_h_must_start_at_one(self):
        with pytest.raises(ContractViolation):
            CurriculumState(h0=0)


# ---------------------------------------------------------- config files

class TestConfigFile:
    def test_parse_types_comments_and_defaults(self, tmp_path):
        p = tmp_path / "train.cfg"
        p.write_text("# training setup\n"
                     "lr = 0.002\n"
                     "minibatch=4   # inline comment\n"
                     "task = recall\n"
                     "\n"
                     "h0=2\n")
        cfg = load_train_config(str(p))
        assert cfg.lr == 0.002
        assert cfg.minibatch == 4
        assert cfg.task == "recall"
        assert cfg.h0 == 2
        assert cfg.slots == 64          # untouched default

    def test_unknown_key_is_a_usage_error(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("bogus = 1\n")
        with pytest.raises(ContractViolation,
                           match="unknown config key 'bogus'"):
            load_train_config(str(p))

    def test_line_without_assignment_names_the_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("lr 0.002\n")
        with pytest.raises(ContractViolation, match=r":1: expected key=value"):
            load_train_config(str(p))

    def test_parsed_values_are_validated(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("lr = -0.5\n")
        with pytest.raises(ContractViolation, match="learning-rate"):
            load_train_config(str(p))


@pytest.mark.parametrize("field,value", [
    ("lr", 0.0),
    ("minibatch", 0),
    ("workers", 0),
    ("h0", 0),
    ("patience", 0),
])
def test_train_config_validation(field, value):
    cfg = replace(TrainConfig(), **{field: value})
    with pytest.raises(ContractViolation):
        cfg.validate()


def test_build_from_config_widths_and_knobs():
    cfg = tiny_cfg(task="recall", task_word=5, h0=3, slots=32, heads=2)
    model, tcfg = build_from_config(cfg)
    assert tcfg.task == "recall"
    assert tcfg.level == 3
    assert tcfg.word == 5
    assert model.cfg.controller.input_width == input_width(tcfg) == 7
    assert model.cfg.controller.output_width == output_width(tcfg) == 5
    assert model.cfg.memory.slots == 32
    assert model.cfg.memory.heads == 2


# ------------------------------------------------------ gradient checker

class _ScaledBackward(LstmOnly):
    """Deliberately wrong backward pass: one block 5% too large."""

    def backward(self, fw):
        grads = super().backward(fw)
        grads["wy"] = grads["wy"] * 1.05
        return grads


class TestGradientCheck:
    def test_reference_lstm_passes(self, rng):
        model = LstmOnly(4, 3, hidden=6, seed=2)
        inputs, targets, mask = random_episode(rng, 1, 4, 4, 3)
        report = gradient_check(model, inputs, targets, mask)
        assert report["ok"]
        assert report["unstable"] == 0
        assert report["rel_error"] < 1e-6
        assert report["n_params"] == sum(v.size
                                         for v in model.params.values())
        assert set(report["margins"]) == {"sim", "access", "mix", "usage"}

    def test_detects_a_scaled_backward_pass(self, rng):
        model = _ScaledBackward(4, 3, hidden=6, seed=2)
        inputs, targets, mask = random_episode(rng, 1, 4, 4, 3)
        report = gradient_check(model, inputs, targets, mask)
        assert not report["ok"]
        assert report["rel_error"] > 1e-4


# --------------------------------------------------------- episode runner

class TestRunEpisode:
    def test_debug_hash_clean_run(self):
        model, task = build_from_config(tiny_cfg())
        tcfg = TaskConfig("copy", level=2, word=4)
        inputs, targets, mask, _ = batch_episodes(tcfg, [1, 2])
        loss, grads, fw = run_episode(model, inputs, targets, mask,
                                      debug_hash=True)
        assert np.isfinite(loss)
        assert fw.loss == loss
        assert sorted(grads) == sorted(model.params)

    def test_debug_hash_catches_unreverted_state(self):
        model, task = build_from_config(tiny_cfg())
        inputs, targets, mask, _ = batch_episodes(task, [3])
        orig = model.backward

        def tampered(fw):
            grads = orig(fw)
            fw.states[0].mem[0, 0] += 1e-6
            return grads

        model.backward = tampered
        with pytest.raises(ContractViolation, match="hash changed"):
            run_episode(model, inputs, targets, mask, debug_hash=True)


# ----------------------------------------------------------- the trainer

class TestTrainerSerial:
    def test_two_runs_are_identical(self, tmp_path):
        trainers = []
        for name in ("a", "b"):
            tr = Trainer(tiny_cfg(), str(tmp_path / name))
            summary = tr.train(episodes=6)
            assert summary["episodes"] == 6
            trainers.append(tr)
        pa, pb = trainers[0].model.params, trainers[1].model.params
        for k in pa:
            np.testing.assert_array_equal(pa[k], pb[k])
        assert (read_metrics(trainers[0].metrics_path())
                == read_metrics(trainers[1].metrics_path()))

    def test_resume_is_bit_identical_to_a_straight_run(self, tmp_path):
        straight = Trainer(tiny_cfg(), str(tmp_path / "straight"))
        straight.train(episodes=8)

        split = Trainer(tiny_cfg(), str(tmp_path / "split"))
        split.train(episodes=5)
        resumed = Trainer.resume(str(tmp_path / "split"))
        assert resumed.episode == 5
        resumed.train(episodes=8)

        for k in straight.model.params:
            np.testing.assert_array_equal(straight.model.params[k],
                                          resumed.model.params[k])
            np.testing.assert_array_equal(straight.opt.sq[k],
                                          resumed.opt.sq[k])
            np.testing.assert_array_equal(straight.momentum[k],
                                          resumed.momentum[k])
        assert (read_metrics(straight.metrics_path())
                == read_metrics(resumed.metrics_path()))

    def test_checkpoint_sections(self, tmp_path):
        tr = Trainer(tiny_cfg(), str(tmp_path / "ckpt"))
        tr.train(episodes=2)
        sections = load_file(tr.checkpoint_path())
        assert sections["format"] == "sparsemem-checkpoint-v1"
        assert sections["episode"] == 2
        assert sections["config"]["task"] == "copy"
        assert sections["config"]["slots"] == 16
        for k in tr.model.params:
            np.testing.assert_array_equal(sections["param_" + k],
                                          tr.model.params[k])
            assert "sq_" + k in sections
            assert "mom_" + k in sections
        assert set(sections["curriculum"]) == {"h", "episodes_at_level",
                                               "window"}
        assert "rng_state" in sections
        assert "next_level" in sections

    def test_stop_fn_halts_early(self, tmp_path):
        tr = Trainer(tiny_cfg(), str(tmp_path / "stop"))
        summary = tr.train(episodes=50,
                           stop_fn=lambda trainer, recent: trainer.episode >= 2)
        assert summary["episodes"] == 2

    def test_resume_truncates_metrics_past_the_checkpoint(self, tmp_path):
        tr = Trainer(tiny_cfg(), str(tmp_path / "trunc"))
        with open(tr.metrics_path(), "w") as fh:
            for ep in (1, 2, 3):
                fh.write(json.dumps({"episode": ep, "loss": 1.0}) + "\n")
            fh.write("not json\n")
        tr.episode = 2
        tr._truncate_metrics()
        with open(tr.metrics_path()) as fh:
            rows = [json.loads(line) for line in fh]
        assert [r["episode"] for r in rows] == [1, 2]


class TestHogwild:
    def test_two_workers_complete_the_budget(self, tmp_path):
        tr = Trainer(tiny_cfg(workers=2, checkpoint_every=100),
                     str(tmp_path / "hog"))
        summary = tr.train(episodes=4)
        assert summary["episodes"] >= 4
        rows = read_metrics(tr.metrics_path())
        assert len(rows) == summary["episodes"]
        assert all(np.isfinite(r["loss"]) for r in rows)

    def test_worker_exception_propagates_to_the_caller(self, tmp_path):
        tr = Trainer(tiny_cfg(workers=2), str(tmp_path / "boom"))

        def bomb(trainer, recent):
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="boom"):
            tr.train(episodes=50, stop_fn=bomb)


# ------------------------------------------------------------- evaluation

class TestEvaluate:
    def test_level_floor(self):
        model, task = build_from_config(tiny_cfg())
        with pytest.raises(ContractViolation, match="levels start at 1"):
            evaluate(model, task, [0])

    def test_untrained_model_sits_near_chance(self):
        model, task = build_from_config(tiny_cfg(seed=11))
        before = {k: v.copy() for k, v in model.params.items()}
        rows = evaluate(model, task, [3], episodes=10, seed=5)
        assert rows[0]["level"] == 3
        assert rows[0]["episodes"] == 10
        assert 0.3 < rows[0]["mean_bit_error"] < 0.7
        for k, v in model.params.items():
            np.testing.assert_array_equal(v, before[k])

    def test_one_row_per_level(self):
        model, task = build_from_config(tiny_cfg())
        rows = evaluate(model, task, [1, 2, 4], episodes=2, seed=3)
        assert [r["level"] for r in rows] == [1, 2, 4]
