import os

import numpy as np
import pytest

from conftest import make_tiny_trainer, random_surfels, tiny_train_config
from headspan.errors import ContractViolationError
from headspan.surfels import activate_opacity, deactivate_opacity
from headspan.training import (Adam, DensifyConfig, densify_and_prune,
                               evaluate, exponential_lr, load_checkpoint,
                               psnr, save_checkpoint)


class TestWarmup:
    def test_zero_iterations_returns_model_unchanged(self, tiny_dataset,
                                                     tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path, warmup_iterations=0)
        before = {n: getattr(tr.model.surfels, n).copy()
                  for n in ("centers", "orientations", "log_scales",
                            "opacity_logits", "color_coeffs")}
        tr.warmup()
        for n, arr in before.items():
            np.testing.assert_array_equal(getattr(tr.model.surfels, n), arr)

    def test_warmup_touches_only_surfels(self, tiny_dataset, tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path, warmup_iterations=4)
        tables = [b.tables.copy() for b in tr.model.bank.bases]
        weights = tr.model.blend.weights.copy()
        emb = tr.model.nets.residual_embeddings.copy()
        net_w = [w.copy() for w in tr.model.nets.deform_mlp.weights]
        surfels_before = tr.model.surfels.centers.copy()
        tr.warmup()
        for b, t in zip(tr.model.bank.bases, tables):
            np.testing.assert_array_equal(b.tables, t)
        np.testing.assert_array_equal(tr.model.blend.weights, weights)
        np.testing.assert_array_equal(tr.model.nets.residual_embeddings, emb)
        for w, w0 in zip(tr.model.nets.deform_mlp.weights, net_w):
            np.testing.assert_array_equal(w, w0)
        assert not np.array_equal(tr.model.surfels.centers, surfels_before)

    def test_warmup_reports_zero_regulation(self, tiny_dataset, tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path, warmup_iterations=3)
        tr.warmup()
        import csv

        with open(tr._log_path) as f:
            rows = list(csv.DictReader(f))
        assert all(float(r["regulation"]) == 0.0 for r in rows
                   if r["phase"] == "warmup")


class TestTrainStep:
    def test_two_identical_runs_bit_identical(self, tiny_dataset, tmp_path):
        def run(sub):
            tr = make_tiny_trainer(tiny_dataset, tmp_path / sub)
            tr.warmup()
            for _ in range(6):
                tr.train_step(tiny_dataset.sample_uniform(tr.rng,
                                                          tr._train_pool))
            return open(tr._log_path).read()

        assert run("a") == run("b")

    def test_full_chain_blend_weight_gradient_fd(self, tiny_dataset,
                                                 tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path)
        tr.warmup()
        for _ in range(3):
            tr.train_step(tiny_dataset.sample_uniform(tr.rng, tr._train_pool))
        frame = tiny_dataset.train_frames()[0]
        ls = tiny_dataset.frames[frame].lifestage
        total, report, grads, _ = tr.frame_loss(frame, "formal")
        an = grads["blend_row"]
        j = int(np.argmax(np.abs(an)))
        h = 1e-4
        w = tr.model.blend.weights
        orig = w[ls, j]
        w[ls, j] = orig + h
        lp = tr.frame_loss(frame, "formal")[0]
        w[ls, j] = orig - h
        lm = tr.frame_loss(frame, "formal")[0]
        w[ls, j] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - an[j]) / max(abs(fd), 1e-9) < 1e-3

    def test_non_finite_loss_aborts_with_diagnostics(self, tiny_dataset,
                                                     tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path)
        tr.model.surfels.color_coeffs[:, 0, :] = np.nan
        with pytest.raises(ContractViolationError, match="non-finite"):
            tr.frame_loss(tiny_dataset.train_frames()[0], "warmup")

    def test_prune_report_gains_entry_at_schedule_start(self, tiny_dataset,
                                                        tmp_path):
        # a basis below the threshold for every lifestage at the schedule's
        # start iteration lands in the report after that train step
        tr = make_tiny_trainer(tiny_dataset, tmp_path,
                               formal_iterations=10001)
        tr.phase = "formal"
        tr.iteration = 9999
        tr.model.blend.weights[:, 1] = 5e-5
        assert len(tr.prune_log.events) == 0
        tr.train_step(tiny_dataset.train_frames()[0])  # iteration 10000
        assert len(tr.prune_log.events) == 1
        assert tr.prune_log.events[0].iteration == 10000
        assert tr.prune_log.events[0].basis == 1
        assert (tmp_path / "prune_report.json").exists()
        assert not tr.model.bank.active_mask[1]


class TestDensify:
    def base(self, n=10, seed=0):
        s = random_surfels(n, seed=seed, scale_range=(0.01, 0.02))
        s.opacity_logits[:] = deactivate_opacity(0.5)
        return s

    def cfg(self):
        return DensifyConfig(interval=100, grad_threshold=2e-4,
                             opacity_prune_threshold=5e-3,
                             stop_fraction=0.6, percent_dense=0.01)

    def test_unchanged_when_quiet(self):
        s = self.base()
        grads = np.full((10, 3), 1e-6)
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        assert out.count == 10 and n_new == 0
        np.testing.assert_array_equal(out.centers, s.centers)

    def test_clone_small_surfel(self):
        s = self.base()
        grads = np.zeros((10, 3))
        grads[3] = (1e-3, 0, 0)  # above threshold; scale is small -> clone
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        assert out.count == 11 and n_new == 1
        # clone offset along the (descent) gradient direction
        offset = out.centers[-1] - s.centers[3]
        assert np.linalg.norm(offset) > 0
        assert abs(np.dot(offset / np.linalg.norm(offset), [-1, 0, 0]) - 1) \
            < 1e-9

    def test_split_large_surfel(self):
        s = self.base()
        s.log_scales[4] = np.log(0.5)  # large vs percent_dense * extent
        grads = np.zeros((10, 3))
        grads[4] = (0, 1e-3, 0)
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        # parent removed, two children added
        assert n_new == 2
        assert out.count == 11
        child_scales = np.exp(out.log_scales[-2:])
        np.testing.assert_allclose(child_scales, 0.5 / 1.6, atol=1e-12)

    def test_prune_transparent(self):
        s = self.base()
        s.opacity_logits[7] = deactivate_opacity(1e-4)
        grads = np.zeros((10, 3))
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        assert out.count == 9
        assert 7 not in keep

    def test_inactive_after_stop_iteration(self):
        s = self.base()
        s.opacity_logits[7] = deactivate_opacity(1e-4)
        grads = np.full((10, 3), 1.0)
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 601, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        assert out.count == 10 and n_new == 0

    def test_count_floor(self):
        s = self.base()
        s.opacity_logits[:] = deactivate_opacity(1e-4)  # all prunable
        grads = np.zeros((10, 3))
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, self.cfg(),
            scene_extent=2.0, initial_count=10, formal_iterations=1000)
        assert out.count >= 10 // 4

    def test_count_cap(self):
        s = self.base(n=20)
        grads = np.full((20, 3), 1e-2)  # everything wants to densify
        cfg = self.cfg()
        out, keep, n_new = densify_and_prune(
            s, grads, activate_opacity(s.opacity_logits), 100, cfg,
            scene_extent=2.0, initial_count=1, formal_iterations=1000)
        assert out.count <= int(cfg.max_multiplier * 1)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tiny_dataset, tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path)
        tr.warmup()
        for _ in range(3):
            tr.train_step(tiny_dataset.sample_uniform(tr.rng,
                                                      tr._train_pool))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        tr.save(p1)
        ck = load_checkpoint(p1)
        save_checkpoint(p2, ck.model, ck.adam, ck.config, ck.iteration,
                        ck.phase, ck.rng,
                        grad_accum=ck.extras["grad_accum"],
                        grad_count=ck.extras["grad_count"],
                        initial_surfels=ck.extras["initial_surfels"],
                        prune_log=ck.prune_log)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_continues_bit_identically(self, tiny_dataset, tmp_path):
        from headspan.training import Trainer

        tr = make_tiny_trainer(tiny_dataset, tmp_path / "w1")
        tr.warmup()
        for _ in range(4):
            tr.train_step(tiny_dataset.sample_uniform(tr.rng,
                                                      tr._train_pool))
        p = tmp_path / "mid.ckpt"
        tr.save(p)
        tr2 = Trainer.resume(p, tiny_dataset, tmp_path / "w2")
        for _ in range(4):
            l1 = tr.train_step(tiny_dataset.sample_uniform(tr.rng,
                                                           tr._train_pool))
            l2 = tr2.train_step(tiny_dataset.sample_uniform(tr2.rng,
                                                            tr2._train_pool))
            assert l1 == l2

    def test_config_hash_mismatch_rejected(self, tiny_dataset, tmp_path):
        from headspan.training import Trainer

        tr = make_tiny_trainer(tiny_dataset, tmp_path / "w1")
        p = tmp_path / "c.ckpt"
        tr.save(p)
        other = tiny_train_config(seed=999)
        with pytest.raises(ContractViolationError):
            Trainer.resume(p, tiny_dataset, tmp_path / "w2", config=other)

    def test_round_trip_preserves_state(self, tiny_dataset, tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path)
        tr.warmup()
        p = tmp_path / "d.ckpt"
        tr.save(p)
        ck = load_checkpoint(p)
        np.testing.assert_array_equal(ck.model.surfels.centers,
                                      tr.model.surfels.centers)
        np.testing.assert_array_equal(ck.model.blend.weights,
                                      tr.model.blend.weights)
        assert ck.model.lifestage_names == tr.model.lifestage_names
        assert ck.iteration == tr.iteration
        assert ck.phase == tr.phase


class TestTrainingProgress:
    """Desk-scale versions of the training-progress properties, measured
    as a median over three seeds."""

    def test_warmup_loss_decreases(self, tiny_dataset, tmp_path):
        import csv

        improved = []
        for seed in (1, 2, 3):
            tr = make_tiny_trainer(tiny_dataset, tmp_path / f"w{seed}",
                                   warmup_iterations=40, seed=seed)
            tr.warmup()
            with open(tr._log_path) as f:
                totals = [float(r["total"]) for r in csv.DictReader(f)]
            early = float(np.mean(totals[:5]))
            late = float(np.mean(totals[-5:]))
            improved.append(late < early)
        assert np.median(improved) == 1.0

    def test_holdout_psnr_improves(self, tiny_dataset, tmp_path):
        overall = []
        for seed in (1, 2, 3):
            tr = make_tiny_trainer(tiny_dataset, tmp_path / f"p{seed}",
                                   warmup_iterations=10,
                                   formal_iterations=40, seed=seed)
            before = [r for r in tr.evaluate() if r["kind"] == "overall"][0]
            tr.warmup()
            for _ in range(40):
                tr.train_step(tiny_dataset.sample_uniform(tr.rng,
                                                          tr._train_pool))
            after = [r for r in tr.evaluate() if r["kind"] == "overall"][0]
            overall.append(after["psnr"] - before["psnr"])
        assert np.median(overall) > 0


class TestEvaluate:
    def test_perfect_prediction_caps_psnr(self):
        assert psnr(np.ones((4, 4, 3)), np.ones((4, 4, 3))) == 100.0

    def test_uniform_error_psnr(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_report_schema(self, tiny_dataset, tmp_path):
        tr = make_tiny_trainer(tiny_dataset, tmp_path)
        rows = evaluate(tr.model, tiny_dataset, tiny_dataset.holdout_frames())
        kinds = [r["kind"] for r in rows]
        assert kinds.count("lifestage") == 2
        assert kinds.count("overall") == 1
        assert kinds.count("frame") == len(tiny_dataset.holdout_frames())


class TestAdam:
    def test_matches_reference_formula(self):
        adam = Adam(beta1=0.9, beta2=0.999, eps=1e-15)
        p = np.array([1.0, 2.0])
        g = np.array([0.1, -0.2])
        adam.step("p", p, g, lr=0.01)
        m = 0.1 * g
        v = 0.001 * g * g
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        expect = np.array([1.0, 2.0]) - 0.01 * mhat / (np.sqrt(vhat) + 1e-15)
        np.testing.assert_allclose(p, expect, atol=1e-15)

    def test_freeze_mask(self):
        adam = Adam()
        p = np.array([1.0, 2.0])
        adam.step("p", p, np.array([1.0, 1.0]), lr=0.1,
                  freeze=np.array([False, True]))
        assert p[1] == 2.0
        assert p[0] != 1.0
        assert adam.v["p"][1] == 0.0

    def test_lr_schedule_endpoints(self):
        assert abs(exponential_lr(1e-3, 1e-5, 0.0) - 1e-3) < 1e-18
        assert abs(exponential_lr(1e-3, 1e-5, 1.0) - 1e-5) < 1e-18
