import numpy as np
import pytest

from headspan.basis import (BasisBank, BlendWeights, PruneLog, PruneSchedule,
                            blend_backward, blend_features, compose_backward,
                            compose_moment, prune_step)
from headspan.encoding import HashGrid, HashGridConfig, hash_encode
from headspan.errors import ContractViolationError
from headspan.networks import DeformDeltas
from headspan.rendering import GradientBuffer
from conftest import random_surfels

CFG = HashGridConfig(levels=3, table_size=2 ** 9, features_per_entry=2,
                     coarsest_resolution=4, finest_resolution=16)


def make_bank(n=3, seed=0):
    return BasisBank.create(n, CFG, np.random.default_rng(seed))


class TestBlend:
    def test_single_basis_identity(self):
        bank = make_bank(1)
        pos = np.random.default_rng(1).uniform(0, 1, (7, 3))
        f, _ = blend_features(bank, np.array([1.0]), pos)
        np.testing.assert_allclose(f, hash_encode(bank.bases[0], pos),
                                   atol=1e-15)

    def test_identical_tables_half_weights(self):
        bank = make_bank(2, seed=2)
        bank.bases[1].tables[:] = bank.bases[0].tables
        pos = np.random.default_rng(3).uniform(0, 1, (5, 3))
        f, _ = blend_features(bank, np.array([0.5, 0.5]), pos)
        np.testing.assert_allclose(f, hash_encode(bank.bases[0], pos),
                                   atol=1e-12)

    def test_brute_force_sum_oracle(self):
        bank = make_bank(3, seed=4)
        rng = np.random.default_rng(5)
        w = rng.normal(0, 1, 3)
        pos = rng.uniform(0, 1, (6, 3))
        f, _ = blend_features(bank, w, pos)
        expect = sum(w[i] * hash_encode(bank.bases[i], pos) for i in range(3))
        np.testing.assert_allclose(f, expect, atol=1e-12)

    def test_inactive_bases_contribute_nothing(self):
        bank = make_bank(3, seed=6)
        bank.active_mask[1] = False
        pos = np.random.default_rng(7).uniform(0, 1, (4, 3))
        f, _ = blend_features(bank, np.array([0.3, 100.0, 0.7]), pos)
        expect = (0.3 * hash_encode(bank.bases[0], pos)
                  + 0.7 * hash_encode(bank.bases[2], pos))
        np.testing.assert_allclose(f, expect, atol=1e-12)

    def test_linear_in_weights(self):
        bank = make_bank(3, seed=8)
        rng = np.random.default_rng(9)
        w1, w2 = rng.normal(0, 1, (2, 3))
        pos = rng.uniform(0, 1, (5, 3))
        f12, _ = blend_features(bank, w1 + w2, pos)
        f1, _ = blend_features(bank, w1, pos)
        f2, _ = blend_features(bank, w2, pos)
        np.testing.assert_allclose(f12, f1 + f2, atol=1e-9)

    def test_backward_weights_and_inactive(self):
        bank = make_bank(3, seed=10)
        bank.active_mask[2] = False
        rng = np.random.default_rng(11)
        w = rng.normal(0, 1, 3)
        pos = rng.uniform(0, 1, (4, 3))
        f, cache = blend_features(bank, w, pos)
        up = rng.normal(0, 1, f.shape)
        d_tables, d_w, d_pos = blend_backward(bank, cache, up)
        assert set(d_tables) == {0, 1}
        assert d_w[2] == 0.0
        for i in (0, 1):
            expect = float(np.sum(hash_encode(bank.bases[i], pos) * up))
            assert abs(d_w[i] - expect) < 1e-9


class TestPrune:
    def schedule(self):
        return PruneSchedule(threshold=1e-4, start_iteration=10000,
                             interval=10000)

    def test_no_prune_before_start(self):
        bank = make_bank(3)
        w = BlendWeights(np.zeros((2, 3)))
        mask = prune_step(bank, w, 9999, self.schedule())
        assert mask.all()

    def test_prunes_only_below_threshold_basis(self):
        bank = make_bank(3)
        weights = np.full((2, 3), 0.5)
        weights[:, 2] = 5e-5
        w = BlendWeights(weights)
        log = PruneLog()
        prune_step(bank, w, 10000, self.schedule(), log=log)
        assert list(bank.active_mask) == [True, True, False]
        assert len(log.events) == 1
        assert log.events[0].basis == 2
        assert log.events[0].iteration == 10000
        np.testing.assert_allclose(log.events[0].lifestage_weights,
                                   [5e-5, 5e-5])

    def test_requires_all_lifestages_below(self):
        bank = make_bank(3)
        weights = np.full((2, 3), 0.5)
        weights[0, 2] = 5e-5  # only one lifestage below kappa
        w = BlendWeights(weights)
        prune_step(bank, w, 10000, self.schedule())
        assert bank.active_mask.all()

    def test_checkpoint_timing(self):
        bank = make_bank(2)
        w = BlendWeights(np.zeros((2, 2)))
        sched = self.schedule()
        # off-schedule iterations never prune
        for it in (10001, 15000, 19999):
            b = make_bank(2)
            prune_step(b, w, it, sched)
            assert b.active_mask.all()
        # on-schedule iterations do (with last-basis protection)
        b = make_bank(2)
        prune_step(b, w, 20000, sched)
        assert b.active_count == 1

    def test_last_basis_protection_keeps_largest(self):
        bank = make_bank(3)
        weights = np.array([[1e-5, 3e-5, 2e-5],
                            [2e-5, 4e-5, 1e-5]])
        w = BlendWeights(weights)
        prune_step(bank, w, 10000, self.schedule())
        assert list(bank.active_mask) == [False, True, False]

    def test_monotone_deactivation(self):
        bank = make_bank(4)
        rng = np.random.default_rng(12)
        sched = self.schedule()
        seen_inactive = set()
        for step in range(4):
            weights = np.abs(rng.normal(0, 1e-4, (3, 4)))
            prune_step(bank, BlendWeights(weights), 10000 + 10000 * step,
                       sched)
            inactive = set(np.nonzero(~bank.active_mask)[0])
            assert seen_inactive <= inactive  # never reactivates
            seen_inactive = inactive
            assert bank.active_count >= 1

    def test_log_round_trip(self, tmp_path):
        bank = make_bank(3)
        weights = np.full((2, 3), 0.5)
        weights[:, 0] = 1e-6
        log = PruneLog()
        prune_step(bank, BlendWeights(weights), 10000, self.schedule(), log)
        p = tmp_path / "report.json"
        log.save(p)
        loaded = PruneLog.load(p)
        assert loaded.events[0].basis == 0
        assert loaded.events[0].iteration == 10000


class TestComposeMoment:
    def test_zero_deltas_identity(self):
        s = random_surfels(6, seed=1)
        d = DeformDeltas.zeros(6, 4)
        out, _ = compose_moment(s, d)
        for name in ("centers", "orientations", "log_scales",
                     "opacity_logits", "color_coeffs"):
            np.testing.assert_array_equal(getattr(out, name),
                                          getattr(s, name))

    def test_locality_of_center_shift(self):
        s = random_surfels(5, seed=2)
        d = DeformDeltas.zeros(5, 4)
        d.centers[2] = (0.1, 0, 0)
        out, _ = compose_moment(s, d)
        np.testing.assert_allclose(out.centers[2] - s.centers[2],
                                   [0.1, 0, 0], atol=1e-15)
        others = [i for i in range(5) if i != 2]
        np.testing.assert_array_equal(out.centers[others], s.centers[others])

    def test_orientation_renormalized(self):
        s = random_surfels(3, seed=3)
        d = DeformDeltas.zeros(3, 4)
        d.orientations[1] = (0.4, -0.2, 0.1, 0.3)
        out, _ = compose_moment(s, d)
        norms = np.linalg.norm(out.orientations, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        manual = s.orientations[1] + d.orientations[1]
        manual /= np.linalg.norm(manual)
        np.testing.assert_allclose(out.orientations[1], manual, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        s = random_surfels(4, seed=4)
        d = DeformDeltas.zeros(3, 4)
        with pytest.raises(ContractViolationError):
            compose_moment(s, d)

    def test_backward_splits_gradient(self):
        s = random_surfels(4, seed=5)
        d = DeformDeltas.zeros(4, 4)
        d.orientations[:] = np.random.default_rng(6).normal(0, 0.1, (4, 4))
        out, cache = compose_moment(s, d)
        g = GradientBuffer.zeros_like(out)
        g.centers[:] = 1.0
        g.orientations[:] = np.random.default_rng(7).normal(0, 1, (4, 4))
        d_canon, d_deltas = compose_backward(cache, g)
        np.testing.assert_array_equal(d_canon.centers, d_deltas.centers)
        np.testing.assert_array_equal(d_canon.orientations,
                                      d_deltas.orientations)
        # normalization projects the gradient onto the tangent space
        dots = np.sum(d_canon.orientations * out.orientations, axis=-1)
        np.testing.assert_allclose(dots, 0.0, atol=1e-12)
