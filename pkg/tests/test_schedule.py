import numpy as np
import pytest

from splatmask.errors import DegenerateSceneError, ParameterError
from splatmask.model import Scene
from splatmask.optim import Adam
from splatmask.schedule import (Action, ScheduleConfig, actions_at, densify,
                                prune)

from oracles import random_scene


class TestActionsAt:
    def test_densify_window_fires_both(self):
        cfg = ScheduleConfig()
        assert actions_at(14900, cfg) == {Action.DENSIFY, Action.PRUNE}

    def test_late_phase_prunes_only(self):
        cfg = ScheduleConfig()
        assert actions_at(16000, cfg) == {Action.PRUNE}

    def test_recovery_phase(self):
        cfg = ScheduleConfig()
        assert actions_at(31000, cfg) == {Action.RECOVERY_ONLY}

    def test_off_interval_iterations_do_nothing(self):
        cfg = ScheduleConfig()
        assert actions_at(14901, cfg) == set()
        assert actions_at(100, cfg) == set()    # before densify_start
        assert actions_at(16500, cfg) == set()  # off the late interval

    def test_is_pure(self):
        cfg = ScheduleConfig()
        for it in (0, 500, 15000, 15500, 29999, 30000, 30001, 42):
            assert actions_at(it, cfg) == actions_at(it, cfg)

    def test_validation(self):
        with pytest.raises(ParameterError):
            ScheduleConfig(densify_start=100, densify_end=50)
        with pytest.raises(ParameterError):
            ScheduleConfig(densify_interval=0)
        with pytest.raises(ParameterError):
            ScheduleConfig(densify_end=40000)  # beyond total


class TestPrune:
    def test_saturated_low_logits_removed(self):
        scene = random_scene(np.random.default_rng(0), 30)
        scene.mask_logits[:] = -20.0
        scene.mask_logits[:3] = 20.0
        out, report, kept = prune(scene, np.random.default_rng(1), 10)
        assert len(out) == 3
        assert report.n_before == 30 and report.n_after == 3
        assert set(out.uids) == {0, 1, 2}
        assert len(report.removed_uids) == 27
        assert report.checksum

    def test_saturated_high_never_removed(self):
        scene = random_scene(np.random.default_rng(2), 50)
        scene.mask_logits[:] = 20.0
        out, report, _ = prune(scene, np.random.default_rng(3), 10)
        assert len(out) == 50
        assert report.removed_uids == []

    def test_half_probability_removal_rate(self):
        # p=0.5, 10 draws: removal probability 2^-10, Monte-Carlo within 10%
        n = 1_000_000
        scene = Scene(
            positions=np.zeros((n, 3)), log_scales=np.zeros((n, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
            opacity_logits=np.zeros(n), color_coeffs=np.zeros((n, 1, 3)),
            mask_logits=np.zeros(n), uids=np.arange(n), sh_degree=0, next_uid=n)
        out, report, _ = prune(scene, np.random.default_rng(4), 10)
        rate = (n - len(out)) / n
        assert rate == pytest.approx(2.0 ** -10, rel=0.10)

    def test_survivors_untouched(self):
        scene = random_scene(np.random.default_rng(5), 40)
        scene.mask_logits[:] = np.random.default_rng(6).uniform(-3, 3, 40)
        out, report, kept = prune(scene, np.random.default_rng(7), 10)
        np.testing.assert_array_equal(out.positions, scene.positions[kept])
        np.testing.assert_array_equal(out.mask_logits, scene.mask_logits[kept])
        np.testing.assert_array_equal(out.uids, scene.uids[kept])

    def test_pruning_everything_is_an_error(self):
        scene = random_scene(np.random.default_rng(8), 5)
        scene.mask_logits[:] = -20.0
        with pytest.raises(DegenerateSceneError):
            prune(scene, np.random.default_rng(9), 10)


class TestDensify:
    def _cfg(self):
        return ScheduleConfig(densify_start=1, densify_end=10, total_iters=20,
                              recovery_iters=0, grad_threshold=1e-3)

    def test_no_gaussian_over_threshold(self):
        scene = random_scene(np.random.default_rng(10), 12)
        out, rep, src = densify(scene, np.zeros(12), self._cfg(), 2.0,
                                np.random.default_rng(11))
        assert len(out) == 12
        assert rep.n_cloned == rep.n_split == 0
        np.testing.assert_array_equal(out.positions, scene.positions)
        np.testing.assert_array_equal(src, np.arange(12))

    def test_clone_small_splat(self):
        scene = random_scene(np.random.default_rng(12), 6,
                             scale_range=(0.01, 0.012))
        grads = np.zeros(6)
        grads[2] = 1.0
        out, rep, src = densify(scene, grads, self._cfg(), 2.0,
                                np.random.default_rng(13))
        assert len(out) == 7
        assert rep.n_cloned == 1 and rep.n_split == 0
        # clone appended at the end, offset within one parent stddev
        np.testing.assert_array_equal(out.mask_logits[6], scene.mask_logits[2])
        offset = out.positions[6] - scene.positions[2]
        max_sigma = np.exp(scene.log_scales[2]).max()
        assert 0 < np.linalg.norm(offset) <= np.sqrt(3) * max_sigma + 1e-12
        assert src[6] == -1

    def test_split_large_splat(self):
        scene = random_scene(np.random.default_rng(14), 6,
                             scale_range=(0.2, 0.3))
        grads = np.zeros(6)
        grads[4] = 1.0
        out, rep, src = densify(scene, grads, self._cfg(), 2.0,
                                np.random.default_rng(15))
        assert len(out) == 7  # parent removed, two children added
        assert rep.n_split == 1 and rep.n_cloned == 0
        children = out.positions[5:]
        assert children.shape == (2, 3)
        np.testing.assert_allclose(np.exp(out.log_scales[5:]),
                                   np.tile(np.exp(scene.log_scales[4]) / 1.6, (2, 1)),
                                   rtol=1e-12)
        np.testing.assert_array_equal(out.mask_logits[5:],
                                      np.full(2, scene.mask_logits[4]))
        assert not np.any(out.uids[5:] == scene.uids[4])  # parent gone
        assert list(src[5:]) == [-1, -1]

    def test_children_inherit_mask_logits(self):
        scene = random_scene(np.random.default_rng(16), 8)
        scene.mask_logits[:] = np.linspace(-2, 2, 8)
        grads = np.full(8, 1.0)
        out, rep, src = densify(scene, grads, self._cfg(), 2.0,
                                np.random.default_rng(17))
        for i, s in enumerate(src):
            if s >= 0:
                assert out.mask_logits[i] == scene.mask_logits[s]


class TestAdamRemap:
    def test_state_follows_rows(self):
        opt = Adam({"x": 0.1})
        x = np.array([1.0, 2.0, 3.0])
        g = np.array([0.5, -0.5, 1.0])
        opt.step({"x": x}, {"x": g})
        m_before = opt.m["x"].copy()
        opt.remap(np.array([2, 0, -1]))
        np.testing.assert_array_equal(opt.m["x"][:2], m_before[[2, 0]])
        assert opt.m["x"][2] == 0.0 and opt.v["x"][2] == 0.0

    def test_step_moves_parameters(self):
        opt = Adam({"x": 0.1})
        x = np.zeros(4)
        opt.step({"x": x}, {"x": np.ones(4)})
        assert np.all(x < 0)

    def test_skip_leaves_group_alone(self):
        opt = Adam({"x": 0.1, "y": 0.1})
        x, y = np.zeros(2), np.zeros(2)
        opt.step({"x": x, "y": y}, {"x": np.ones(2), "y": np.ones(2)}, skip={"y"})
        assert np.all(x != 0) and np.all(y == 0)
