import numpy as np
import pytest

from splatmask.errors import OracleError
from splatmask.gradients import (GradAccumulator, alpha_backward,
                                 density_scaling_samples, fd_oracle,
                                 grad_alpha_mask_cumulative,
                                 grad_alpha_mask_inverse,
                                 grad_alpha_mask_proposed, grad_mask_cumulative,
                                 grad_mask_inverse, grad_mask_proposed,
                                 ray_grad_mask_cumulative, ray_grad_mask_inverse,
                                 ray_grad_mask_proposed, rgb_backward,
                                 verify_mask_gradients, _single_ray)
from splatmask.projection import Camera, project_scene
from splatmask.rasterizer import (RenderOptions, render, render_mask_cumulative,
                                  render_mask_inverse, render_mask_proposed)

from oracles import random_scene

LN3 = np.log(3.0)


class TestFdOracle:
    def test_polynomial(self):
        g = fd_oracle(lambda t: float(t[0] ** 2), np.array([3.0]))
        assert g[0] == pytest.approx(6.0, abs=1e-9)

    def test_constant(self):
        g = fd_oracle(lambda t: 1.25, np.ones(5))
        np.testing.assert_array_equal(g, 0.0)

    def test_non_finite_forward_raises(self):
        with pytest.raises(OracleError):
            fd_oracle(lambda t: float("nan"), np.ones(2))

    def test_matches_proposed_forward(self):
        rng = np.random.default_rng(0)
        alpha = rng.uniform(0.05, 0.9, 12)
        mask = rng.uniform(0.1, 0.9, 12)
        fd = fd_oracle(lambda m: render_mask_proposed(alpha, m), mask)
        np.testing.assert_allclose(ray_grad_mask_proposed(alpha, mask), fd,
                                   rtol=1e-7, atol=1e-10)


class TestWorkedValues:
    def test_proposed_two_fragment_ray(self):
        g = ray_grad_mask_proposed([0.5, 0.5], [1.0, 1.0])
        np.testing.assert_allclose(g, [0.75 / LN3, 0.75 / LN3], rtol=1e-12)
        assert g[0] == pytest.approx(0.6827, abs=1e-4)

    def test_proposed_single_opaque_fragment(self):
        # alpha 1 pre-clamp: self term (1-1)=0, no tail
        g = ray_grad_mask_proposed([1.0 - 1e-12], [1.0])
        assert g[0] == pytest.approx(0.0, abs=1e-9)

    def test_inverse_single_fragment_is_one(self):
        for a in (0.05, 0.4, 0.9):
            assert ray_grad_mask_inverse([a], [1.0])[0] == pytest.approx(1.0, rel=1e-5)

    def test_inverse_tiny_alpha_stays_finite(self):
        g = ray_grad_mask_inverse([1e-12, 1e-12], [1.0, 1.0])
        assert np.all(np.isfinite(g))

    def test_cumulative_two_fragment_ray(self):
        g = ray_grad_mask_cumulative([0.5, 0.5], [1.0, 1.0])
        assert g[0] == pytest.approx(0.5 / LN3, rel=1e-12)
        assert g[0] == pytest.approx(0.4551, abs=1e-4)

    def test_cumulative_front_fragment_has_no_self_term(self):
        rng = np.random.default_rng(1)
        alpha = rng.uniform(0.1, 0.9, 6)
        mask = rng.uniform(0.2, 0.9, 6)
        g = ray_grad_mask_cumulative(alpha, mask)
        f = _single_ray(alpha, mask)
        occl = alpha[0] / (1 - alpha[0] * mask[0]) * np.sum(mask[1:] * f.T[1:])
        assert g[0] == pytest.approx(occl / np.log(7.0), rel=1e-12)


class TestFiniteDifferenceAgreement:
    @pytest.mark.parametrize("case", ["proposed", "inverse", "cumulative"])
    def test_random_rays(self, case):
        fwd = {"proposed": render_mask_proposed,
               "inverse": render_mask_inverse,
               "cumulative": render_mask_cumulative}[case]
        bwd = {"proposed": ray_grad_mask_proposed,
               "inverse": ray_grad_mask_inverse,
               "cumulative": ray_grad_mask_cumulative}[case]
        rng = np.random.default_rng(2)
        for _ in range(40):
            n = int(rng.integers(1, 33))
            alpha = rng.uniform(0.01, 0.99, n)
            mask = rng.uniform(0.05, 0.95, n)
            g = bwd(alpha, mask)
            fd = fd_oracle(lambda m: fwd(alpha, m), mask)
            scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-3)
            assert np.max(np.abs(g - fd) / scale) < 1e-6

    @pytest.mark.parametrize("case", ["proposed", "inverse", "cumulative"])
    def test_alpha_gradients_optional_path(self, case):
        fwd = {"proposed": render_mask_proposed,
               "inverse": render_mask_inverse,
               "cumulative": render_mask_cumulative}[case]
        bwd = {"proposed": grad_alpha_mask_proposed,
               "inverse": grad_alpha_mask_inverse,
               "cumulative": grad_alpha_mask_cumulative}[case]
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(1, 24))
            alpha = rng.uniform(0.05, 0.9, n)
            mask = rng.uniform(0.1, 0.9, n)
            g = bwd(_single_ray(alpha, mask))
            fd = fd_oracle(lambda a: fwd(a, mask), alpha)
            scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-3)
            assert np.max(np.abs(g - fd) / scale) < 1e-6

    def test_verification_runner(self):
        reports = verify_mask_gradients(n_rays=60, seed=11)
        assert {r.name for r in reports} == {"proposed", "inverse", "cumulative"}
        for r in reports:
            assert r.passes(), (r.name, r.max_rel_err, r.max_abs_err_small)


class TestImageLevelGradients:
    def _setup(self, seed=4, n=25, mode_masks=0.7):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n)
        cam = Camera.look_at((2.1, 0.2, 0.4), (0, 0, 0), fx=14, fy=14,
                             cx=3.5, cy=3.5, width=8, height=8, near=0.3, far=8.0)
        masks = rng.uniform(0.1, 0.9, n)  # relaxed masks exercise the formulas
        out = render(scene, cam, masks, "proposed", RenderOptions(early_stop=0.0))
        return scene, cam, masks, out

    @pytest.mark.parametrize("which", ["proposed", "inverse", "cumulative"])
    def test_image_grads_equal_ray_grads(self, which):
        scene, cam, masks, out = self._setup()
        frags = out.trace
        img_g = {"proposed": grad_mask_proposed,
                 "inverse": grad_mask_inverse,
                 "cumulative": grad_mask_cumulative}[which](frags)
        ray_g = {"proposed": ray_grad_mask_proposed,
                 "inverse": ray_grad_mask_inverse,
                 "cumulative": ray_grad_mask_cumulative}[which]
        for p in np.flatnonzero(frags.count)[:20]:
            s, c = frags.start[p], frags.count[p]
            expect = ray_g(frags.alpha[s:s + c], frags.mask[s:s + c])
            np.testing.assert_allclose(img_g[s:s + c], expect, rtol=1e-9, atol=1e-12)

    def test_rgb_backward_single_fragment_color_grad(self):
        # one fragment, upstream (1,1,1): d_color = M*alpha*T = alpha
        from splatmask.model import Gaussian3D, Scene

        scene = Scene.empty()
        scene.add(Gaussian3D(position=np.zeros(3),
                             log_scale=np.log(0.08) * np.ones(3),
                             rotation=np.array([1.0, 0, 0, 0]),
                             opacity_logit=0.4,
                             color_coeffs=np.array([[0.3, 0.6, 0.9]]),
                             mask_logit=3.0))
        cam = Camera.look_at((2.0, 0, 0), (0, 0, 0), fx=8, fy=8, cx=2.5, cy=2.5,
                             width=6, height=6, near=0.3, far=6.0)
        out = render(scene, cam, np.ones(1), "none")
        up = np.ones((6, 6, 3))
        d_color, d_alpha, d_mask = rgb_backward(out.trace, up)
        frags = out.trace
        np.testing.assert_allclose(d_color[0], np.full(3, frags.alpha.sum()),
                                   rtol=1e-12)

    def test_hard_zero_mask_blocks_color_but_not_mask_grad(self):
        scene, cam, _, _ = self._setup(seed=5)
        masks = np.ones(len(scene))
        masks[3] = 0.0
        out = render(scene, cam, masks, "none", RenderOptions(early_stop=0.0))
        up = np.ones((cam.height, cam.width, 3))
        d_color, d_alpha, d_mask = rgb_backward(out.trace, up)
        rows = out.trace.splats.rows
        s = int(np.flatnonzero(rows == 3)[0])
        has_frag = np.any(out.trace.sid == s)
        assert has_frag
        np.testing.assert_allclose(d_color[s], 0.0)
        per_frag_mask_grad = d_mask[out.trace.sid == s]
        assert np.any(per_frag_mask_grad != 0.0)

    def test_rgb_parameter_grads_match_fd(self):
        # all parameter gradients through the full render at 1e-4 relative
        from splatmask.projection import project_backward

        rng = np.random.default_rng(6)
        scene = random_scene(rng, 20)
        cam = Camera.look_at((2.2, -0.3, 0.5), (0, 0, 0), fx=14, fy=14,
                             cx=3.5, cy=3.5, width=8, height=8, near=0.3, far=8.0)
        masks = (rng.random(20) < 0.8).astype(float)
        opts = RenderOptions(alpha_skip=0.0, early_stop=0.0)
        w = rng.uniform(-1, 1, (8, 8, 3))

        def forward():
            return render(scene, cam, masks, "none", opts)

        def loss():
            return float(np.sum(forward().rgb * w))

        out = forward()
        d_color, d_alpha, d_mask = rgb_backward(out.trace, w)
        d_op, d_m2d, d_con = alpha_backward(out.trace, d_alpha)
        world = project_backward(out.trace.splats, scene, d_m2d, d_con, d_color)
        rows = out.trace.splats.rows
        h = 1e-5
        checks = [
            ("opacity_logit", scene.opacity_logits, d_op),
            ("position", scene.positions, world["position"]),
            ("log_scale", scene.log_scales, world["log_scale"]),
            ("rotation", scene.rotations, world["rotation"]),
            ("color_coeffs", scene.color_coeffs, world["color_coeffs"]),
        ]
        for name, arr, grad in checks:
            flat = arr.reshape(len(scene), -1)
            gflat = np.asarray(grad).reshape(len(rows), -1)
            for k, row in enumerate(rows[:8]):
                for j in range(flat.shape[1]):
                    old = flat[row, j]
                    flat[row, j] = old + h
                    fp = loss()
                    flat[row, j] = old - h
                    fm = loss()
                    flat[row, j] = old
                    fd = (fp - fm) / (2 * h)
                    scale = max(abs(fd), abs(gflat[k, j]), 1e-3)
                    assert abs(fd - gflat[k, j]) / scale < 1e-4, (name, row, j)

    def test_fused_backward_matches_two_step(self):
        from splatmask.gradients import fused_rgb_backward

        scene, cam, masks, out = self._setup(seed=9, n=35)
        rng = np.random.default_rng(10)
        up = rng.uniform(-1, 1, (cam.height, cam.width, 3))
        d_color, d_alpha, d_mask = rgb_backward(out.trace, up)
        d_op, d_m2d, d_con = alpha_backward(out.trace, d_alpha)
        f_color, f_op, f_m2d, f_con, f_alpha, f_mask = \
            fused_rgb_backward(out.trace, up)
        np.testing.assert_allclose(f_color, d_color, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(f_alpha, d_alpha, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(f_mask, d_mask, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(f_op, d_op, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(f_m2d, d_m2d, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(f_con, d_con, rtol=1e-9, atol=1e-15)

    def test_accumulation_tile_order_independent(self):
        # per-Gaussian sums agree across tilings within float reassociation
        rng = np.random.default_rng(7)
        scene = random_scene(rng, 60)
        cam = Camera.look_at((2.1, 0.2, 0.4), (0, 0, 0), fx=40, fy=40,
                             cx=15.5, cy=15.5, width=32, height=32, near=0.3, far=8.0)
        masks = (rng.random(60) < 0.8).astype(float)
        up = rng.uniform(-1, 1, (32, 32, 3))
        sums = []
        for workers, tile in [(1, 16), (4, 8)]:
            out = render(scene, cam, masks, "proposed",
                         RenderOptions(workers=workers, tile=tile))
            d_color, d_alpha, d_mask = rgb_backward(out.trace, up)
            g = np.bincount(out.trace.gaussian_ids, weights=d_mask,
                            minlength=len(scene))
            sums.append((d_color, g))
        np.testing.assert_allclose(sums[0][0], sums[1][0], rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(sums[0][1], sums[1][1], rtol=1e-6, atol=1e-12)


class TestBehavioralProperties:
    def test_proposed_grad_is_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = int(rng.integers(1, 64))
            alpha = rng.uniform(0.001, 0.999, n)
            mask = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(float)
            g = ray_grad_mask_proposed(alpha, mask)
            assert np.all(g >= 0.0)

    def test_density_scaling(self):
        hi = density_scaling_samples(0.8, 400, seed=0)
        lo = density_scaling_samples(0.1, 400, seed=1)
        assert hi.mean() > lo.mean()

    def test_self_term_decreasing_in_importance(self):
        # holding the ray fixed, the self term (1 - a_i T_i) falls as a_i T_i rises
        at = np.linspace(0.01, 0.99, 50)
        self_term = 1.0 - at
        assert np.all(np.diff(self_term) < 0)

    def test_grad_accumulator_zeros(self):
        acc = GradAccumulator.zeros(5, 4)
        assert acc.d_color.shape == (5, 4, 3)
        assert acc.d_mask_logit.shape == (5,)
