import numpy as np
import pytest

from splatmask.errors import ParameterError
from splatmask.model import Scene
from splatmask.projection import Camera, project_scene
from splatmask.rasterizer import (RenderOptions, build_fragments, composite_rgb,
                                  render, render_mask_cumulative,
                                  render_mask_inverse, render_mask_proposed,
                                  ray_transmittance)

from oracles import (brute_force_fragments, brute_force_rgb, random_scene,
                     ray_mask_values)


def _ring_cam(width=8, height=8, fx=14.0):
    return Camera.look_at((2.1, 0.3, 0.4), (0, 0, 0), fx=fx, fy=fx,
                          cx=(width - 1) / 2, cy=(height - 1) / 2,
                          width=width, height=height, near=0.3, far=8.0)


class TestRayForms:
    def test_transmittance_recurrence(self):
        alpha = np.array([0.3, 0.6, 0.2])
        mask = np.array([1.0, 0.0, 1.0])
        T = ray_transmittance(alpha, mask)
        np.testing.assert_allclose(T, [1.0, 0.7, 0.7])

    def test_composite_single_full_opacity(self):
        rgb, _ = composite_rgb([1.0], [1.0], [[0.2, 0.4, 0.6]])
        np.testing.assert_allclose(rgb, [0.2, 0.4, 0.6])

    def test_composite_two_fragments(self):
        c = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.5]])
        rgb, _ = composite_rgb([0.5, 0.5], [1.0, 1.0], c)
        np.testing.assert_allclose(rgb, 0.5 * c[0] + 0.25 * c[1])

    def test_composite_all_masked_off(self):
        c = np.ones((4, 3))
        rgb, T = composite_rgb([0.9, 0.5, 0.7, 0.2], np.zeros(4), c)
        np.testing.assert_allclose(rgb, 0.0)
        np.testing.assert_allclose(T, 1.0)

    def test_mask_proposed_hand_values(self):
        assert render_mask_proposed([1.0], [1.0]) == pytest.approx(0.0)
        assert render_mask_proposed([0.5, 0.5], [1.0, 1.0]) == \
            pytest.approx(1.25 / np.log(3.0))
        assert render_mask_proposed([0.4, 0.9], [0.0, 0.0]) == 0.0
        assert render_mask_proposed([], []) == 0.0

    def test_mask_inverse_hand_values(self):
        assert render_mask_inverse([0.5, 0.5], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-5)
        assert render_mask_inverse([0.4, 0.9], [0.0, 0.0]) == 0.0
        # single fragment: normalization makes F_A = M regardless of alpha
        for a in (0.01, 0.3, 0.95):
            assert render_mask_inverse([a], [1.0]) == pytest.approx(1.0)

    def test_mask_cumulative_hand_values(self):
        assert render_mask_cumulative([0.5, 0.5], [1.0, 1.0]) == \
            pytest.approx(0.5 / np.log(3.0))
        assert render_mask_cumulative([0.7], [1.0]) == 0.0  # nothing in front
        assert render_mask_cumulative([0.4, 0.9], [0.0, 0.0]) == 0.0

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(1, 20))
            alpha = rng.uniform(0.01, 0.99, n)
            mask = (rng.random(n) < 0.7).astype(float)
            f, fa, fb = ray_mask_values(alpha, mask)
            assert render_mask_proposed(alpha, mask) == pytest.approx(f, rel=1e-12)
            assert render_mask_inverse(alpha, mask) == pytest.approx(fa, rel=1e-12)
            assert render_mask_cumulative(alpha, mask) == pytest.approx(fb, rel=1e-12)


class TestBuildFragments:
    def test_empty_scene(self):
        scene = Scene.empty()
        cam = _ring_cam()
        out = render(scene, cam, np.zeros(0), "proposed")
        assert out.trace.pixel.size == 0
        assert out.frag_count.sum() == 0
        np.testing.assert_array_equal(out.spatial_mask, 0.0)

    def test_two_splats_sorted_by_depth(self):
        scene = Scene.empty()
        from splatmask.model import Gaussian3D
        for z in (2.0, 1.0):  # insert far one first
            scene.add(Gaussian3D(position=np.array([0.0, 0.0, 0.0 if z == 1.0 else 1.0]),
                                 log_scale=np.log(0.05) * np.ones(3),
                                 rotation=np.array([1.0, 0, 0, 0]),
                                 opacity_logit=2.0,
                                 color_coeffs=np.array([[0.5, 0.5, 0.5]]),
                                 mask_logit=3.0))
        cam = Camera.look_at((3.0, 0, 0), (0, 0, 0), fx=10, fy=10, cx=3.5, cy=3.5,
                             width=8, height=8, near=0.3, far=9.0)
        frags = render(scene, cam, np.ones(2), "none").trace
        for p in np.flatnonzero(frags.count > 1):
            s = frags.start[p]
            depths = frags.splats.depth[frags.sid[s:s + frags.count[p]]]
            assert np.all(np.diff(depths) >= 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force_lists(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 50, scale_range=(0.04, 0.25))
        cam = _ring_cam()
        masks = (rng.random(50) < 0.8).astype(float)
        splats = project_scene(scene, cam)
        frags = build_fragments(splats, cam, masks)
        expected = brute_force_fragments(splats, masks, 8, 8)
        got = {}
        for p in np.flatnonzero(frags.count):
            s, c = frags.start[p], frags.count[p]
            got[int(p)] = [(int(frags.splats.rows[frags.sid[i]]),
                            float(frags.alpha[i]), float(frags.mask[i]))
                           for i in range(s, s + c)]
        assert set(got) == set(expected)
        for p, exp in expected.items():
            assert len(got[p]) == len(exp), f"pixel {p}"
            for (gi, ai, mi), (ge, ae, me) in zip(got[p], exp):
                assert gi == ge
                assert ai == pytest.approx(ae, rel=1e-12, abs=1e-15)
                assert mi == me


class TestRenderOutputs:
    def test_zero_dims_rejected(self):
        with pytest.raises(ParameterError):
            Camera.look_at((2, 0, 0), (0, 0, 0), fx=10, fy=10, cx=0, cy=0,
                           width=0, height=8)

    def test_mode_none_equals_proposed_on_rgb(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng, 30)
        cam = _ring_cam()
        masks = (rng.random(30) < 0.7).astype(float)
        a = render(scene, cam, masks, "none")
        b = render(scene, cam, masks, "proposed")
        np.testing.assert_array_equal(a.rgb, b.rgb)
        assert a.spatial_mask is None and b.spatial_mask is not None

    def test_all_masks_on_equals_unmasked_reference(self):
        rng = np.random.default_rng(4)
        scene = random_scene(rng, 40)
        scene.mask_logits[:] = 20.0
        cam = _ring_cam(16, 16, fx=26.0)
        opts = RenderOptions(early_stop=0.0)
        out = render(scene, cam, np.ones(40), "none", opts)
        ref = brute_force_rgb(project_scene(scene, cam), np.ones(40), 16, 16)
        np.testing.assert_allclose(out.rgb, ref, atol=1e-12)

    @pytest.mark.parametrize("mode", ["proposed", "inverse", "cumulative"])
    def test_mask_plane_matches_scalar_oracle(self, mode):
        rng = np.random.default_rng(5)
        scene = random_scene(rng, 20)
        cam = _ring_cam()
        masks = (rng.random(20) < 0.75).astype(float)
        out = render(scene, cam, masks, mode)
        frags = out.trace
        which = {"proposed": 0, "inverse": 1, "cumulative": 2}[mode]
        for p in range(64):
            s, c = frags.start[p], frags.count[p]
            vals = ray_mask_values(list(frags.alpha[s:s + c]),
                                   list(frags.mask[s:s + c]))
            assert out.spatial_mask.ravel()[p] == pytest.approx(vals[which],
                                                                rel=1e-9, abs=1e-12)

    def test_trace_recurrence_is_exact(self):
        rng = np.random.default_rng(6)
        scene = random_scene(rng, 40)
        cam = _ring_cam()
        masks = (rng.random(40) < 0.6).astype(float)
        frags = render(scene, cam, masks, "proposed").trace
        for p in np.flatnonzero(frags.count):
            s, c = frags.start[p], frags.count[p]
            T = 1.0
            for i in range(s, s + c):
                assert frags.T[i] == T  # bitwise: one multiply per fragment
                T = T * (1.0 - frags.mask[i] * frags.alpha[i])

    def test_masked_off_fragment_leaves_T_unchanged(self):
        rng = np.random.default_rng(7)
        scene = random_scene(rng, 30)
        cam = _ring_cam()
        masks = (rng.random(30) < 0.5).astype(float)
        frags = render(scene, cam, masks, "proposed").trace
        seen_off = 0
        for p in np.flatnonzero(frags.count):
            s, c = frags.start[p], frags.count[p]
            for i in range(s, s + c - 1):
                if frags.mask[i] == 0.0:
                    assert frags.T[i + 1] == frags.T[i]
                    seen_off += 1
        assert seen_off > 0

    def test_early_stop_perturbs_rgb_below_1e3(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            scene = random_scene(np.random.default_rng(seed), 60,
                                 opacity_range=(1.0, 5.0))
            cam = _ring_cam()
            masks = np.ones(60)
            on = render(scene, cam, masks, "none", RenderOptions()).rgb
            off = render(scene, cam, masks, "none", RenderOptions(early_stop=0.0)).rgb
            assert np.max(np.abs(on - off)) < 1e-3

    def test_proposed_mask_lower_bound_for_faint_fragments(self):
        # k fragments with alpha*T <= 0.1 and M=1 give F >= 0.9k/log(1+k)
        rng = np.random.default_rng(9)
        for k in (2, 5, 17, 40):
            alpha = rng.uniform(0.005, 0.1, k)
            f = render_mask_proposed(alpha, np.ones(k))
            assert f >= 0.9 * k / np.log(1.0 + k) - 1e-12

    def test_tile_parallel_matches_single_thread(self):
        rng = np.random.default_rng(10)
        scene = random_scene(rng, 80)
        cam = _ring_cam(33, 17, fx=30.0)  # non-multiple-of-tile dims
        masks = (rng.random(80) < 0.8).astype(float)
        a = render(scene, cam, masks, "proposed", RenderOptions(workers=1))
        b = render(scene, cam, masks, "proposed", RenderOptions(workers=4, tile=8))
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.spatial_mask, b.spatial_mask)
        np.testing.assert_array_equal(a.frag_count, b.frag_count)

    def test_deterministic_given_masks(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, 25)
        cam = _ring_cam()
        masks = (rng.random(25) < 0.8).astype(float)
        a = render(scene, cam, masks, "proposed")
        b = render(scene, cam, masks, "proposed")
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.spatial_mask, b.spatial_mask)

    def test_rgb_nonnegative_and_T_in_unit_range(self):
        rng = np.random.default_rng(13)
        scene = random_scene(rng, 50)
        cam = _ring_cam(16, 16, fx=26.0)
        masks = (rng.random(50) < 0.7).astype(float)
        out = render(scene, cam, masks, "proposed")
        assert np.all(out.rgb >= 0.0)
        T = out.trace.T
        assert np.all((T >= 0.0) & (T <= 1.0))
        for p in np.flatnonzero(out.trace.count):
            s, c = out.trace.start[p], out.trace.count[p]
            assert np.all(np.diff(T[s:s + c]) <= 0.0 + 1e-300)

    def test_float32_precision_path(self):
        rng = np.random.default_rng(14)
        scene = random_scene(rng, 25)
        cam = _ring_cam()
        out = render(scene, cam, np.ones(25), "proposed",
                     RenderOptions(dtype=np.float32))
        assert out.rgb.dtype == np.float32
        assert out.spatial_mask.dtype == np.float32
        ref = render(scene, cam, np.ones(25), "proposed")
        np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-4)

    def test_frag_count_counts_masked_fragments_too(self):
        rng = np.random.default_rng(12)
        scene = random_scene(rng, 30)
        cam = _ring_cam()
        off = render(scene, cam, np.zeros(30), "proposed")
        on = render(scene, cam, np.ones(30), "proposed", RenderOptions(early_stop=0.0))
        off_nostop = render(scene, cam, np.zeros(30), "proposed",
                            RenderOptions(early_stop=0.0))
        # with early stop disabled the masked-out render sees every fragment
        np.testing.assert_array_equal(off_nostop.frag_count, on.frag_count)
        np.testing.assert_array_equal(off.spatial_mask, 0.0)
