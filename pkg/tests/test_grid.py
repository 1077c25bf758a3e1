import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradepth.grid import (
    ChannelStack,
    ConfidenceField,
    DepthMap,
    GradientField,
    SceneSpec,
    bilinear_upsample,
    bilinear_upsample_adjoint,
    block_mean,
    exact_gradients,
    observe_gradients,
    random_pool_pair,
    random_pool_indices,
    synth_scene,
)

from oracles import count_planar_regions


class TestDepthMap:
    def test_rejects_nonfinite_at_valid(self):
        vals = np.array([[1.0, np.nan]])
        with pytest.raises(ValueError, match="non-finite"):
            DepthMap(vals, np.array([[True, True]]))

    def test_allows_nonfinite_at_invalid(self):
        m = DepthMap(np.array([[1.0, np.nan]]), np.array([[True, False]]))
        assert m.n_valid == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            DepthMap(np.zeros((2, 2)), np.ones((2, 3), dtype=bool))


class TestFieldTypes:
    def test_gradient_shapes(self):
        g = GradientField(np.zeros((3, 3)), np.zeros((2, 4)))
        assert g.grid_shape == (3, 4)

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ValueError, match="inconsistent"):
            GradientField(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_confidence_range(self):
        with pytest.raises(ValueError, match="confidence"):
            ConfidenceField(np.full((2, 1), 1.5), np.zeros((1, 2)))

    def test_channel_stack_common_shape(self):
        g = GradientField(np.zeros((2, 1)), np.zeros((1, 2)))
        c = ConfidenceField.ones(2, 2)
        g3 = GradientField(np.zeros((3, 2)), np.zeros((2, 3)))
        c3 = ConfidenceField.ones(3, 3)
        with pytest.raises(ValueError, match="channel 1"):
            ChannelStack(((g, c), (g3, c3)))


class TestSceneSpec:
    def test_rejects_nonpositive_min_depth(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, height=4, width=4, depth_range=(0.0, 5.0))

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, height=0, width=4)

    def test_rejects_outlier_fraction_one(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, height=4, width=4, outlier_fraction=1.0)


class TestSynthScene:
    def test_single_plane_degenerate_range(self):
        img, depth = synth_scene(SceneSpec(seed=7, height=8, width=8, planes=1,
                                           depth_range=(2.0, 2.0)))
        assert np.all(depth.values == 2.0)
        assert depth.valid.all()

    def test_determinism(self):
        spec = SceneSpec(seed=7, height=8, width=8, planes=2)
        img1, d1 = synth_scene(spec)
        img2, d2 = synth_scene(spec)
        assert np.array_equal(img1, img2)
        assert np.array_equal(d1.values, d2.values)

    def test_three_connected_regions(self):
        # region-labeling oracle over the generated map
        _, depth = synth_scene(SceneSpec(seed=1, height=16, width=16, planes=3,
                                         depth_range=(1.0, 5.0)))
        n_regions, unassigned = count_planar_regions(depth.values)
        assert unassigned == 0
        assert n_regions == 3

    @pytest.mark.parametrize("seed", range(6))
    def test_values_in_range_and_image_unit_interval(self, seed):
        spec = SceneSpec(seed=seed, height=12, width=10, planes=4,
                         depth_range=(1.5, 4.0))
        img, depth = synth_scene(spec)
        assert depth.values.min() >= 1.5
        assert depth.values.max() <= 4.0
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestExactGradients:
    def test_hand_difference(self):
        depth = DepthMap.full([[1.0, 2.0], [3.0, 4.0]])
        g = exact_gradients(depth)
        assert np.array_equal(g.gx, [[1.0], [1.0]])
        assert np.array_equal(g.gy, [[2.0, 2.0]])

    def test_constant_depth(self):
        g = exact_gradients(DepthMap.full(np.full((4, 5), 3.2)))
        assert np.all(g.gx == 0.0) and np.all(g.gy == 0.0)

    def test_single_row(self):
        g = exact_gradients(DepthMap.full([[0.0, 1.0, 3.0]]))
        assert np.array_equal(g.gx, [[1.0, 2.0]])
        assert g.gy.shape == (0, 3)

    def test_requires_fully_valid(self):
        m = DepthMap(np.ones((2, 2)), np.array([[True, False], [True, True]]))
        with pytest.raises(ValueError, match="fully valid"):
            exact_gradients(m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        z1 = rng.normal(size=(5, 6))
        z2 = rng.normal(size=(5, 6))
        combo = exact_gradients(DepthMap.full(a * z1 + b * z2))
        g1 = exact_gradients(DepthMap.full(z1))
        g2 = exact_gradients(DepthMap.full(z2))
        np.testing.assert_allclose(combo.gx, a * g1.gx + b * g2.gx, atol=1e-12)
        np.testing.assert_allclose(combo.gy, a * g1.gy + b * g2.gy, atol=1e-12)


class TestObserveGradients:
    def test_outliers_marked_zero_confidence(self):
        _, depth = synth_scene(SceneSpec(seed=3, height=8, width=8, planes=2))
        grad, conf = observe_gradients(depth, noise=0.0, outlier_fraction=0.25, seed=5)
        exact = exact_gradients(depth)
        flat_w = np.concatenate([conf.wx.ravel(), conf.wy.ravel()])
        flat_g = np.concatenate([grad.gx.ravel(), grad.gy.ravel()])
        flat_e = np.concatenate([exact.gx.ravel(), exact.gy.ravel()])
        n_out = int(round(0.25 * flat_w.size))
        assert (flat_w == 0.0).sum() == n_out
        np.testing.assert_allclose(np.abs(flat_g - flat_e)[flat_w == 0.0], 100.0)
        np.testing.assert_allclose(flat_g[flat_w == 1.0], flat_e[flat_w == 1.0])


class TestRandomPool:
    def test_forced_selection_is_seed_independent(self):
        vals = np.arange(16.0).reshape(4, 4)
        valid = np.zeros((4, 4), dtype=bool)
        valid[0, 1] = valid[0, 3] = valid[2, 0] = valid[3, 3] = True  # one per block
        gt = DepthMap(vals, valid)
        stack = np.zeros((1, 2, 2))
        q1, _, cv1 = random_pool_pair(gt, stack, 2, seed=0)
        q2, _, cv2 = random_pool_pair(gt, stack, 2, seed=999)
        assert np.array_equal(q1.values, q2.values)
        assert cv1.all() and cv2.all()
        assert np.array_equal(q1.values, [[1.0, 3.0], [8.0, 15.0]])

    def test_constant_maps(self):
        gt = DepthMap.full(np.full((4, 4), 2.5))
        stack = np.full((3, 2, 2), 7.0)
        q_gt, q_hat, cv = random_pool_pair(gt, stack, 2, seed=11)
        assert np.all(q_gt.values == 2.5)
        assert np.all(q_hat == 7.0)
        assert cv.all()

    def test_bit_determinism(self):
        rng = np.random.default_rng(0)
        gt = DepthMap(rng.uniform(1, 5, (6, 6)), rng.random((6, 6)) > 0.3)
        stack = rng.normal(size=(2, 3, 3))
        outs1 = random_pool_pair(gt, stack, 2, seed=42)
        outs2 = random_pool_pair(gt, stack, 2, seed=42)
        for a, b in zip(outs1[:2], outs2[:2]):
            va = a.values if isinstance(a, DepthMap) else a
            vb = b.values if isinstance(b, DepthMap) else b
            assert np.array_equal(va, vb)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gt_values_come_from_source_block(self, seed):
        rng = np.random.default_rng(seed)
        gt = DepthMap(rng.uniform(1, 5, (6, 9)), rng.random((6, 9)) > 0.4)
        stack = rng.normal(size=(2, 2, 3))
        q_gt, _, cv = random_pool_pair(gt, stack, 3, seed=seed)
        for r in range(2):
            for c in range(3):
                block_vals = gt.values[3 * r : 3 * r + 3, 3 * c : 3 * c + 3]
                block_mask = gt.valid[3 * r : 3 * r + 3, 3 * c : 3 * c + 3]
                if cv[r, c]:
                    assert q_gt.values[r, c] in block_vals[block_mask]
                else:
                    assert not block_mask.any()

    def test_invalid_block_marked(self):
        valid = np.ones((4, 4), dtype=bool)
        valid[:2, :2] = False
        gt = DepthMap(np.ones((4, 4)), valid)
        _, _, cv = random_pool_pair(gt, np.zeros((1, 2, 2)), 2, seed=0)
        assert not cv[0, 0]
        assert cv[0, 1] and cv[1, 0] and cv[1, 1]

    def test_rejects_mismatched_factor(self):
        gt = DepthMap.full(np.ones((4, 4)))
        with pytest.raises(ValueError):
            random_pool_pair(gt, np.zeros((1, 3, 3)), 2, seed=0)
        with pytest.raises(ValueError):
            random_pool_indices(gt, 3, seed=0)

    def test_selection_uniform_within_blocks(self):
        # Monte-Carlo oracle: chi-squared uniformity of pick frequencies
        from scipy.stats import chisquare

        gt = DepthMap.full(np.arange(16.0).reshape(4, 4))
        counts = np.zeros((2, 2, 4))
        n_seeds = 20_000
        for seed in range(n_seeds):
            rows, cols, _ = random_pool_indices(gt, 2, seed)
            for r in range(2):
                for c in range(2):
                    u = rows[r, c] - 2 * r
                    v = cols[r, c] - 2 * c
                    counts[r, c, 2 * u + v] += 1
        for r in range(2):
            for c in range(2):
                _, p = chisquare(counts[r, c])
                assert p > 0.01, f"block ({r},{c}) selection not uniform: p={p}"


class TestBilinear:
    def test_upsample_of_constant(self):
        up = bilinear_upsample(np.full((3, 3), 4.2), 2)
        np.testing.assert_allclose(up, 4.2)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        y = rng.normal(size=(8, 10))
        lhs = np.sum(bilinear_upsample(x, 2) * y)
        rhs = np.sum(x * bilinear_upsample_adjoint(y, 2, (4, 5)))
        assert abs(lhs - rhs) < 1e-12

    def test_block_mean(self):
        arr = np.arange(16.0).reshape(4, 4)
        got = block_mean(arr, 2)
        np.testing.assert_allclose(got, [[2.5, 4.5], [10.5, 12.5]])
