import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsub import nn
from fedsub.fusion import (ClientScore, FusedCluster, FusionStrategy, assemble_client_update,
                           fuse, fuse_cluster_avg, fuse_cluster_leadership, fuse_overlapping,
                           leader_index, normalize_layers, own_activation_union, region_norms,
                           score_clients)
from fedsub.nn import DenseLayer, Mlp
from fedsub.subnetworks import ClientUpdate, Depth, LayerMask, Subnetwork, apply_update

from oracles import eq3_weighted_sum, eq5_leader, eq6_overlap_sum, random_subnetwork

SHAPES = [(4, 5), (5, 3)]


def sub(values_w, mask_w=None, freq_w=None, label=0, support=1):
    """One-layer subnetwork from a weight matrix; biases are zero and inactive."""
    v = np.asarray(values_w, float)
    f = (v != 0).astype(float) if freq_w is None else np.asarray(freq_w, float)
    m = (f > 0).astype(float) if mask_w is None else np.asarray(mask_w, float)
    zb = np.zeros(v.shape[1])
    return Subnetwork(label, (DenseLayer(v, zb),), (LayerMask(m, zb),), (LayerMask(f, zb),), support)


class TestScores:
    def test_proportional(self):
        s = score_clients(["a", "b"], 0, [10, 30], FusionStrategy.CLUSTER_AVG)
        assert [x.value for x in s] == [0.25, 0.75]

    def test_leadership(self):
        s = score_clients(["a", "b"], 0, [10, 40], FusionStrategy.LEADERSHIP, [1.0, 0.5])
        np.testing.assert_allclose([x.value for x in s], [1 / 3, 2 / 3], atol=1e-15)

    def test_single_member(self):
        assert score_clients(["a"], 2, [7], FusionStrategy.OVERLAPPING)[0].value == 1.0

    def test_all_zero_is_uniform(self):
        s = score_clients(["a", "b", "c"], 0, [5, 5, 5], FusionStrategy.LEADERSHIP, [0, 0, 0])
        assert [x.value for x in s] == [1 / 3] * 3

    def test_empty_and_negative(self):
        with pytest.raises(ValueError):
            score_clients([], 0, [], FusionStrategy.CLUSTER_AVG)
        with pytest.raises(ValueError):
            score_clients(["a"], 0, [-1], FusionStrategy.CLUSTER_AVG)
        with pytest.raises(ValueError):
            score_clients(["a"], 0, [1], FusionStrategy.LEADERSHIP)

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=8))
    def test_sums_to_one(self, supports):
        s = score_clients([str(i) for i in range(len(supports))], 0, supports, FusionStrategy.CLUSTER_AVG)
        assert abs(sum(x.value for x in s) - 1) < 1e-12
        assert all(x.value >= 0 for x in s)


class TestClusterAvg:
    def test_singleton_identity(self):
        s = random_subnetwork(np.random.default_rng(0), SHAPES)
        fc = fuse_cluster_avg([s], [1.0])
        for a, b in zip(fc.values, s.values):
            assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)

    def test_equal_scores_mean(self):
        fc = fuse_cluster_avg([sub([[2.0]]), sub([[4.0]])], [0.5, 0.5])
        assert fc.values[0].weights[0, 0] == 3.0

    def test_weighted(self):
        fc = fuse_cluster_avg([sub([[0.0]], freq_w=[[1.0]]), sub([[8.0]])], [0.25, 0.75])
        assert fc.values[0].weights[0, 0] == 6.0

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            fuse_cluster_avg([sub([[1.0]]), sub([[1.0, 2.0]])], [0.5, 0.5])

    def test_matches_loops(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            subs = [random_subnetwork(rng, SHAPES) for _ in range(3)]
            p = rng.dirichlet(np.ones(3))
            fc = fuse_cluster_avg(subs, p)
            for l in range(2):
                ref = eq3_weighted_sum([s.values[l].weights for s in subs], p)
                assert np.max(np.abs(fc.values[l].weights - ref)) < 1e-12
                ref_f = eq3_weighted_sum([s.freq[l].biases for s in subs], p)
                assert np.max(np.abs(fc.freq[l].biases - ref_f)) < 1e-12


class TestLeadership:
    def test_argmax(self):
        a, b = sub([[1.0]]), sub([[2.0]])
        fc = fuse_cluster_leadership([a, b], [0.2, 0.8], ["a", "b"])
        assert fc.values is b.values

    def test_tie_lowest_id(self):
        a, b = sub([[1.0]]), sub([[2.0]])
        assert leader_index(["z", "m"], [0.5, 0.5]) == 1
        fc = fuse_cluster_leadership([a, b], [0.5, 0.5], ["z", "m"])
        assert np.array_equal(fc.values[0].weights, b.values[0].weights)

    def test_matches_loops(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ids = [f"c{int(v)}" for v in rng.choice(100, 3, replace=False)]
            p = rng.integers(0, 3, size=3).astype(float)
            assert leader_index(ids, p) == eq5_leader(ids, p)


class TestOverlapping:
    def test_disjoint_masks(self):
        fc = fuse_overlapping([sub([[1.0, 0.0]]), sub([[0.0, 1.0]])], [0.5, 0.5])
        assert not fc.values[0].weights.any() and not fc.mask[0].weights.any()

    def test_single_shared_element(self):
        fc = fuse_overlapping([sub([[3.0, 1.0]]), sub([[5.0, 0.0]])], [0.5, 0.5])
        np.testing.assert_array_equal(fc.values[0].weights, [[4.0, 0.0]])
        np.testing.assert_array_equal(fc.mask[0].weights, [[1.0, 0.0]])

    def test_matches_loops(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            subs = [random_subnetwork(rng, SHAPES, density=0.9) for _ in range(3)]
            p = rng.dirichlet(np.ones(3))
            fc = fuse_overlapping(subs, p)
            for l in range(2):
                ref, ov = eq6_overlap_sum([s.values[l].weights for s in subs],
                                          [s.mask[l].weights for s in subs], p)
                assert np.max(np.abs(fc.values[l].weights - ref)) < 1e-12
                assert np.array_equal(fc.mask[l].weights, ov)

    def test_identical_masks_reduce_to_avg(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            base = random_subnetwork(rng, SHAPES)
            subs = []
            for _ in range(3):
                other = random_subnetwork(rng, SHAPES, density=1.0)
                vals = tuple(DenseLayer(other.values[l].weights * (base.mask[l].weights > 0),
                                        other.values[l].biases * (base.mask[l].biases > 0))
                             for l in range(2))
                freqs = tuple(LayerMask(np.where(base.mask[l].weights > 0, 0.5, 0.0),
                                        np.where(base.mask[l].biases > 0, 0.5, 0.0)) for l in range(2))
                subs.append(Subnetwork(0, vals, base.mask, freqs, 3))
            p = rng.dirichlet(np.ones(3))
            ov, av = fuse_overlapping(subs, p), fuse_cluster_avg(subs, p)
            for l in range(2):
                m = base.mask[l].weights > 0
                assert np.max(np.abs(ov.values[l].weights[m] - av.values[l].weights[m]), initial=0) < 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_convexity(self, seed):
        rng = np.random.default_rng(seed)
        subs = [random_subnetwork(rng, SHAPES, density=1.0) for _ in range(3)]
        p = rng.dirichlet(np.ones(3))
        for fc in (fuse_overlapping(subs, p), fuse_cluster_avg(subs, p)):
            for l in range(2):
                stack = np.stack([s.values[l].weights for s in subs])
                on = fc.mask[l].weights > 0
                v = fc.values[l].weights
                assert np.all(v[on] >= stack.min(axis=0)[on] - 1e-12)
                assert np.all(v[on] <= stack.max(axis=0)[on] + 1e-12)


def fused_from(values_w, freq_w):
    v, f = np.asarray(values_w, float), np.asarray(freq_w, float)
    zb = np.zeros(v.shape[1])
    return FusedCluster((DenseLayer(v, zb),), (LayerMask(f, zb),), (LayerMask((f > 0).astype(float), zb),))


def two_layer(w):
    return Mlp((DenseLayer(np.asarray(w, float), np.zeros(np.shape(w)[1])),
                DenseLayer(np.ones((np.shape(w)[1], 2)), np.zeros(2))))


class TestAssemble:
    def test_one_cluster_is_its_matrix(self):
        model = two_layer([[9.0, 9.0], [9.0, 9.0]])
        fc = fused_from([[1.0, 0.0], [2.0, 3.0]], [[1.0, 0.0], [1.0, 1.0]])
        up = assemble_client_update("u", [fc], FusionStrategy.CLUSTER_AVG, model, Depth.partial(1))
        np.testing.assert_array_equal(up.values[0].weights, [[1.0, 0.0], [2.0, 3.0]])
        np.testing.assert_array_equal(up.replace[0].weights, [[1, 0], [1, 1]])
        out = apply_update(model, up, Depth.partial(1))
        np.testing.assert_array_equal(out.layers[0].weights, [[1.0, 9.0], [2.0, 3.0]])

    def test_cancellation(self):
        model = two_layer([[9.0, 9.0]])
        m = [[2.0, -1.0]]
        up = assemble_client_update("u", [fused_from(m, [[1, 1]]), fused_from(np.negative(m), [[1, 1]])],
                                    FusionStrategy.CLUSTER_AVG, model, Depth.partial(1))
        np.testing.assert_array_equal(up.values[0].weights, [[0.0, 0.0]])
        assert up.replace[0].weights.all()

    def test_frequency_deweighting(self):
        # a cluster whose members fired half the time reports w * 0.5; the update restores w
        model = two_layer([[0.0]])
        up = assemble_client_update("u", [fused_from([[1.5]], [[0.5]])], FusionStrategy.LEADERSHIP,
                                    model, Depth.partial(1))
        assert up.values[0].weights[0, 0] == 3.0

    def test_only_contributing_clusters_average(self):
        model = two_layer([[0.0, 0.0]])
        a = fused_from([[2.0, 4.0]], [[1, 1]])
        b = fused_from([[6.0, 0.0]], [[1, 0]])
        up = assemble_client_update("u", [a, b], FusionStrategy.CLUSTER_AVG, model, Depth.partial(1))
        np.testing.assert_array_equal(up.values[0].weights, [[4.0, 4.0]])

    def test_no_clusters(self):
        up = assemble_client_update("u", [], FusionStrategy.OVERLAPPING, two_layer([[1.0]]), Depth.partial(1))
        assert up.is_empty

    def test_overlapping_without_own_mask_is_noop(self):
        model = two_layer([[1.0, 2.0]])
        fc = fused_from([[5.0, 5.0]], [[1, 1]])
        zero = (LayerMask(np.zeros((1, 2)), np.zeros(2)),)
        up = assemble_client_update("u", [fc], FusionStrategy.OVERLAPPING, model, Depth.partial(1), zero)
        assert apply_update(model, up, Depth.partial(1)).equals(model)

    def test_overlapping_delta_then_normalize(self):
        model = two_layer([[3.0, 4.0, 7.0]])
        fc = fused_from([[1.0, 1.0, 1.0]], [[1, 1, 0]])
        own = (LayerMask(np.array([[1.0, 1.0, 1.0]]), np.zeros(3)),)
        up = assemble_client_update("u", [fc], FusionStrategy.OVERLAPPING, model, Depth.partial(1), own)
        # raw delta on the first two: (4, 5), rescaled to the old norm 5
        raw = np.array([4.0, 5.0])
        np.testing.assert_allclose(up.values[0].weights[0, :2], raw * 5 / np.linalg.norm(raw), atol=1e-12)
        assert up.replace[0].weights.tolist() == [[1, 1, 0]]
        out = apply_update(model, up, Depth.partial(1))
        assert out.layers[0].weights[0, 2] == 7.0

    def test_singleton_clusters_are_identity(self):
        rng = np.random.default_rng(5)
        model = nn.init_mlp([4, 6, 5, 3], 0)
        x, y = rng.normal(size=(30, 4)), rng.integers(0, 3, 30)
        from fedsub.subnetworks import extract_subnetworks
        depth = Depth.partial(2)
        subs = extract_subnetworks(model, x, y, depth)
        own = own_activation_union(subs.values())
        for strat in FusionStrategy:
            fused = [fuse(strat, [s], score_clients(["u"], c, [s.support], strat, [1.0]), ["u"])
                     for c, s in subs.items()]
            up = assemble_client_update("u", fused, strat, model, depth, own)
            out = apply_update(model, up, depth)
            for a, b in zip(out.layers, model.layers):
                assert np.max(np.abs(a.weights - b.weights)) < 1e-12
                assert np.max(np.abs(a.biases - b.biases)) < 1e-12

    def test_head_untouched_under_partial(self):
        rng = np.random.default_rng(6)
        model = nn.init_mlp([3, 4, 4, 2], 1)
        fused = [fuse_cluster_avg([random_subnetwork(rng, [(3, 4), (4, 4)], density=1.0)], [1.0])]
        up = assemble_client_update("u", fused, FusionStrategy.CLUSTER_AVG, model, Depth.partial(2))
        out = apply_update(model, up, Depth.partial(2))
        assert np.array_equal(out.layers[2].weights, model.layers[2].weights)
        assert np.array_equal(out.layers[2].biases, model.layers[2].biases)

    def test_depth_mismatch(self):
        fc = fused_from([[1.0]], [[1.0]])
        with pytest.raises(nn.ShapeError):
            assemble_client_update("u", [fc], FusionStrategy.CLUSTER_AVG, nn.init_mlp([1, 1, 1, 2], 0),
                                   Depth.partial(2))


def update_of(w, b, rep_w=None, rep_b=None):
    w, b = np.asarray(w, float), np.asarray(b, float)
    rw = np.ones_like(w) if rep_w is None else np.asarray(rep_w, float)
    rb = np.ones_like(b) if rep_b is None else np.asarray(rep_b, float)
    return ClientUpdate("u", (DenseLayer(w, b),), (LayerMask(rw, rb),))


class TestNormalize:
    def test_fixed_point(self):
        up = update_of([[3.0, 4.0]], [1.0, 0.0])
        out = normalize_layers(up, [(5.0, 1.0)])
        np.testing.assert_allclose(out.values[0].weights, [[3.0, 4.0]], atol=1e-12)

    def test_doubled_halved(self):
        out = normalize_layers(update_of([[6.0, 8.0]], [2.0, 0.0]), [(5.0, 1.0)])
        np.testing.assert_allclose(out.values[0].weights, [[3.0, 4.0]], atol=1e-12)
        np.testing.assert_allclose(out.values[0].biases, [1.0, 0.0], atol=1e-12)

    def test_zero_norm_untouched(self):
        out = normalize_layers(update_of([[0.0, 0.0]], [0.0, 0.0]), [(5.0, 1.0)])
        assert not out.values[0].weights.any()

    def test_retained_elements_untouched(self):
        out = normalize_layers(update_of([[6.0, 100.0]], [0.0, 0.0], [[1, 0]], [0, 0]), [(3.0, 0.0)])
        np.testing.assert_array_equal(out.values[0].weights, [[3.0, 100.0]])

    def test_reference_count(self):
        with pytest.raises(nn.ShapeError):
            normalize_layers(update_of([[1.0]], [0.0]), [])

    @given(st.integers(0, 10_000), st.floats(0.1, 10))
    @settings(max_examples=50, deadline=None)
    def test_restores_norm_and_signs(self, seed, ref):
        rng = np.random.default_rng(seed)
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        out = normalize_layers(update_of(w, b), [(ref, ref / 2)])
        assert abs(np.linalg.norm(out.values[0].weights) - ref) < 1e-9
        assert abs(np.linalg.norm(out.values[0].biases) - ref / 2) < 1e-9
        assert np.array_equal(np.sign(out.values[0].weights), np.sign(w))

    def test_region_norms(self):
        model = two_layer([[3.0, 4.0, 12.0]])
        up = update_of([[0.0, 0.0, 0.0]], [0.0, 0.0, 0.0], [[1, 1, 0]], [0, 0, 0])
        assert region_norms(model, up) == [(5.0, 0.0)]


def test_fuse_dispatch():
    subs = [sub([[1.0]]), sub([[3.0]])]
    p = [0.5, 0.5]
    assert fuse("cluster_avg", subs, p, ["a", "b"]).values[0].weights[0, 0] == 2.0
    assert fuse("leadership", subs, [0.4, 0.6], ["a", "b"]).values[0].weights[0, 0] == 3.0
    assert fuse(FusionStrategy.OVERLAPPING, subs, p, ["a", "b"]).values[0].weights[0, 0] == 2.0
    assert isinstance(score_clients(["a"], 0, [1], "overlapping")[0], ClientScore)
