import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpm_augment.classifier import (
    STATS_DIM, GbtConfig, GbtModel, TreeNode, best_split, extract_features, feature_matrix,
    gbt_predict, gbt_train, grow_tree, logistic_loss, select_split, split_gain, stats_features,
    write_feature_csv,
)
from dpm_augment.denoiser import DenoiserArch, DenoiserModel
from dpm_augment.errors import ConfigurationError, ContractError, DimensionError, FormatError
from dpm_augment.patches import Patch, apply_affine

TIE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# exhaustive oracle: every (feature, distinct value) pair, sums recomputed per partition


def brute_split(X, g, h, lam):
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for v in vals[1:]:
            left = X[:, f] < v
            GL, HL = g[left].sum(), h[left].sum()
            GR, HR = g[~left].sum(), h[~left].sum()
            G, H = GL + GR, HL + HR
            gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam))
            if best is None:
                best = (f, v, gain)
                continue
            tol = TIE_RTOL * max(1.0, abs(max(gain, best[2])))
            if gain > best[2] + tol:
                best = (f, v, gain)
            elif abs(gain - best[2]) <= tol and (f, v) < best[:2]:
                best = (f, v, max(gain, best[2]))
    # zero gain (up to rounding) still splits; a strictly worse objective does not
    if best is not None and best[2] < -TIE_RTOL * max(1.0, abs(best[2])):
        return None
    return best


def brute_tree(X, g, h, lam, depth, max_depth):
    """Nested tuples: ('leaf', value) or (feature, left-mask-bound value, left, right)."""
    if depth < max_depth and X.shape[0] >= 2 and np.any(g != 0):
        s = brute_split(X, g, h, lam)
        if s is not None:
            f, v, _ = s
            m = X[:, f] < v
            return (f, v, brute_tree(X[m], g[m], h[m], lam, depth + 1, max_depth),
                    brute_tree(X[~m], g[~m], h[~m], lam, depth + 1, max_depth))
    return ("leaf", -g.sum() / (h.sum() + lam))


def same_tree(node, ref, X):
    """Structural equality: same feature and same row partition at every node."""
    if ref[0] == "leaf":
        return node.is_leaf and node.value == pytest.approx(ref[1], rel=1e-9, abs=1e-12)
    if node.is_leaf or node.feature != ref[0]:
        return False
    f, v = ref[0], ref[1]
    m_ref = X[:, f] < v
    m = X[:, f] < node.threshold
    if not np.array_equal(m, m_ref):
        return False
    return same_tree(node.left, ref[2], X[m]) and same_tree(node.right, ref[3], X[~m])


def random_instance(rng):
    n = int(rng.integers(2, 51))
    d = int(rng.integers(1, 5))
    kind = rng.integers(3)
    if kind == 0:
        X = rng.standard_normal((n, d))
    elif kind == 1:
        X = rng.integers(0, 4, (n, d)).astype(float)  # heavy duplicates and ties
    else:
        X = np.round(rng.standard_normal((n, d)), 1)
    if rng.random() < 0.5:
        g, h = rng.standard_normal(n), rng.uniform(0.05, 1.0, n)
    else:
        y = rng.integers(0, 2, n)
        p = 1 / (1 + np.exp(-rng.normal(0, 0.5, n)))
        g, h = p - y, p * (1 - p)
    return X, g, h, float(rng.choice([0.0, 0.5, 1.0]))


class TestSplitSearch:
    def test_gain_formula(self):
        assert split_gain(1.0, 1.0, -1.0, 1.0, 0.0) == pytest.approx(1.0)
        assert split_gain(1.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(0.5 * (0.5 + 0.5 - 4 / 3))

    def test_select_split_ties(self):
        s = select_split([(2, 0.5, 1.0), (1, 3.0, 1.0), (1, -1.0, 1.0 - 1e-13), (0, 0.0, 0.5)])
        assert (s.feature, s.threshold) == (1, -1.0)
        assert select_split([(0, 1.0, -0.5), (1, 2.0, -1.0)]) is None
        assert select_split([(1, 1.0, 0.0), (0, 2.0, -1.0)]).feature == 1
        assert select_split([]) is None

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            X, g, h, lam = random_instance(rng)
            got = best_split(X, g, h, lam)
            ref = brute_split(X, g, h, lam)
            if ref is None:
                assert got is None
                continue
            f, v, gain = ref
            assert got.feature == f
            assert np.array_equal(X[:, f] < got.threshold, X[:, f] < v)
            assert got.gain == pytest.approx(gain, rel=1e-9)

    def test_whole_tree_matches_exhaustive(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            X, g, h, lam = random_instance(rng)
            cfg = GbtConfig(max_depth=3, reg_lambda=lam)
            if lam == 0:
                h = h + 0.01  # keep leaf weights finite without regularization
            assert same_tree(grow_tree(X, g, h, cfg), brute_tree(X, g, h, lam, 0, 3), X)

    def test_fitted_node_stays_leaf(self):
        X = np.arange(6.0)[:, None]
        t = grow_tree(X, np.zeros(6), np.ones(6), GbtConfig(max_depth=3))
        assert t.is_leaf and t.value == 0

    def test_balanced_xor_root_splits(self):
        X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        g = np.array([0.5, -0.5, -0.5, 0.5])
        s = best_split(X, g, np.full(4, 0.25), 1.0)
        assert s.gain == 0 and s.feature == 0

    def test_constant_feature_has_no_split(self):
        X = np.ones((5, 2))
        assert best_split(X, np.arange(5.0), np.ones(5), 1.0) is None

    def test_threshold_between_values(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        s = best_split(X, np.array([-1.0, -1.0, 1.0, 1.0]), np.ones(4), 0.0)
        assert 1.0 < s.threshold <= 2.0


class TestGbt:
    def test_separable_1d(self):
        X = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [3.0]])
        y = np.array([-1, -1, -1, 1, 1, 1])
        m = gbt_train(X, y, GbtConfig(n_trees=1, max_depth=1))
        assert len(m.trees) == 1 and m.trees[0].depth() == 1
        assert np.all(m.predict(X) == y)
        for x, lab in zip(X, y):
            score, pred = gbt_predict(m, x)
            assert pred == lab and np.sign(score) == lab

    def test_xor(self):
        X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 5, dtype=float)
        y = np.array([-1, 1, 1, -1] * 5)
        m = gbt_train(X, y, GbtConfig(n_trees=10, max_depth=2))
        assert np.mean(m.predict(X) == y) == 1.0

    def test_duplicated_rows_same_model(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((30, 3))
        y = np.where(X[:, 0] + 0.5 * rng.standard_normal(30) > 0, 1, -1)
        # without lambda, G and H double together so every gain scales by 2
        cfg = GbtConfig(n_trees=15, max_depth=3, reg_lambda=0.0)
        a = gbt_train(X, y, cfg)
        b = gbt_train(np.vstack([X, X]), np.concatenate([y, y]), cfg)
        for ta, tb in zip(a.trees, b.trees):
            assert same_tree(tb, tree_tuple(ta), X)
        np.testing.assert_allclose(a.decision_function(X), b.decision_function(X), rtol=1e-9)

    def test_loss_monotone(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((80, 4))
        y = np.where(X[:, 0] * X[:, 1] + 0.3 * rng.standard_normal(80) > 0, 1, -1)
        m = gbt_train(X, y, GbtConfig(n_trees=40))
        losses = np.array(m.train_loss)
        assert len(losses) == 41
        assert np.all(np.diff(losses) <= 1e-12)
        assert losses[-1] == pytest.approx(logistic_loss(m.decision_function(X), y))

    def test_tree_count_and_structure(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 2))
        y = np.where(X[:, 1] > 0, 1, -1)
        m = gbt_train(X, y, GbtConfig(n_trees=7, max_depth=2))
        assert len(m.trees) == m.n_trees == 7

        def check(node):
            if node.is_leaf:
                assert np.isfinite(node.value)
            else:
                assert node.left is not None and node.right is not None
                check(node.left)
                check(node.right)
        for t in m.trees:
            assert t.depth() <= 2
            check(t)

    def test_zero_trees_and_ties(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([-1, 1])
        m = gbt_train(X, y, GbtConfig(n_trees=0, base_score=-0.3))
        assert gbt_predict(m, np.array([5.0])) == (-0.3, -1)
        m = gbt_train(X, y, GbtConfig(n_trees=0))
        assert gbt_predict(m, np.array([5.0])) == (0.0, 1)

    def test_errors(self):
        with pytest.raises(ContractError):
            gbt_train(np.zeros((3, 1)), np.array([1, 1, 1]))
        with pytest.raises(ContractError):
            gbt_train(np.zeros((1, 1)), np.array([1]))
        with pytest.raises(ContractError):
            gbt_train(np.zeros((2, 1)), np.array([0, 1]))
        with pytest.raises(ContractError):
            gbt_train(np.zeros((3, 1)), np.array([1, -1]))
        m = gbt_train(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([-1, 1]))
        with pytest.raises(ContractError):
            gbt_predict(m, np.zeros(3))
        with pytest.raises(DimensionError):
            gbt_predict(m, np.zeros((1, 2)))
        with pytest.raises(ConfigurationError):
            gbt_train(np.zeros((2, 1)), np.array([-1, 1]), GbtConfig(learning_rate=0))

    def test_deterministic_and_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        X = rng.integers(0, 3, (50, 3)).astype(float)
        y = np.where(rng.random(50) > 0.4, 1, -1)
        a = gbt_train(X, y, GbtConfig(n_trees=20))
        b = gbt_train(X, y, GbtConfig(n_trees=20))
        assert a.to_json() == b.to_json()
        a.save(tmp_path / "m.json")
        c = GbtModel.load(tmp_path / "m.json")
        assert c.to_json() == a.to_json()
        np.testing.assert_array_equal(c.decision_function(X), a.decision_function(X))
        (tmp_path / "bad.json").write_text('{"kind": "other"}')
        with pytest.raises(FormatError):
            GbtModel.load(tmp_path / "bad.json")


def tree_tuple(node):
    if node.is_leaf:
        return ("leaf", node.value)
    return (node.feature, node.threshold, tree_tuple(node.left), tree_tuple(node.right))


class TestStatsFeatures:
    def test_dimension(self):
        assert STATS_DIM == 32
        assert stats_features(np.zeros((4, 4, 3))).shape == (32,)

    def test_zero_patch(self):
        f = stats_features(np.zeros((6, 6, 3)))
        for ch in range(3):
            block = f[ch * 10:(ch + 1) * 10]
            assert block[0] == 0 and block[1] == 0
            assert block[2] == 1.0 and np.all(block[3:] == 0)
        assert f[30] == 0 and f[31] == 0

    def test_uniform_half(self):
        f = stats_features(np.full((6, 6, 3), 0.5))
        for ch in range(3):
            assert f[ch * 10] == 0.5 and f[ch * 10 + 1] == 0
            assert f[ch * 10 + 2 + 4] == 1.0
        assert f[30] == 0

    def test_histogram_sums_to_one(self):
        f = stats_features(np.random.default_rng(0).random((8, 8, 3)))
        for ch in range(3):
            assert f[ch * 10 + 2:ch * 10 + 10].sum() == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)),
           st.sampled_from(["hflip", "vflip", "rot90", "rot180", "rot270"]))
    def test_affine_invariance(self, px, op):
        a = stats_features(px)
        b = stats_features(np.ascontiguousarray(apply_affine(px, op)))
        assert a.tobytes() == b.tobytes()

    def test_feature_kinds(self):
        p = Patch("w", 0, 0, np.random.default_rng(1).random((8, 8, 3)), 1)
        np.testing.assert_array_equal(extract_features(p), stats_features(p.pixels))
        with pytest.raises(ConfigurationError):
            extract_features(p, "resnet")
        with pytest.raises(ConfigurationError):
            extract_features(p, "denoiser-encoder")
        m = DenoiserModel(DenoiserArch((3, 8, 8), base_channels=4, blocks_per_level=1, embed_dim=8))
        F = feature_matrix([p, p], "denoiser-encoder", m)
        assert F.shape == (2, 8) and np.all(np.isfinite(F))
        assert feature_matrix([], "stats").shape == (0, 32)

    def test_feature_csv(self, tmp_path):
        X = np.array([[0.1, 0.2], [0.3, 0.4]])
        write_feature_csv(tmp_path / "f.csv", X, [1, -1], ["a", "b"])
        rows = list(csv.reader(open(tmp_path / "f.csv")))
        assert rows[0] == ["id", "label", "f0", "f1"]
        assert rows[2] == ["b", "-1", "0.3", "0.4"]


def test_tree_dict_round_trip():
    t = TreeNode(feature=1, threshold=0.5, left=TreeNode(value=-1.0), right=TreeNode(value=2.0))
    back = TreeNode.from_dict(t.to_dict())
    assert back == t
    assert back.predict(np.array([[0, 0.2], [0, 0.5]])).tolist() == [-1.0, 2.0]
