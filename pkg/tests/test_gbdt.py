import math
import random

import numpy as np
import pytest

from decomp_triage.gbdt import (
    GAIN_EPS,
    LAMBDA,
    TIE_ABS_TOL,
    TIE_REL_TOL,
    EmptyDataset,
    GbdtParams,
    Leaf,
    RaggedMatrix,
    SingleClassData,
    Split,
    WidthMismatch,
    apply_tree,
    load_model,
    logistic_loss,
    predict,
    predict_margin,
    save_model,
    staged_margins,
    train_gbdt,
)


def _tied(a: float, b: float) -> bool:
    return abs(a - b) <= TIE_ABS_TOL + TIE_REL_TOL * max(abs(a), abs(b))


def brute_force_best_split(X, g, h, min_leaf):
    """Independent exhaustive search over (feature, midpoint threshold).

    Same preference rule as the trainer: strictly larger gain wins; gains
    within tolerance fall back to lowest feature index, then lowest
    threshold. Returns (gain, feature, threshold) or None.
    """
    n, n_features = X.shape
    G, H = float(g.sum()), float(h.sum())
    parent = G * G / (H + LAMBDA)
    best = None
    for feature in range(n_features):
        distinct = sorted(set(X[:, feature]))
        for lo, hi in zip(distinct, distinct[1:]):
            threshold = (lo + hi) / 2.0
            mask = X[:, feature] <= threshold
            if mask.sum() < min_leaf or (~mask).sum() < min_leaf:
                continue
            GL, HL = float(g[mask].sum()), float(h[mask].sum())
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL * GL / (HL + LAMBDA) + GR * GR / (HR + LAMBDA) - parent)
            candidate = (gain, feature, threshold)
            if best is None:
                best = candidate
            elif _tied(gain, best[0]):
                if (feature, threshold) < (best[1], best[2]):
                    best = candidate
            elif gain > best[0]:
                best = candidate
    if best is None or best[0] <= GAIN_EPS:
        return None
    return best


def _first_round_gradients(y):
    prior = float(np.mean(y))
    base = math.log(prior / (1.0 - prior))
    p = 1.0 / (1.0 + math.exp(-base))
    g = np.full(len(y), p) - y.astype(np.float64)
    h = np.full(len(y), p * (1.0 - p))
    return g, h


def test_validation_errors():
    with pytest.raises(EmptyDataset):
        train_gbdt(np.empty((0, 3)), np.array([], dtype=bool))
    with pytest.raises(SingleClassData):
        train_gbdt(np.array([[1.0], [2.0]]), np.array([True, True]))
    with pytest.raises(SingleClassData):
        train_gbdt(np.array([[1.0], [2.0]]), np.array([False, False]))
    with pytest.raises(RaggedMatrix):
        train_gbdt([[1.0, 2.0], [3.0]], np.array([True, False]))
    with pytest.raises(RaggedMatrix):
        train_gbdt(np.array([[1.0], [2.0], [3.0]]), np.array([True, False]))


def test_params_validated():
    with pytest.raises(ValueError):
        GbdtParams(num_rounds=0)
    with pytest.raises(ValueError):
        GbdtParams(max_depth=0)
    with pytest.raises(ValueError):
        GbdtParams(learning_rate=0.0)
    with pytest.raises(ValueError):
        GbdtParams(min_samples_leaf=0)


def test_separable_pair_learns():
    X = np.array([[0.0], [1.0]])
    y = np.array([False, True])
    model = train_gbdt(X, y, GbdtParams(num_rounds=50, min_samples_leaf=1))
    p0, label0 = predict(model, [0.0])
    p1, label1 = predict(model, [1.0])
    assert label0 is False and p0 < 0.5
    assert label1 is True and p1 > 0.5


def test_base_score_is_prior_log_odds():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([True, True, True, False])
    model = train_gbdt(X, y, GbdtParams(num_rounds=1, min_samples_leaf=1))
    assert model.base_score == pytest.approx(math.log(0.75 / 0.25))


def test_first_tree_root_matches_brute_force_oracle():
    rng = random.Random(4242)
    checked_splits = 0
    for trial in range(50):
        n = rng.randrange(4, 17)
        n_features = rng.randrange(1, 5)
        X = np.array(
            [[rng.choice([0.0, 0.5, 1.0, 2.0, rng.random()]) for _ in range(n_features)]
             for _ in range(n)]
        )
        y = np.array([rng.random() < 0.5 for _ in range(n)])
        if y.all() or not y.any():
            y[0] = not y[0]
        model = train_gbdt(X, y, GbdtParams(num_rounds=1, max_depth=1,
                                            min_samples_leaf=1))
        g, h = _first_round_gradients(y)
        expected = brute_force_best_split(X, g, h, min_leaf=1)
        root = model.trees[0]
        if expected is None:
            assert isinstance(root, Leaf)
            continue
        gain, feature, threshold = expected
        assert isinstance(root, Split)
        assert root.feature == feature
        assert root.threshold == pytest.approx(threshold)
        checked_splits += 1
    assert checked_splits >= 30


def test_leaf_weight_formula():
    # depth-1 stump on a split dataset: leaf weights must be -G/(H+lambda)
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([False, False, True, True])
    model = train_gbdt(X, y, GbdtParams(num_rounds=1, max_depth=1,
                                        min_samples_leaf=1))
    root = model.trees[0]
    assert isinstance(root, Split)
    g, h = _first_round_gradients(y)
    left = X[:, 0] <= root.threshold
    expected_left = -g[left].sum() / (h[left].sum() + LAMBDA)
    expected_right = -g[~left].sum() / (h[~left].sum() + LAMBDA)
    assert root.left.weight == pytest.approx(expected_left)
    assert root.right.weight == pytest.approx(expected_right)


def test_thresholds_are_midpoints_of_observed_values():
    rng = random.Random(7)
    X = np.array([[rng.choice([0.0, 1.0, 3.0, 10.0])] for _ in range(20)])
    y = np.array([x[0] >= 3.0 for x in X])
    if y.all() or not y.any():
        pytest.skip("degenerate draw")
    model = train_gbdt(X, y, GbdtParams(num_rounds=3, max_depth=2,
                                        min_samples_leaf=1))
    observed = sorted(set(X[:, 0]))
    midpoints = {(a + b) / 2.0 for a, b in zip(observed, observed[1:])}

    def walk(node):
        if isinstance(node, Split):
            assert any(math.isclose(node.threshold, m) for m in midpoints)
            walk(node.left)
            walk(node.right)

    for tree in model.trees:
        walk(tree)


def test_min_samples_leaf_respected():
    X = np.array([[float(i)] for i in range(10)])
    y = np.array([i >= 5 for i in range(10)])
    model = train_gbdt(X, y, GbdtParams(num_rounds=2, max_depth=3,
                                        min_samples_leaf=3))

    def leaf_counts(node, rows):
        if isinstance(node, Leaf):
            return [len(rows)]
        left = [r for r in rows if X[r, node.feature] <= node.threshold]
        right = [r for r in rows if X[r, node.feature] > node.threshold]
        return leaf_counts(node.left, left) + leaf_counts(node.right, right)

    for tree in model.trees:
        for count in leaf_counts(tree, list(range(10))):
            assert count >= 3


def test_training_loss_is_monotone_nonincreasing():
    rng = np.random.default_rng(99)
    X = rng.normal(size=(60, 5))
    y = (X[:, 0] + 0.5 * X[:, 2] > 0.1) ^ (rng.random(60) < 0.05)
    params = GbdtParams(num_rounds=30, max_depth=3, learning_rate=0.2,
                        min_samples_leaf=2)
    model = train_gbdt(X, y, params)
    stages = staged_margins(model, X)
    losses = [logistic_loss(stages[k], y) for k in range(stages.shape[0])]
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-12
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 4))
    y = X[:, 1] > 0
    a = train_gbdt(X, y, GbdtParams(num_rounds=5))
    b = train_gbdt(X, y, GbdtParams(num_rounds=5))
    assert a == b


def test_predict_margin_width_mismatch():
    X = np.array([[0.0, 1.0], [1.0, 0.0]])
    y = np.array([True, False])
    model = train_gbdt(X, y, GbdtParams(num_rounds=1, min_samples_leaf=1))
    with pytest.raises(WidthMismatch):
        predict_margin(model, [1.0])
    with pytest.raises(WidthMismatch):
        predict_margin(model, [1.0, 2.0, 3.0])


def test_probability_matches_sigmoid_of_margin():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([False, False, True, True])
    model = train_gbdt(X, y, GbdtParams(num_rounds=4, min_samples_leaf=1))
    for row in X:
        margin = predict_margin(model, row)
        probability, label = predict(model, row)
        assert probability == pytest.approx(1.0 / (1.0 + math.exp(-margin)))
        assert label is (probability > 0.5)


def test_save_load_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(17)
    X = rng.normal(size=(40, 6))
    y = X[:, 0] - X[:, 3] > 0.2
    model = train_gbdt(X, y, GbdtParams(num_rounds=10, max_depth=3))
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded == model
    for row in X:
        assert predict_margin(loaded, row) == predict_margin(model, row)


def test_apply_tree_routing():
    tree = Split(
        feature=0,
        threshold=0.5,
        left=Leaf(weight=-1.0),
        right=Leaf(weight=2.0),
    )
    assert apply_tree(tree, np.array([0.5])) == -1.0  # boundary goes left
    assert apply_tree(tree, np.array([0.50001])) == 2.0


def test_staged_margins_shape_and_final_stage():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([False, False, True, True])
    model = train_gbdt(X, y, GbdtParams(num_rounds=6, min_samples_leaf=1))
    stages = staged_margins(model, X)
    assert stages.shape == (7, 4)  # includes the base-score stage
    assert stages[0] == pytest.approx(np.full(4, model.base_score))
    for i, row in enumerate(X):
        assert stages[-1][i] == pytest.approx(predict_margin(model, row))
