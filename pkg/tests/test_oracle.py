"""Biased multiclass logistic oracles: objectives, gradients, fitters,
boosted trees, and serialization."""

import numpy as np
import pytest

from structlogit.gbt import BoostedTreesClassifier, fit_gbt
from structlogit.oracle import (
    KINDS,
    BiasedLogRegProblem,
    ConstantClassifier,
    FitConfig,
    LinearClassifier,
    MlpClassifier,
    ZeroClassifier,
    fit_constant,
    fit_linear,
    fit_mlp,
    fit_zero,
    load_classifier,
    logistic_gradient,
    logistic_objective,
    predict_scores,
    save_classifier,
)

_FITTERS = {"zero": fit_zero, "const": fit_constant, "linear": fit_linear,
            "boost": fit_gbt, "mlp": fit_mlp}


def random_problem(rng, n=60, d=3, L=3, bias_scale=1.0, separable=False):
    x = rng.standard_normal((n, d))
    if separable:
        w = rng.standard_normal((L, d)) * 3.0
        gold = np.argmax(x @ w.T, axis=1)
    else:
        gold = rng.integers(0, L, n)
    biases = bias_scale * rng.standard_normal((n, L))
    return BiasedLogRegProblem(x, gold, biases, L)


def random_classifier(rng, kind, d, L, hidden=5):
    if kind == "zero":
        return ZeroClassifier(L, d)
    if kind == "const":
        return ConstantClassifier(rng.standard_normal(L), d)
    if kind == "linear":
        return LinearClassifier(rng.standard_normal((L, d)))
    if kind == "mlp":
        return MlpClassifier(rng.standard_normal((hidden, d)),
                             rng.standard_normal((L, hidden)))
    raise ValueError(kind)


def numeric_gradient(clf, problem, params, h=1e-6):
    """Central differences on every parameter array in ``params``."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = logistic_objective(clf, problem)
            flat[i] = keep - h
            dn = logistic_objective(clf, problem)
            flat[i] = keep
            gf[i] = (up - dn) / (2 * h)
        out[name] = g
    return out


class TestProblem:
    def test_validation(self):
        x = np.zeros((4, 2))
        with pytest.raises(ValueError):
            BiasedLogRegProblem(x, np.array([0, 1, 2, 3]), np.zeros((4, 3)),
                                3)
        with pytest.raises(ValueError):
            BiasedLogRegProblem(x, np.zeros(4, dtype=int), np.zeros((5, 3)),
                                3)
        with pytest.raises(ValueError):
            BiasedLogRegProblem(x, np.zeros(3, dtype=int), np.zeros((4, 3)),
                                3)

    def test_shape_properties(self):
        p = random_problem(np.random.default_rng(0), n=7, d=2, L=4)
        assert p.num_rows == 7
        assert p.dim == 2


class TestObjective:
    def test_zero_scores_value(self):
        # zero classifier, zero biases: objective is -K log L
        rng = np.random.default_rng(1)
        p = random_problem(rng, n=50, d=2, L=4, bias_scale=0.0)
        got = logistic_objective(ZeroClassifier(4, 2), p)
        np.testing.assert_allclose(got, -50 * np.log(4), rtol=1e-12)

    def test_per_row_constant_bias_shift_is_invariant(self):
        rng = np.random.default_rng(2)
        p = random_problem(rng)
        clf = random_classifier(rng, "linear", p.dim, p.num_labels)
        base = logistic_objective(clf, p)
        shifted = BiasedLogRegProblem(
            p.features, p.gold, p.biases + rng.standard_normal((p.num_rows, 1)),
            p.num_labels)
        np.testing.assert_allclose(logistic_objective(clf, shifted), base,
                                   rtol=1e-9)

    def test_extreme_biases_finite(self):
        rng = np.random.default_rng(3)
        p = random_problem(rng, bias_scale=500.0)
        clf = random_classifier(rng, "mlp", p.dim, p.num_labels)
        assert np.isfinite(logistic_objective(clf, p))


class TestGradients:
    @pytest.mark.parametrize("kind", ["const", "linear", "mlp"])
    def test_matches_central_differences(self, kind):
        rng = np.random.default_rng(4)
        for trial in range(3):
            p = random_problem(rng, n=25, d=3, L=3)
            clf = random_classifier(rng, kind, 3, 3)
            grad = logistic_gradient(clf, p)
            params = {"offsets": clf.offsets} if kind == "const" else (
                {"W": clf.W} if kind == "linear"
                else {"U": clf.U, "W": clf.W})
            num = numeric_gradient(clf, p, params)
            for name in grad:
                denom = max(np.abs(num[name]).max(), 1.0)
                rel = np.abs(grad[name] - num[name]).max() / denom
                assert rel <= 1e-5, (kind, name, rel)


class TestFitters:
    @pytest.mark.parametrize("kind", KINDS)
    def test_never_below_zero_baseline(self, kind):
        rng = np.random.default_rng(5)
        for trial in range(3):
            p = random_problem(rng, n=60, d=3, L=3, bias_scale=2.0)
            clf = _FITTERS[kind](p, FitConfig(seed=trial))
            zero = logistic_objective(ZeroClassifier(3, 3), p)
            assert logistic_objective(clf, p) >= zero - 1e-9, kind

    def test_linear_solves_separable_problem(self):
        rng = np.random.default_rng(6)
        p = random_problem(rng, n=200, d=3, L=3, bias_scale=0.0,
                           separable=True)
        clf = fit_linear(p, FitConfig())
        pred = np.argmax(clf.scores(p.features), axis=1)
        assert np.mean(pred != p.gold) <= 0.02

    def test_constant_fits_class_priors(self):
        rng = np.random.default_rng(7)
        gold = rng.choice(3, size=300, p=[0.6, 0.3, 0.1])
        p = BiasedLogRegProblem(np.ones((300, 2)), gold, np.zeros((300, 3)),
                                3)
        clf = fit_constant(p, FitConfig())
        s = predict_scores(clf, p.features[0])
        counts = np.bincount(gold, minlength=3) / 300
        np.testing.assert_allclose(np.exp(s) / np.exp(s).sum(), counts,
                                   atol=1e-3)

    def test_fit_compensates_biases(self):
        # biases push every row toward label 0; the fitted offsets push back
        rng = np.random.default_rng(8)
        gold = rng.integers(0, 2, 200)
        biases = np.zeros((200, 2))
        biases[:, 0] = 4.0
        p = BiasedLogRegProblem(np.ones((200, 1)), gold, biases, 2)
        clf = fit_constant(p, FitConfig())
        s = predict_scores(clf, np.ones(1))
        assert s[1] - s[0] > 3.0

    def test_warm_start_never_hurts_linear(self):
        rng = np.random.default_rng(9)
        p = random_problem(rng, n=80, d=3, L=3)
        first = fit_linear(p, FitConfig())
        again = fit_linear(p, FitConfig(), init=first)
        assert (logistic_objective(again, p)
                >= logistic_objective(first, p) - 1e-8)

    def test_mlp_solves_xor(self):
        # the classic 4-row problem a linear model cannot separate
        x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        gold = np.array([0, 1, 1, 0])
        p = BiasedLogRegProblem(x, gold, np.zeros((4, 2)), 2)
        lin = fit_linear(p, FitConfig())
        pred_lin = np.argmax(lin.scores(x), axis=1)
        assert (pred_lin != gold).sum() >= 1
        mlp = fit_mlp(p, FitConfig(seed=0, mlp_hidden=8, mlp_epochs=2000))
        pred = np.argmax(mlp.scores(x), axis=1)
        np.testing.assert_array_equal(pred, gold)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        p = random_problem(rng, n=120, d=3, L=3)
        a = fit_mlp(p, FitConfig(seed=3))
        b = fit_mlp(p, FitConfig(seed=3))
        np.testing.assert_array_equal(a.U, b.U)
        np.testing.assert_array_equal(a.W, b.W)


class TestBoostedTrees:
    def test_requires_enough_rows(self):
        rng = np.random.default_rng(12)
        p = random_problem(rng, n=10, d=2, L=2)
        with pytest.raises(ValueError):
            fit_gbt(p, FitConfig())

    def test_leaf_floor_holds_without_subsampling(self):
        rng = np.random.default_rng(13)
        p = random_problem(rng, n=200, d=3, L=3, separable=True)
        clf = fit_gbt(p, FitConfig(gbt_subsample=1.0))
        floor = int(np.ceil(0.05 * p.num_rows))
        for trees in clf.trees:
            for tree in trees:
                leaves = tree.leaf_of(p.features)
                counts = np.bincount(leaves,
                                     minlength=len(tree.feature))
                leaf_nodes = np.flatnonzero(tree.feature == -1)
                assert counts[leaf_nodes].min() >= floor

    def test_depth_bounded(self):
        rng = np.random.default_rng(14)
        p = random_problem(rng, n=300, d=4, L=2, separable=True)
        clf = fit_gbt(p, FitConfig(gbt_max_depth=3))

        def depth(tree, node=0):
            if tree.feature[node] == -1:
                return 0
            return 1 + max(depth(tree, tree.left[node]),
                           depth(tree, tree.right[node]))

        for trees in clf.trees:
            for tree in trees:
                assert depth(tree) <= 3

    def test_rounds_monotone_with_warm_start(self):
        rng = np.random.default_rng(15)
        p = random_problem(rng, n=150, d=3, L=3, separable=True)
        clf = None
        prev = logistic_objective(ZeroClassifier(3, 3), p)
        for round_idx in range(8):
            clf = fit_gbt(p, FitConfig(seed=round_idx, gbt_rounds=1),
                          init=clf)
            cur = logistic_objective(clf, p)
            assert cur >= prev - 1e-9
            prev = cur

    def test_improves_on_nonlinear_signal(self):
        rng = np.random.default_rng(16)
        x = rng.uniform(-1, 1, (400, 2))
        gold = (x[:, 0] * x[:, 1] > 0).astype(int)
        p = BiasedLogRegProblem(x, gold, np.zeros((400, 2)), 2)
        clf = fit_gbt(p, FitConfig(seed=0))
        pred = np.argmax(clf.scores(x), axis=1)
        assert np.mean(pred != gold) < 0.2

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(17)
        p = random_problem(rng, n=100, d=3, L=2)
        a = fit_gbt(p, FitConfig(seed=5))
        b = fit_gbt(p, FitConfig(seed=5))
        np.testing.assert_array_equal(a.scores(p.features),
                                      b.scores(p.features))


class TestSerialization:
    @pytest.mark.parametrize("kind", KINDS)
    def test_roundtrip_preserves_scores(self, kind):
        rng = np.random.default_rng(18)
        d, L = 3, 3
        if kind == "boost":
            p = random_problem(rng, n=120, d=d, L=L, separable=True)
            clf = fit_gbt(p, FitConfig(seed=1))
        else:
            clf = random_classifier(rng, kind, d, L)
        blob = save_classifier(clf)
        back = load_classifier(blob)
        assert back.kind == kind
        x = rng.standard_normal((40, d))
        np.testing.assert_array_equal(clf.scores(x), back.scores(x))

    def test_rejects_bad_magic(self):
        with pytest.raises(ValueError):
            load_classifier(b"NOPE" + b"\x00" * 40)

    def test_rejects_truncation(self):
        rng = np.random.default_rng(19)
        blob = save_classifier(random_classifier(rng, "linear", 3, 2))
        with pytest.raises(ValueError):
            load_classifier(blob[:len(blob) - 3])
