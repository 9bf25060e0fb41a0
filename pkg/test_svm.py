#!/usr/bin/env python3
"""
Test the RBF kernel, the SMO solver against a projected-gradient QP
oracle (and scikit-learn's SVC), decision scores, grid search and model
persistence
"""

import math
import os
import sys
import tempfile
import warnings
import weakref

import numpy as np
import pytest
from sklearn.svm import SVC

import svm
from svm import (GridSettings, KernelCache, SvmConfig, decision_score, default_grid, dual_objective, grid_search,
                 load_svm, predict, primal_objective, rbf_kernel, rbf_kernel_matrix, save_svm, scale_gamma,
                 smo_train, stratified_subsample)
from testing_support import run_tests
from utils.errors import ConvergenceWarning, MissingArtifactError, ParameterError, TrainingError

TIGHT = 1e-10


def _instance(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(12, 21))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = (0, 1)
    X = rng.normal(size=(n, 2)) + 0.8 * labels[:, None]
    return X, labels


def _signed(labels):
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)


def _project(v, y, upper):
    """Euclidean projection onto {0 <= a <= upper, y.a = 0} by an exact breakpoint search"""
    breakpoints = np.sort(np.r_[v * y, (v - upper) * y])
    clipped = np.clip(v[None, :] - breakpoints[:, None] * y[None, :], 0.0, upper[None, :])
    values = clipped @ y
    k = int(np.argmax(values <= 0))
    if k == 0 or values[k - 1] == values[k]:
        lam = breakpoints[k]
    else:
        lam = breakpoints[k - 1] + values[k - 1] * (breakpoints[k] - breakpoints[k - 1]) / (values[k - 1] - values[k])
    return np.clip(v - lam * y, 0.0, upper)


def _oracle_dual(X, labels, C, class_weight, gamma, iterations=20000):
    """Accelerated projected-gradient ascent on the dual with adaptive restart"""
    y = _signed(labels)
    upper = np.where(y > 0, C * class_weight[1], C * class_weight[0])
    Q = np.outer(y, y) * rbf_kernel_matrix(X, X, gamma)
    step = 1.0 / np.linalg.eigvalsh(Q).max()
    objective = lambda a: a.sum() - 0.5 * a @ Q @ a

    alpha = np.zeros(len(y))
    z, t = alpha.copy(), 1.0
    for iteration in range(iterations):
        if iteration % 200 == 0:
            fixed = _project(alpha + step * (1.0 - Q @ alpha), y, upper)
            if iteration and np.max(np.abs(fixed - alpha)) < 1e-14:
                break
        following = _project(z + step * (1.0 - Q @ z), y, upper)
        if objective(following) < objective(alpha):
            z, t = alpha.copy(), 1.0
            continue
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = following + ((t - 1.0) / t_next) * (following - alpha)
        alpha, t = following, t_next

    free = (alpha > 1e-7) & (alpha < upper - 1e-7)
    residual = y - Q @ alpha * y
    bias = float(residual[free].mean()) if free.any() else 0.0
    return alpha, bias


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def test_rbf_kernel_examples():
    assert rbf_kernel([0.0, 0.0], [1.0, 1.0], 0.5) == pytest.approx(math.exp(-1))
    x, z = np.array([0.3, -1.2, 4.0]), np.array([1.0, 0.5, 2.0])
    assert rbf_kernel(x, x, 2.0) == 1.0
    assert rbf_kernel(x, z, 0.1) == rbf_kernel(z, x, 0.1)
    with pytest.raises(ParameterError):
        rbf_kernel([0.0], [0.0, 1.0], 1.0)
    with pytest.raises(ParameterError):
        rbf_kernel_matrix(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)


def test_kernel_matrix_is_psd():
    for seed in range(5):
        X = np.random.default_rng(seed).normal(size=(20, 4))
        K = rbf_kernel_matrix(X, X, 0.7)
        assert np.allclose(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_scale_gamma():
    X = np.random.default_rng(0).normal(0, 2.0, size=(1000, 4))
    assert scale_gamma(X) == pytest.approx(1.0 / (4 * X.var()))
    assert scale_gamma(np.ones((5, 3))) == 1.0


def test_kernel_cache_lru():
    X = np.random.default_rng(1).normal(size=(6, 2))
    y = np.array([1.0, -1.0, 1.0, 1.0, -1.0, -1.0])
    cache = KernelCache(X, y, 0.5, budget_mb=1e-9)
    assert cache.capacity == 2
    row0 = cache.row(0)
    cache.row(1)
    assert cache.row(0) is row0
    cache.row(2)
    cache.row(1)
    assert (cache.hits, cache.misses) == (1, 4)
    assert row0[4] == pytest.approx(y[0] * y[4] * rbf_kernel(X[0], X[4], 0.5))


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def test_two_point_symmetric_solution():
    X = np.array([[1.0], [-1.0]])
    labels = np.array([1, 0])
    for gamma in (0.5, 5.0):
        model = smo_train(X, labels, SvmConfig(C=10.0, gamma=gamma, tolerance=TIGHT))
        assert model.n_support == 2
        alphas = np.abs(model.dual_coeffs)
        assert alphas[0] == pytest.approx(alphas[1], abs=1e-9)
        assert decision_score(model, np.array([0.0])) == pytest.approx(0.0, abs=1e-9)
        assert decision_score(model, np.array([1.0])) == pytest.approx(1.0, abs=1e-6)


def test_xor_is_separated():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    labels = np.array([0, 0, 1, 1])
    model = smo_train(X, labels, SvmConfig(C=1.0, gamma=1.0))
    assert np.array_equal(predict(model, X), labels)
    assert predict(model, X[2]) == 1


def test_matches_projected_gradient_oracle():
    for seed in range(4):
        X, labels = _instance(seed)
        C = (0.5, 1.0, 2.0, 1.0)[seed]
        class_weight = ((1.0, 1.0), (0.4, 0.9), (1.0, 0.3), (0.7, 0.7))[seed]
        model = smo_train(X, labels, SvmConfig(C=C, gamma=0.5, class_weight=class_weight, tolerance=TIGHT))

        K = rbf_kernel_matrix(X, X, 0.5)
        alpha = np.zeros(len(labels))
        alpha[model.support_indices] = np.abs(model.dual_coeffs)
        oracle_alpha, oracle_bias = _oracle_dual(X, labels, C, class_weight, 0.5)
        assert dual_objective(alpha, labels, K) == pytest.approx(dual_objective(oracle_alpha, labels, K), abs=1e-6)

        oracle_scores = K @ (oracle_alpha * _signed(labels)) + oracle_bias
        decided = np.abs(oracle_scores) > 1e-3
        assert np.array_equal(predict(model, X)[decided], (oracle_scores[decided] > 0).astype(int))


@pytest.mark.slow
def test_matches_oracle_on_many_small_instances():
    rng = np.random.default_rng(2024)
    for seed in range(100, 200):
        X, labels = _instance(seed)
        assert len(labels) <= 20
        C = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        gamma = float(rng.choice([0.5, 1.0, 2.0]))
        class_weight = tuple(float(w) for w in np.round(rng.uniform(0.3, 1.0, size=2), 2))
        model = smo_train(X, labels, SvmConfig(C=C, gamma=gamma, class_weight=class_weight, tolerance=TIGHT))

        K = rbf_kernel_matrix(X, X, gamma)
        alpha = np.zeros(len(labels))
        alpha[model.support_indices] = np.abs(model.dual_coeffs)
        oracle_alpha, _ = _oracle_dual(X, labels, C, class_weight, gamma, iterations=50000)
        expected = dual_objective(oracle_alpha, labels, K)
        assert dual_objective(alpha, labels, K) == pytest.approx(expected, rel=1e-6, abs=1e-6), seed


def test_matches_sklearn_dual_objective():
    for seed in range(3):
        X, labels = _instance(10 + seed, n=40)
        class_weight = (0.6, 1.0)
        model = smo_train(X, labels, SvmConfig(C=1.5, gamma=0.3, class_weight=class_weight, tolerance=TIGHT))
        reference = SVC(C=1.5, kernel="rbf", gamma=0.3, class_weight={0: 0.6, 1: 1.0}, tol=1e-10).fit(X, labels)

        K = rbf_kernel_matrix(X, X, 0.3)
        ours = np.zeros(len(labels))
        ours[model.support_indices] = np.abs(model.dual_coeffs)
        theirs = np.zeros(len(labels))
        theirs[reference.support_] = np.abs(reference.dual_coef_[0])
        assert dual_objective(ours, labels, K) == pytest.approx(dual_objective(theirs, labels, K), abs=1e-6)
        assert model.bias == pytest.approx(reference.intercept_[0], abs=1e-4)


def test_dual_feasibility_and_free_vector_scores():
    X, labels = _instance(20, n=60)
    config = SvmConfig(C=1.0, gamma=0.5, class_weight=(0.5, 1.0), tolerance=TIGHT)
    model = smo_train(X, labels, config)
    y = _signed(labels)[model.support_indices]
    alphas = model.dual_coeffs * y
    upper = np.where(y > 0, 1.0, 0.5)

    assert np.all(alphas > 0)
    assert np.all(alphas <= upper + 1e-12)
    assert abs(model.dual_coeffs.sum()) <= 1e-8

    free = alphas < upper - 1e-8
    assert free.any()
    scores = decision_score(model, model.support_vectors[free])
    assert np.allclose(scores, y[free], atol=1e-6)


def test_strong_duality():
    X, labels = _instance(21, n=50)
    model = smo_train(X, labels, SvmConfig(C=0.8, gamma=0.5, tolerance=TIGHT))
    K = rbf_kernel_matrix(X, X, 0.5)
    alpha = np.zeros(len(labels))
    alpha[model.support_indices] = np.abs(model.dual_coeffs)
    assert primal_objective(model, X, labels) == pytest.approx(dual_objective(alpha, labels, K), rel=1e-5)


def test_margin_violations_follow_oracle():
    X, labels = _instance(30, n=20)
    y = _signed(labels)
    for C in (0.2, 1.0, 5.0):
        model = smo_train(X, labels, SvmConfig(C=C, gamma=0.5, tolerance=TIGHT))
        oracle_alpha, oracle_bias = _oracle_dual(X, labels, C, (1.0, 1.0), 0.5)
        oracle_margin = y * (rbf_kernel_matrix(X, X, 0.5) @ (oracle_alpha * y) + oracle_bias)
        margin = y * decision_score(model, X)
        assert np.sum(margin < 1 - 1e-3) <= np.sum(oracle_margin < 1 - 1e-4)


def test_shrinking_does_not_change_solution():
    X, labels = _instance(40, n=300)
    base = SvmConfig(C=1.0, gamma=0.5, tolerance=1e-8)
    shrunk = smo_train(X, labels, base)
    plain = smo_train(X, labels, SvmConfig(C=1.0, gamma=0.5, tolerance=1e-8, shrinking=False))
    assert np.allclose(decision_score(shrunk, X), decision_score(plain, X), atol=1e-5)


def test_label_flip_negates_scores():
    X, labels = _instance(50, n=40)
    config = SvmConfig(C=1.0, gamma=0.5, tolerance=TIGHT)
    query = np.random.default_rng(50).normal(size=(25, 2))
    original = decision_score(smo_train(X, labels, config), query)
    flipped = decision_score(smo_train(X, 1 - labels, config), query)
    assert np.allclose(flipped, -original, atol=1e-6)


def test_training_errors_and_convergence_flag():
    X, labels = _instance(60, n=30)
    with pytest.raises(TrainingError):
        smo_train(X, np.zeros(30, dtype=int))
    with pytest.raises(TrainingError):
        smo_train(np.full((2, 2), np.nan), np.array([0, 1]))
    with pytest.raises(ParameterError):
        SvmConfig(C=0.0)

    with pytest.warns(ConvergenceWarning):
        model = smo_train(X, labels, SvmConfig(C=1.0, gamma=0.5, max_iter=1))
    assert not model.converged
    assert model.n_iterations == 1

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        smo_train(X, labels, SvmConfig(C=1.0, gamma=0.5, max_iter=1), warn=False)


def test_decision_score_dimension_check():
    X, labels = _instance(61)
    model = smo_train(X, labels, SvmConfig(gamma=0.5))
    assert isinstance(decision_score(model, X[0]), float)
    with pytest.raises(ParameterError):
        decision_score(model, np.zeros(3))


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def test_default_grid_cardinality():
    grid = default_grid()
    assert len(grid) == 2000
    assert grid[0] == (0.1, 0.1, 0.1)
    assert grid[-1] == (2.0, 1.0, 1.0)
    assert len(set(grid)) == 2000
    assert all(value > 0 for candidate in grid for value in candidate)


def test_grid_search_picks_best_and_is_deterministic():
    X_train, y_train = _instance(70, n=80)
    X_val, y_val = _instance(71, n=40)
    candidates = [(c, w_neg, w_pos) for c in (0.2, 1.0) for w_neg in (0.5, 1.0) for w_pos in (0.5, 1.0)]
    settings = GridSettings(workers=2, seed=3)

    config, model, table = grid_search(X_train, y_train, X_val, y_val, settings, candidates)
    assert len(table) == len(candidates)
    assert list(table.columns) == ["C", "w_neg", "w_pos", "gamma", "val_AP", "n_sv", "converged", "seconds"]
    best_ap = table["val_AP"].max()
    chosen = table[(table["C"] == config.C) & (table["w_neg"] == config.class_weight[0])
                   & (table["w_pos"] == config.class_weight[1])]
    assert chosen["val_AP"].iloc[0] == best_ap
    assert model.config == config

    again, _, _ = grid_search(X_train, y_train, X_val, y_val, GridSettings(workers=1, seed=3), candidates)
    assert again == config

    with pytest.raises(ParameterError):
        grid_search(X_train, y_train, X_val, y_val, settings, candidates=[])


def test_grid_search_tie_prefers_small_c():
    X_train, y_train = _instance(72, n=40)
    X_val, y_val = _instance(73, n=20)
    # equal per-class bounds C * w give identical models and therefore equal AP
    config, _, table = grid_search(X_train, y_train, X_val, y_val, GridSettings(),
                                   candidates=[(1.0, 0.5, 0.5), (0.5, 1.0, 1.0)])
    assert table["val_AP"].iloc[0] == table["val_AP"].iloc[1]
    assert config.C == 0.5


def test_grid_search_releases_candidate_models():
    X_train, y_train = _instance(74, n=40)
    X_val, y_val = _instance(75, n=20)
    candidates = [(c, w, w) for c in (0.5, 1.0, 1.5, 2.0) for w in (0.5, 1.0)]
    alive_before_fit = []
    fitted = []
    original = svm.smo_train

    def tracking_smo_train(*args, **kwargs):
        alive_before_fit.append(sum(ref() is not None for ref in fitted))
        model = original(*args, **kwargs)
        fitted.append(weakref.ref(model.support_vectors))
        return model

    svm.smo_train = tracking_smo_train
    try:
        config, model, table = grid_search(X_train, y_train, X_val, y_val, GridSettings(workers=1), candidates)
    finally:
        svm.smo_train = original

    # one fit per candidate plus the refit of the winner
    assert len(fitted) == len(candidates) + 1
    assert max(alive_before_fit) <= 1
    assert model.config == config
    chosen = table[(table["C"] == config.C) & (table["w_neg"] == config.class_weight[0])]
    assert chosen["n_sv"].iloc[0] == model.n_support


def test_stratified_subsample():
    labels = np.array([0] * 90 + [1] * 10)
    keep = stratified_subsample(labels, 20, seed=0)
    assert len(keep) == 20
    assert labels[keep].sum() == 2
    assert np.array_equal(keep, np.sort(keep))
    assert np.array_equal(stratified_subsample(labels, 500, seed=0), np.arange(100))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_svm_persistence():
    X, labels = _instance(80, n=30)
    model = smo_train(X, labels, SvmConfig(C=1.2, gamma=0.4, class_weight=(0.3, 0.8)))
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "svm_model.lsf")
        save_svm(path, model, {"val_ap": 0.5})
        loaded, meta = load_svm(path)
        with pytest.raises(MissingArtifactError):
            load_svm(os.path.join(directory, "absent.lsf"))
    assert loaded.config == model.config
    assert meta["val_ap"] == 0.5
    assert np.array_equal(decision_score(loaded, X), decision_score(model, X))


if __name__ == "__main__":
    sys.exit(run_tests(globals(), "SVM Test Suite"))
