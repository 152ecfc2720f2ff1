import numpy as np
import pytest

from etrials.imputation import ImputerSpec, fit_imputer


def test_mean_imputer_uses_arm_means():
    T = np.array([1, 1, 0, 0, 0])
    Y = np.array([1.0, 3.0, 0.0, 1.0, 2.0])
    imp = fit_imputer(ImputerSpec(kind="mean"), np.zeros((5, 1)), T, Y)
    x = np.zeros((1, 1))
    assert imp.predict_t(x)[0] == 2.0
    assert imp.predict_c(x)[0] == 1.0


def test_all_treated_training_falls_back_to_overall_mean():
    Y = np.array([0.2, 0.4, 0.9])
    imp = fit_imputer(ImputerSpec(kind="mean"), np.zeros((3, 1)), np.ones(3, int), Y)
    assert imp.predict_c(np.zeros((1, 1)))[0] == pytest.approx(Y.mean())
    assert imp.fallback == {"c": "overall training mean"}


@pytest.mark.parametrize("kind", ["linear", "forest"])
def test_single_row_arm_falls_back(kind):
    T = np.array([1, 0, 0, 0])
    Y = np.array([5.0, 1.0, 2.0, 3.0])
    X = np.arange(4.0)[:, None]
    imp = fit_imputer(ImputerSpec(kind=kind), X, T, Y)
    assert imp.predict_t(X[:1])[0] == pytest.approx(Y.mean())
    assert "t" in imp.fallback


def test_linear_imputer_reproduces_exact_line():
    rng = np.random.default_rng(0)
    x = rng.random(30)
    T = (np.arange(30) % 2).astype(int)
    Y = np.where(T == 1, 2.0 + 3.0 * x, -1.0 + 0.5 * x)
    imp = fit_imputer(ImputerSpec(kind="linear"), x[:, None], T, Y)
    grid = np.linspace(0, 1, 7)[:, None]
    assert np.allclose(imp.predict_t(grid), 2.0 + 3.0 * grid[:, 0], atol=1e-8)
    assert np.allclose(imp.predict_c(grid), -1.0 + 0.5 * grid[:, 0], atol=1e-8)


def test_forest_imputer_is_a_pure_function_of_its_inputs():
    rng = np.random.default_rng(1)
    X, Y = rng.random((40, 3)), rng.random(40)
    T = (rng.random(40) < 0.5).astype(int)
    a = fit_imputer(ImputerSpec(seed=4), X, T, Y)
    b = fit_imputer(ImputerSpec(seed=4), X, T, Y)
    assert a.predict_t(X).tobytes() == b.predict_t(X).tobytes()
    assert a.predict_c(X).tobytes() == b.predict_c(X).tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        ImputerSpec(kind="knn")
    with pytest.raises(ValueError):
        ImputerSpec(n_trees=0)
    with pytest.raises(ValueError):
        ImputerSpec(min_leaf=0)
    with pytest.raises(ValueError):
        fit_imputer(ImputerSpec(), np.empty((0, 1)), np.empty(0), np.empty(0))
