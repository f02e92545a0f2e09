"""
相關矩陣、Jacobi 特徵分解與 PCA 測試
"""
import numpy as np
import pytest

from services.decompose import (
    ComponentSelection,
    PCAModel,
    correlate,
    correlation_matrix,
    fit_pca,
    jacobi_eigh,
    loadings_table,
    project,
    reconstruct,
    select_components,
    variance_curve,
)
from services.errors import ConfigError, DimensionMismatchError, InsufficientDataError, ZeroVarianceError


@pytest.fixture
def sample():
    rng = np.random.default_rng(17)
    mixing = rng.standard_normal((6, 6))
    return rng.standard_normal((80, 6)) @ mixing + rng.uniform(-5, 5, size=6)


# ----------------------------------------------------------------- correlation


def test_correlation_perfect_pairs():
    R = correlation_matrix(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 2.0], [3.0, 6.0, 1.0]]))
    assert R[0, 1] == pytest.approx(1.0)
    assert R[0, 2] == pytest.approx(-1.0)
    np.testing.assert_array_equal(np.diag(R), 1.0)


def test_correlation_matches_numpy(sample):
    np.testing.assert_allclose(correlation_matrix(sample), np.corrcoef(sample, rowvar=False), atol=1e-12)


def test_correlation_affine_invariance(sample):
    a = np.array([2.0, 0.5, 3.0, -1.0, 7.0, 1.5])
    b = np.array([10.0, -3.0, 0.0, 4.0, 1.0, -8.0])
    R = correlation_matrix(sample)
    moved = correlation_matrix(sample * a + b)
    signs = np.sign(np.outer(a, a))
    np.testing.assert_allclose(moved, R * signs, atol=1e-12)


def test_correlation_names_zero_variance_column():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    with pytest.raises(ZeroVarianceError) as info:
        correlation_matrix(X, ["gdp", "flat"])
    assert info.value.column == "flat"


def test_correlation_requires_two_rows():
    with pytest.raises(InsufficientDataError):
        correlation_matrix(np.array([[1.0, 2.0]]))


def test_correlate_table(sample):
    table = correlate(sample[:, :2], sample[:, 2:5], ["PC1", "PC2"], ["a", "b", "c"])
    assert list(table.index) == ["PC1", "PC2"] and list(table.columns) == ["a", "b", "c"]
    assert table.loc["PC2", "b"] == pytest.approx(np.corrcoef(sample[:, 1], sample[:, 3])[0, 1])
    with pytest.raises(DimensionMismatchError):
        correlate(sample[:10, :2], sample[:, 2:5])


# ----------------------------------------------------------------- eigen decomposition


def test_jacobi_matches_numpy():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((35, 35))
    A = (B + B.T) / 2
    values, vectors = jacobi_eigh(A)
    np.testing.assert_allclose(np.sort(values), np.linalg.eigvalsh(A), atol=1e-10)
    np.testing.assert_allclose(vectors.T @ vectors, np.eye(35), atol=1e-10)
    np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, A, atol=1e-10)


def test_jacobi_characteristic_polynomial():
    A = np.array(
        [
            [4.0, 1.0, -2.0, 2.0],
            [1.0, 2.0, 0.0, 1.0],
            [-2.0, 0.0, 3.0, -2.0],
            [2.0, 1.0, -2.0, -1.0],
        ]
    )
    values, _ = jacobi_eigh(A)
    roots = np.sort(np.real(np.roots(np.poly(A))))
    np.testing.assert_allclose(np.sort(values), roots, atol=1e-8)


def test_jacobi_diagonal_input():
    values, vectors = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(values, [3.0, 1.0, 2.0])
    np.testing.assert_array_equal(vectors, np.eye(3))


def test_jacobi_requires_square():
    with pytest.raises(DimensionMismatchError):
        jacobi_eigh(np.zeros((2, 3)))


# ----------------------------------------------------------------- PCA


def test_rank_one_data():
    u = np.array([1.0, 2.0, -3.0]) / np.sqrt(14.0)
    t = np.linspace(-3, 3, 20)
    X = np.outer(t, u) + np.array([5.0, -1.0, 2.0])
    model = fit_pca(X)
    assert model.explained_fraction[0] == pytest.approx(1.0, abs=1e-12)
    assert model.eigenvalues[0] == pytest.approx(t.var(ddof=1))
    # 絕對值最大的載荷為正
    np.testing.assert_allclose(model.components[0], -u, atol=1e-10)


def test_components_orthonormal(sample):
    C = fit_pca(sample).components_array()
    np.testing.assert_allclose(C @ C.T, np.eye(6), atol=1e-10)


def test_eigenvalues_sorted_and_fractions_sum_to_one(sample):
    model = fit_pca(sample)
    assert all(a >= b for a, b in zip(model.eigenvalues, model.eigenvalues[1:]))
    assert sum(model.explained_fraction) == pytest.approx(1.0, abs=1e-12)
    assert all(f >= 0 for f in model.explained_fraction)


def test_score_variances_equal_eigenvalues(sample):
    model = fit_pca(sample)
    scores = project(model, sample, model.k_max)
    cov = np.cov(scores, rowvar=False)
    np.testing.assert_allclose(np.diag(cov), model.eigenvalues, rtol=1e-9)
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-9)


def test_isotropic_cloud():
    X = np.random.default_rng(31).standard_normal((100_000, 4))
    model = fit_pca(X)
    np.testing.assert_allclose(model.eigenvalues, 1.0, atol=0.03)
    np.testing.assert_allclose(model.explained_fraction, 0.25, atol=0.01)


def test_standardized_pca_trace(sample):
    model = fit_pca(sample, standardize=True)
    assert sum(model.eigenvalues) == pytest.approx(6.0)
    with pytest.raises(ZeroVarianceError):
        fit_pca(np.column_stack([sample[:, 0], np.ones(len(sample))]), standardize=True)


def test_row_permutation_invariance(sample):
    base = fit_pca(sample)
    shuffled = fit_pca(sample[np.random.default_rng(4).permutation(len(sample))])
    np.testing.assert_allclose(shuffled.eigenvalues, base.eigenvalues, rtol=1e-10)
    np.testing.assert_allclose(shuffled.components, base.components, atol=1e-8)


def test_requires_two_rows():
    with pytest.raises(InsufficientDataError):
        fit_pca(np.ones((1, 3)))


# ----------------------------------------------------------------- selection, projection


def _model(eigenvalues):
    n = len(eigenvalues)
    total = sum(eigenvalues)
    return PCAModel(
        mean=[0.0] * n,
        scale=[1.0] * n,
        components=np.eye(n).tolist(),
        eigenvalues=list(eigenvalues),
        explained_fraction=[v / total for v in eigenvalues],
    )


@pytest.mark.parametrize("tau, k", [(0.5, 1), (0.8, 2), (0.85, 3), (1.0, 4)])
def test_variance_selection(tau, k):
    assert select_components(_model([5.0, 3.0, 1.0, 1.0]), ComponentSelection.variance(tau)) == k


def test_fixed_selection():
    model = _model([5.0, 3.0, 1.0, 1.0])
    assert select_components(model, ComponentSelection.fixed(3)) == 3
    with pytest.raises(ConfigError):
        select_components(model, ComponentSelection.fixed(5))


@pytest.mark.parametrize("build", [lambda: ComponentSelection.fixed(0), lambda: ComponentSelection.variance(0.0), lambda: ComponentSelection.variance(1.5)])
def test_invalid_selection(build):
    with pytest.raises(ConfigError):
        build()


def test_selection_describe():
    assert ComponentSelection.fixed(6).describe() == "k=6"
    assert ComponentSelection.variance(0.9).describe() == "tau=0.9"


def test_project_mean_row_is_origin(sample):
    model = fit_pca(sample)
    scores = project(model, np.asarray(model.mean), 3)
    assert scores.shape == (3,)
    np.testing.assert_allclose(scores, 0.0, atol=1e-12)


def test_project_errors(sample):
    model = fit_pca(sample)
    for k in (0, 7):
        with pytest.raises(DimensionMismatchError):
            project(model, sample, k)
    with pytest.raises(DimensionMismatchError):
        project(model, sample[:, :5], 2)


def test_reconstruction(sample):
    model = fit_pca(sample)
    np.testing.assert_allclose(reconstruct(model, project(model, sample, 6)), sample, atol=1e-9)
    errors = [np.sum((reconstruct(model, project(model, sample, k)) - sample) ** 2) for k in range(1, 7)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errors, errors[1:]))


def test_report_tables(sample):
    model = fit_pca(sample)
    curve = variance_curve(model)
    assert list(curve.columns) == ["component", "eigenvalue", "explained_fraction", "cumulative_fraction"]
    assert curve["cumulative_fraction"].iloc[-1] == pytest.approx(1.0)
    loadings = loadings_table(model, list("abcdef"))
    assert loadings.shape == (6, 7)
    with pytest.raises(DimensionMismatchError):
        loadings_table(model, ["a"])
