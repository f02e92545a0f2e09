"""
準二項 logit GLM 測試：連結函數、IRLS 收斂、與 statsmodels 對照、R²
"""
import logging
import math
import warnings

import numpy as np
import pytest

from services import glm
from services.errors import DimensionMismatchError, DomainError, InsufficientDataError, ZeroVarianceError
from services.glm import (
    GLMModel,
    design,
    fit_glm,
    logit,
    predict_norm,
    quasi_log_likelihood,
    quasi_score,
    r_squared,
    sigmoid,
)

EPS = np.finfo(float).eps


def _problem(seed, m=60, k=3):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((m, k))
    y = rng.uniform(0.05, 0.95, size=m)
    return S, y


# ----------------------------------------------------------------- link


def test_logit_values():
    assert logit(0.5) == 0.0
    assert logit(0.75) == pytest.approx(math.log(3))
    assert isinstance(logit(0.25), float)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.2, float("nan")])
def test_logit_domain(p):
    with pytest.raises(DomainError):
        logit(p)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3)) == pytest.approx(0.75)
    out = sigmoid(np.array([-800.0, 800.0]))
    assert 0.0 < out[0] and out[1] < 1.0


def test_logit_inverts_sigmoid():
    z = np.linspace(-30, 30, 601)
    err = np.abs(logit(sigmoid(z)) - z)
    assert np.all(err <= 1e-12 + 4 * EPS * (1 + np.exp(z)))


def test_design_adds_intercept():
    X1 = design(np.array([[2.0, 3.0]]))
    np.testing.assert_array_equal(X1, [[1.0, 2.0, 3.0]])


# ----------------------------------------------------------------- fitting


def test_exact_recovery():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((100, 3))
    beta = np.array([0.3, 1.0, -0.5, 0.25])
    y = sigmoid(design(S) @ beta)
    model = fit_glm(S, y)
    assert model.converged
    assert model.k == 3
    np.testing.assert_allclose(model.beta, beta, atol=1e-6)
    assert model.final_deviance == pytest.approx(0.0, abs=1e-10)


def test_constant_half_gives_zero_coefficients():
    S, _ = _problem(2)
    model = fit_glm(S, np.full(len(S), 0.5))
    np.testing.assert_allclose(model.beta, 0.0, atol=1e-8)


def test_score_is_gradient():
    S, y = _problem(3)
    X1 = design(S)
    beta = np.array([0.1, -0.4, 0.7, 0.2])
    h = 1e-6
    numeric = np.array(
        [
            (quasi_log_likelihood(beta + h * e, X1, y) - quasi_log_likelihood(beta - h * e, X1, y)) / (2 * h)
            for e in np.eye(len(beta))
        ]
    )
    np.testing.assert_allclose(quasi_score(beta, X1, y), numeric, rtol=1e-5, atol=1e-6)


def test_score_vanishes_at_fit():
    S, y = _problem(4)
    model = fit_glm(S, y)
    np.testing.assert_allclose(quasi_score(np.array(model.beta), design(S), y), 0.0, atol=1e-6)


def test_deviance_trace_monotone():
    for seed in range(100):
        S, y = _problem(seed, m=30, k=2)
        trace = fit_glm(S, y).deviance_trace
        assert all(b <= a for a, b in zip(trace, trace[1:])), seed


def test_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    S, y = _problem(5, m=80, k=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reference = sm.GLM(y, sm.add_constant(S), family=sm.families.Binomial()).fit()
    model = fit_glm(S, y)
    np.testing.assert_allclose(model.beta, reference.params, rtol=1e-5, atol=1e-6)
    assert model.final_deviance == pytest.approx(reference.deviance, rel=1e-6)


def test_deviance_stop_is_relative(monkeypatch):
    # 只靠偏差條件停止；資料重複 1000 次時偏差放大 1000 倍，停止點與係數不變
    monkeypatch.setattr(glm, "BETA_TOL", 0.0)
    S, y = _problem(8)
    single = fit_glm(S, y)
    tiled = fit_glm(np.tile(S, (1000, 1)), np.tile(y, 1000))
    assert single.converged and tiled.converged
    assert tiled.final_deviance == pytest.approx(1000 * single.final_deviance, rel=1e-9)
    assert abs(tiled.iterations - single.iterations) <= 1
    np.testing.assert_allclose(tiled.beta, single.beta, atol=1e-6)


def test_failed_step_halving_is_not_converged(monkeypatch, caplog):
    real = glm.deviance
    calls = []

    def rising(y, mu):
        calls.append(1)
        # 第二次迭代起每個候選步都比目前偏差大
        return real(y, mu) + (1e6 if len(calls) > 2 else 0.0)

    monkeypatch.setattr(glm, "deviance", rising)
    S, y = _problem(9)
    with caplog.at_level(logging.WARNING, logger="services.glm"):
        model = fit_glm(S, y)
    assert not model.converged
    assert model.iterations == 2
    assert len(model.deviance_trace) == 1
    assert any("步長減半" in r.getMessage() for r in caplog.records)


def test_row_permutation_invariance():
    S, y = _problem(6)
    perm = np.random.default_rng(0).permutation(len(y))
    np.testing.assert_allclose(fit_glm(S[perm], y[perm]).beta, fit_glm(S, y).beta, atol=1e-8)


def test_fit_errors():
    S, y = _problem(7, m=10, k=3)
    with pytest.raises(InsufficientDataError):
        fit_glm(S[:4], y[:4])
    with pytest.raises(DimensionMismatchError):
        fit_glm(S, y[:9])
    for bad in (0.0, 1.0, float("nan")):
        y_bad = y.copy()
        y_bad[3] = bad
        with pytest.raises(DomainError):
            fit_glm(S, y_bad)


# ----------------------------------------------------------------- prediction, R²


def _model(beta):
    return GLMModel(beta=beta, converged=True, iterations=1, final_deviance=0.0)


def test_predict_norm():
    model = _model([0.0, 1.0])
    np.testing.assert_allclose(predict_norm(model, np.array([[0.0], [math.log(3)]])), [0.5, 0.75])
    single = predict_norm(_model([0.5, 1.0, -1.0]), np.array([1.0, 1.0]))
    assert np.ndim(single) == 0 and float(single) == pytest.approx(sigmoid(0.5))
    with pytest.raises(DimensionMismatchError):
        predict_norm(model, np.array([[1.0, 2.0]]))


def test_extreme_scores_stay_inside_unit_interval():
    out = predict_norm(_model([0.0, 1.0]), np.array([[-1e3], [1e3]]))
    assert np.all((out > 0) & (out < 1))
    assert np.all(np.isfinite(logit(out)))


def test_r_squared_values():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(3, 2.0)) == 0.0
    assert r_squared(y, np.array([1.0, 2.0, 4.0])) == pytest.approx(0.5)


def test_r_squared_errors():
    with pytest.raises(InsufficientDataError):
        r_squared([1.0], [1.0])
    with pytest.raises(ZeroVarianceError) as info:
        r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert info.value.column == "y"
    with pytest.raises(DimensionMismatchError):
        r_squared([1.0, 2.0], [1.0, 2.0, 3.0])
