"""
準二項 logit GLM
以迭代重加權最小平方法 (IRLS) 擬合 logit(E[y]) = β0 + Σ βi·s_i，y ∈ (0,1)
"""
import logging
from typing import List, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import special

from services.errors import DimensionMismatchError, DomainError, InsufficientDataError, ZeroVarianceError

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
BETA_TOL = 1e-8
DEVIANCE_TOL = 1e-10
RIDGE_JITTER = 1e-10
MAX_HALVINGS = 30
CONDITION_LIMIT = 1e14

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(float).tiny


def logit(p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """logit(p) = ln(p / (1-p))，p 必須在 (0,1)"""
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0)) or np.any(~(arr < 1)):
        raise DomainError("logit 的輸入必須在 (0, 1) 之內")
    out = special.logit(arr)
    return out if np.ndim(p) else float(out)


def sigmoid(z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    數值穩定的 1 / (1 + e^-z)

    輸出夾在開區間 (0,1) 內，大 |z| 也不會等於 0 或 1。
    """
    arr = np.asarray(z, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    out = np.clip(out, _TINY, _ONE_BELOW)
    return out if np.ndim(z) else float(out)


def design(scores: np.ndarray) -> np.ndarray:
    """在分數矩陣前加上截距欄"""
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    return np.hstack([np.ones((S.shape[0], 1)), S])


def _log_mu(eta: np.ndarray):
    # log μ 與 log(1-μ)，不經過 μ 本身
    return -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)


def deviance(y: np.ndarray, mu: np.ndarray) -> float:
    """準二項偏差 2 Σ [y ln(y/μ) + (1-y) ln((1-y)/(1-μ))]"""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    terms = special.xlogy(y, y) - special.xlogy(y, mu) + special.xlogy(1 - y, 1 - y) - special.xlogy(1 - y, 1 - mu)
    return float(2.0 * np.sum(terms))


def quasi_log_likelihood(beta: np.ndarray, X1: np.ndarray, y: np.ndarray) -> float:
    """
    準概似 Q(β) = Σ [y ln μ + (1-y) ln(1-μ)]

    Args:
        beta: 含截距的係數
        X1: 含截距欄的設計矩陣（見 design）
        y: (0,1) 之間的目標值
    """
    eta = X1 @ np.asarray(beta, dtype=float)
    log_mu, log_one_minus = _log_mu(eta)
    return float(np.sum(y * log_mu + (1 - y) * log_one_minus))


def quasi_score(beta: np.ndarray, X1: np.ndarray, y: np.ndarray) -> np.ndarray:
    """準概似的梯度 X1ᵀ (y - μ)"""
    mu = sigmoid(X1 @ np.asarray(beta, dtype=float))
    return X1.T @ (np.asarray(y, dtype=float) - mu)


class GLMModel(BaseModel):
    """擬合結果：beta[0] 為截距"""

    model_config = ConfigDict(frozen=True)

    beta: List[float]
    converged: bool
    iterations: int
    final_deviance: float
    deviance_trace: List[float] = []

    @property
    def k(self) -> int:
        return len(self.beta) - 1


def _weighted_solve(X1: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """解 (XᵀWX) β = XᵀWz；矩陣病態時加上嶺項"""
    A = X1.T @ (w[:, None] * X1)
    b = X1.T @ (w * z)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > CONDITION_LIMIT:
        logger.warning("[glm] XᵀWX 接近奇異，加上嶺項 %.0e", RIDGE_JITTER)
        A = A + RIDGE_JITTER * np.eye(A.shape[0])
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        logger.warning("[glm] XᵀWX 奇異，加上嶺項 %.0e", RIDGE_JITTER)
        return np.linalg.solve(A + RIDGE_JITTER * np.eye(A.shape[0]), b)


def fit_glm(scores: np.ndarray, y: np.ndarray, max_iterations: int = MAX_ITERATIONS) -> GLMModel:
    """
    以 IRLS 擬合準二項 logit 模型

    偏差若上升則將步長減半；減半仍無法下降時保留前一個 β 並停止，此時除非上升量在容許誤差內，
    否則 converged 為 False。收斂條件: max|Δβ| < BETA_TOL，或 |Δ偏差| / (|偏差| + 0.1) < DEVIANCE_TOL。

    Args:
        scores: m × k 主成分分數
        y: 長度 m 的目標值，皆須在 (0,1)
        max_iterations: 最大迭代次數

    Returns:
        GLMModel
    """
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    m, k = S.shape
    if y.shape[0] != m:
        raise DimensionMismatchError(f"分數有 {m} 列，目標值有 {y.shape[0]} 個")
    if m <= k + 1:
        raise InsufficientDataError(f"擬合 {k} 個主成分至少需要 {k + 2} 個樣本，目前只有 {m} 個")
    if np.any(~(y > 0)) or np.any(~(y < 1)):
        raise DomainError("GLM 目標值必須在 (0, 1) 之內")

    X1 = design(S)
    mu = (y + 0.5) / 2.0
    eta = special.logit(mu)
    beta = None
    dev = deviance(y, mu)
    trace: List[float] = []
    converged = False
    stalled = False
    iterations = 0

    for iteration in range(1, max_iterations + 1):
        iterations = iteration
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        candidate = _weighted_solve(X1, z, w)
        eta_new = X1 @ candidate
        mu_new = sigmoid(eta_new)
        dev_new = deviance(y, mu_new)

        if beta is not None and dev_new > dev:
            for _ in range(MAX_HALVINGS):
                candidate = (beta + candidate) / 2.0
                eta_new = X1 @ candidate
                mu_new = sigmoid(eta_new)
                dev_new = deviance(y, mu_new)
                if dev_new <= dev:
                    break
            else:
                # 上升量在容許誤差內表示已停在最小值，否則視為未收斂
                converged = bool(dev_new - dev <= DEVIANCE_TOL * (abs(dev) + 0.1))
                if not converged:
                    logger.warning(
                        "[glm] 步長減半 %d 次後偏差仍上升，停在第 %d 次迭代（偏差 %.6g）", MAX_HALVINGS, iteration, dev
                    )
                stalled = True
                break

        beta_change = np.inf if beta is None else float(np.max(np.abs(candidate - beta)))
        dev_change = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta, eta, mu, dev = candidate, eta_new, mu_new, dev_new
        trace.append(dev)
        if beta_change < BETA_TOL or (len(trace) > 1 and dev_change < DEVIANCE_TOL):
            converged = True
            break

    if not converged and not stalled:
        logger.warning("[glm] IRLS 在 %d 次迭代內未收斂（偏差 %.6g）", max_iterations, dev)
    return GLMModel(
        beta=np.asarray(beta, dtype=float).tolist(),
        converged=converged,
        iterations=iterations,
        final_deviance=dev,
        deviance_trace=trace,
    )


def predict_norm(model: GLMModel, scores: np.ndarray) -> np.ndarray:
    """ŷ_norm = sigmoid(β0 + Σ βi·s_i)；一維輸入視為單列"""
    S = np.asarray(scores, dtype=float)
    S2 = S.reshape(1, -1) if S.ndim == 1 else S
    if S2.shape[1] != model.k:
        raise DimensionMismatchError(f"模型需要 {model.k} 個分數，得到 {S2.shape[1]}")
    out = sigmoid(design(S2) @ np.asarray(model.beta))
    return out[0] if S.ndim == 1 else out


def r_squared(actual: np.ndarray, predicted: np.ndarray) -> float:
    """R² = 1 - Σ(y-ŷ)² / Σ(y-ȳ)²"""
    y = np.asarray(actual, dtype=float).ravel()
    yhat = np.asarray(predicted, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise DimensionMismatchError(f"長度不符: {y.size} vs {yhat.size}")
    if y.size < 2:
        raise InsufficientDataError("R² 至少需要 2 個觀測值")
    total = np.sum((y - y.mean()) ** 2)
    if total == 0:
        raise ZeroVarianceError("y")
    return float(1.0 - np.sum((y - yhat) ** 2) / total)
