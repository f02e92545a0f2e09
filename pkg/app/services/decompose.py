"""
相關分析與主成分分析
"""
import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from services.errors import ConfigError, DimensionMismatchError, InsufficientDataError, ZeroVarianceError

logger = logging.getLogger(__name__)

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 60


def _column_name(names: Optional[Sequence[str]], j: int) -> str:
    return names[j] if names is not None else f"column {j + 1}"


def correlation_matrix(X: np.ndarray, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    R(i,j) = C(i,j) / sqrt(C(i,i) C(j,j))，C 為欄位共變異數矩陣

    Args:
        X: m × n 矩陣（列為觀測）
        names: 欄位名稱，用於錯誤訊息
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m, n = X.shape
    if m < 2:
        raise InsufficientDataError("相關矩陣至少需要 2 列")
    centered = X - X.mean(axis=0)
    C = centered.T @ centered / (m - 1)
    d = np.diag(C).copy()
    for j in range(n):
        if d[j] <= 0:
            raise ZeroVarianceError(_column_name(names, j))
    R = C / np.sqrt(np.outer(d, d))
    R = np.clip((R + R.T) / 2, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def correlate(
    scores: np.ndarray,
    targets: np.ndarray,
    score_names: Optional[Sequence[str]] = None,
    target_names: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """分數欄位與目標欄位之間的 Pearson 相關（k × t 表）"""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if scores.shape[0] != targets.shape[0]:
        raise DimensionMismatchError(f"列數不符: {scores.shape[0]} vs {targets.shape[0]}")
    k, t = scores.shape[1], targets.shape[1]
    score_names = list(score_names or [f"PC{i + 1}" for i in range(k)])
    target_names = list(target_names or [f"target{j + 1}" for j in range(t)])
    R = correlation_matrix(np.hstack([scores, targets]), score_names + target_names)
    return pd.DataFrame(R[:k, k:], index=score_names, columns=target_names)


def jacobi_eigh(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    對稱矩陣的循環 Jacobi 特徵分解

    Returns:
        (特徵值, 特徵向量矩陣)，向量為欄；未排序
    """
    a = np.array(A, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionMismatchError(f"需要方陣，得到 {a.shape}")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0:
        return np.diag(a).copy(), v

    previous = np.inf
    for sweep in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        # 捨入誤差讓非對角範數停在 eps 附近
        if off <= tol * scale or off >= previous:
            break
        previous = off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("[pca] Jacobi 在 %d 輪內未收斂", max_sweeps)
    return np.diag(a).copy(), v


class PCAModel(BaseModel):
    """主成分模型：components 的每一列為一個單位長度的載荷向量"""

    model_config = ConfigDict(frozen=True)

    mean: List[float]
    scale: List[float]
    components: List[List[float]]
    eigenvalues: List[float]
    explained_fraction: List[float]

    @property
    def k_max(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def components_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=float)


def fit_pca(X_norm: np.ndarray, standardize: bool = False) -> PCAModel:
    """
    對正規化後的指標做共變異數 PCA

    Args:
        X_norm: m × n 正規化矩陣
        standardize: 是否再除以標準差（改做相關矩陣 PCA）

    Returns:
        PCAModel；特徵值遞減，每個成分絕對值最大的載荷為正
    """
    X = np.atleast_2d(np.asarray(X_norm, dtype=float))
    m, n = X.shape
    if m < 2:
        raise InsufficientDataError(f"PCA 至少需要 2 列，目前只有 {m} 列")

    mean = X.mean(axis=0)
    centered = X - mean
    scale = np.ones(n)
    if standardize:
        scale = centered.std(axis=0, ddof=1)
        zero = np.nonzero(scale == 0)[0]
        if zero.size:
            raise ZeroVarianceError(f"column {zero[0] + 1}")
        centered = centered / scale

    cov = centered.T @ centered / (m - 1)
    cov = (cov + cov.T) / 2
    values, vectors = jacobi_eigh(cov)

    order = np.argsort(-values, kind="stable")
    values = np.clip(values[order], 0.0, None)
    components = vectors[:, order].T.copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0

    total = values.sum()
    if total <= 0:
        raise ZeroVarianceError("(全部)")
    return PCAModel(
        mean=mean.tolist(),
        scale=scale.tolist(),
        components=components.tolist(),
        eigenvalues=values.tolist(),
        explained_fraction=(values / total).tolist(),
    )


class ComponentSelection(BaseModel):
    """主成分數的選擇方式：固定 k，或累積解釋變異門檻 τ"""

    model_config = ConfigDict(frozen=True)

    mode: Literal["fixed", "variance"] = "fixed"
    k: Optional[int] = 6
    tau: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "ComponentSelection":
        if self.mode == "fixed":
            if self.k is None or self.k < 1:
                raise ValueError("固定模式的 k 必須 ≥ 1")
        else:
            if self.tau is None or not 0 < self.tau <= 1:
                raise ValueError("變異門檻 τ 必須在 (0, 1]")
        return self

    @classmethod
    def fixed(cls, k: int) -> "ComponentSelection":
        try:
            return cls(mode="fixed", k=k)
        except ValidationError as e:
            raise ConfigError(f"不合法的主成分數 k={k}") from e

    @classmethod
    def variance(cls, tau: float) -> "ComponentSelection":
        try:
            return cls(mode="variance", k=None, tau=tau)
        except ValidationError as e:
            raise ConfigError(f"不合法的變異門檻 τ={tau}") from e

    def describe(self) -> str:
        return f"k={self.k}" if self.mode == "fixed" else f"tau={self.tau}"


def select_components(model: PCAModel, selection: ComponentSelection) -> int:
    """依選擇方式決定主成分數 k"""
    if selection.mode == "fixed":
        if selection.k > model.k_max:
            raise ConfigError(f"k={selection.k} 超過主成分總數 {model.k_max}")
        return selection.k
    cumulative = np.cumsum(model.explained_fraction)
    reached = np.nonzero(cumulative >= selection.tau * (1 - 1e-12))[0]
    k = int(reached[0]) + 1 if reached.size else model.k_max
    return min(k, model.k_max)


def _check_columns(model: PCAModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X2 = X.reshape(1, -1) if X.ndim == 1 else X
    if X2.shape[1] != model.n_features:
        raise DimensionMismatchError(f"需要 {model.n_features} 個欄位，得到 {X2.shape[1]}")
    return X2


def project(model: PCAModel, X: np.ndarray, k: int) -> np.ndarray:
    """scores = (X - mean) · componentsᵀ，只取前 k 個成分"""
    if not 1 <= k <= model.k_max:
        raise DimensionMismatchError(f"k={k} 必須在 1..{model.k_max}")
    X2 = _check_columns(model, X)
    centered = (X2 - np.asarray(model.mean)) / np.asarray(model.scale)
    scores = centered @ model.components_array()[:k].T
    return scores[0] if np.ndim(X) == 1 else scores


def reconstruct(model: PCAModel, scores: np.ndarray) -> np.ndarray:
    """由前 k 個主成分分數重建原始座標"""
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    k = S.shape[1]
    if k > model.k_max:
        raise DimensionMismatchError(f"k={k} 超過主成分總數 {model.k_max}")
    return S @ model.components_array()[:k] * np.asarray(model.scale) + np.asarray(model.mean)


def variance_curve(model: PCAModel) -> pd.DataFrame:
    """各主成分的特徵值、解釋比例與累積比例"""
    fraction = np.asarray(model.explained_fraction)
    return pd.DataFrame(
        {
            "component": np.arange(1, model.k_max + 1),
            "eigenvalue": model.eigenvalues,
            "explained_fraction": fraction,
            "cumulative_fraction": np.cumsum(fraction),
        }
    )


def loadings_table(model: PCAModel, names: Sequence[str]) -> pd.DataFrame:
    if len(names) != model.n_features:
        raise DimensionMismatchError(f"需要 {model.n_features} 個名稱，得到 {len(names)}")
    frame = pd.DataFrame(model.components_array(), columns=list(names))
    frame.insert(0, "component", np.arange(1, model.k_max + 1))
    return frame
