"""
分位數正規化服務
以最大概似法在常態與對數常態之間擇優擬合，並用 CDF 映射到 (0,1) 及反向映射
"""
from enum import Enum
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import special, stats

from services.errors import DegenerateDistributionError, DomainError, InsufficientDataError

# logit 在 {0,1} 發散，分位數夾在 [EPS, 1-EPS]
QUANTILE_EPS = 1e-6
TIE_TOLERANCE = 1e-12
MIN_SAMPLES = 3

ArrayLike = Union[float, np.ndarray]


class Family(str, Enum):
    NORMAL = "normal"
    LOGNORMAL = "lognormal"


class FittedDistribution(BaseModel):
    """擬合後的分布（不可變）"""

    model_config = ConfigDict(frozen=True)

    family: Family
    mu: float
    sigma: float = Field(gt=0)
    log_likelihood: float
    n: int = Field(ge=MIN_SAMPLES)

    @field_validator("mu", "log_likelihood")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("必須是有限值")
        return value

    def _z(self, x: np.ndarray) -> np.ndarray:
        if self.family is Family.LOGNORMAL:
            return (np.log(x) - self.mu) / self.sigma
        return (x - self.mu) / self.sigma

    def cdf(self, x: ArrayLike) -> ArrayLike:
        """未夾值的 CDF"""
        arr = np.asarray(x, dtype=float)
        if self.family is Family.LOGNORMAL:
            out = np.zeros_like(arr)
            pos = arr > 0
            out[pos] = special.ndtr(self._z(arr[pos]))
        else:
            out = special.ndtr(self._z(arr))
        return out if np.ndim(x) else float(out)

    def pdf(self, x: ArrayLike) -> ArrayLike:
        arr = np.asarray(x, dtype=float)
        if self.family is Family.LOGNORMAL:
            out = stats.lognorm.pdf(arr, s=self.sigma, scale=np.exp(self.mu))
        else:
            out = stats.norm.pdf(arr, loc=self.mu, scale=self.sigma)
        return out if np.ndim(x) else float(out)


def _normal_mle(x: np.ndarray):
    mu = float(x.mean())
    # 最大概似估計使用母體變異數 (1/N)
    sigma = float(np.sqrt(np.mean((x - mu) ** 2)))
    ll = float(stats.norm.logpdf(x, loc=mu, scale=sigma).sum())
    return mu, sigma, ll


def fit_distribution(samples: np.ndarray) -> FittedDistribution:
    """
    以最大概似擬合常態與（樣本全為正時）對數常態，回傳概似較大者

    兩者差距小於 1e-12 時選常態。
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise InsufficientDataError(f"至少需要 {MIN_SAMPLES} 個樣本，目前只有 {x.size} 個")
    if not np.all(np.isfinite(x)):
        raise DomainError("樣本含有 NaN 或無限值")
    if np.ptp(x) == 0:
        raise DegenerateDistributionError(f"所有樣本都等於 {x[0]}，無法擬合")

    mu, sigma, ll = _normal_mle(x)
    best = FittedDistribution(family=Family.NORMAL, mu=mu, sigma=sigma, log_likelihood=ll, n=x.size)

    if np.all(x > 0):
        log_x = np.log(x)
        mu_l = float(log_x.mean())
        sigma_l = float(np.sqrt(np.mean((log_x - mu_l) ** 2)))
        if sigma_l > 0:
            ll_l = float(stats.lognorm.logpdf(x, s=sigma_l, scale=np.exp(mu_l)).sum())
            if ll_l - ll >= TIE_TOLERANCE:
                best = FittedDistribution(
                    family=Family.LOGNORMAL, mu=mu_l, sigma=sigma_l, log_likelihood=ll_l, n=x.size
                )
    return best


def to_quantile(x: ArrayLike, dist: FittedDistribution, strict: bool = True) -> ArrayLike:
    """
    x 映射到分位數，並夾在 [1e-6, 1-1e-6]

    Args:
        x: 原始值（純量或陣列）
        dist: 擬合分布
        strict: 對數常態下 x ≤ 0 時是否報錯；False 時直接夾到下限
    """
    arr = np.asarray(x, dtype=float)
    if dist.family is Family.LOGNORMAL and np.any(arr <= 0):
        if strict:
            raise DomainError("對數常態分布下 x 必須大於 0")
    p = np.clip(dist.cdf(arr), QUANTILE_EPS, 1 - QUANTILE_EPS)
    return p if np.ndim(x) else float(p)


def from_quantile(p: ArrayLike, dist: FittedDistribution) -> ArrayLike:
    """
    反 CDF：F⁻¹(p)

    先以 ndtri 求 z，再做一次牛頓修正。
    """
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0) or np.any(arr >= 1):
        raise DomainError("p 必須在 (0, 1) 之內")
    z = special.ndtri(arr)
    density = stats.norm.pdf(z)
    z = np.where(density > 0, z - (special.ndtr(z) - arr) / np.where(density > 0, density, 1.0), z)
    value = dist.mu + dist.sigma * z
    if dist.family is Family.LOGNORMAL:
        value = np.exp(value)
    return value if np.ndim(p) else float(value)
