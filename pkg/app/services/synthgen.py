"""
合成資料產生器
以潛在因子植入已知關係，產生區域表、交易資料、官方指數與真實參數，
讓整條管線能在沒有真實刷卡資料時被測試
"""
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import special

from services.aggregates import CATEGORY_COUNT, GROUP_COUNT, REGION_COLUMNS, region_table_from_frame
from services.decompose import project
from services.errors import CardEconError, ConfigError
from services.indicators import compute_indicators
from services.ingest import TRANSACTION_COLUMNS, ingest_frame
from services.pipeline import INDEX_NAMES, NONNEGATIVE_INDICES, OfficialIndices, fit_features, normalize_matrix
from utils.tables import write_table

logger = logging.getLogger(__name__)

GROUND_TRUTH_VERSION = 1
YEAR_START = np.datetime64("2011-01-01T00:00", "m")
DAYS_IN_YEAR = 365
# 2011-01-01 是星期六
_WEEKDAY = (5 + np.arange(DAYS_IN_YEAR)) % 7
WEEKEND_DAYS = np.nonzero(_WEEKDAY >= 5)[0]
WEEKDAY_DAYS = np.nonzero(_WEEKDAY < 5)[0]
NIGHT_MINUTES = 8 * 60
COUNTRY_CODES = ("FR", "DE", "GB", "IT", "US", "NL", "PT", "BE", "CH", "SE")

# 隨機子串流編號
_PARAMS, _REGIONS, _ALLOCATION, _NOISE, _REGION_BASE = 0, 1, 2, 3, 1000

IndexBasis = Literal["features", "factors"]


class IndexPrior(BaseModel):
    """官方指數的邊際分布"""

    model_config = ConfigDict(frozen=True)

    family: Literal["normal", "lognormal"]
    mu: float
    sigma: float = Field(gt=0)

    def ppf(self, p: np.ndarray) -> np.ndarray:
        value = self.mu + self.sigma * special.ndtri(p)
        return np.exp(value) if self.family == "lognormal" else value


DEFAULT_INDEX_PRIORS = {
    "gdp": IndexPrior(family="lognormal", mu=float(np.log(23000.0)), sigma=0.22),
    "housing_price": IndexPrior(family="lognormal", mu=float(np.log(1700.0)), sigma=0.35),
    "unemployment_rate": IndexPrior(family="normal", mu=21.0, sigma=5.5),
    "higher_education_pct": IndexPrior(family="normal", mu=31.0, sigma=7.0),
    "crime_rate": IndexPrior(family="normal", mu=46.0, sigma=11.0),
    "life_expectancy": IndexPrior(family="normal", mu=82.0, sigma=1.1),
}


def _share_range(value: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = value
    if not 0 < lo <= hi <= 1:
        raise ValueError("市佔率範圍必須滿足 0 < lo ≤ hi ≤ 1")
    return value


class SynthConfig(BaseModel):
    """合成資料設定"""

    model_config = ConfigDict(frozen=True)

    region_count: int = Field(default=52, ge=3)
    transactions_total: int = Field(default=1_000_000, ge=0)
    foreign_fraction: float = Field(default=0.06, ge=0, lt=1)
    customers_per_region_mean: float = Field(default=3000.0, gt=0)
    customers_per_region_sd_log: float = Field(default=0.5, ge=0)
    merchants_per_region_mean: float = Field(default=400.0, ge=0)
    merchants_per_region_sd_log: float = Field(default=0.4, ge=0)
    area_km2_median: float = Field(default=5000.0, gt=0)
    area_sd_log: float = Field(default=0.6, ge=0)

    latent_factor_count: int = Field(default=3, ge=1, le=20)
    activity_loading: float = 0.7
    category_loading_scale: float = Field(default=0.8, ge=0)
    category_mix: Optional[List[float]] = None
    category_loadings: Optional[List[List[float]]] = None
    index_loadings: Optional[List[List[float]]] = None
    index_basis: IndexBasis = "features"
    index_intercepts: List[float] = Field(default_factory=lambda: [0.0] * len(INDEX_NAMES))
    index_distributions: Dict[str, IndexPrior] = Field(default_factory=lambda: dict(DEFAULT_INDEX_PRIORS))
    noise_sd: Dict[str, float] = Field(default_factory=lambda: {name: 0.0 for name in INDEX_NAMES})
    nonlinearity: float = 0.0

    night_propensity: float = Field(default=0.1, gt=0, lt=1)
    weekend_propensity: float = Field(default=0.28, gt=0, lt=1)
    temporal_loading: float = 0.4
    stay_probability: float = Field(default=0.85, gt=0, lt=1)
    customer_share_range: Tuple[float, float] = (0.05, 0.4)
    business_share_range: Tuple[float, float] = (0.1, 0.6)
    seed: int = 2011

    @field_validator("customer_share_range", "business_share_range")
    @classmethod
    def _check_share_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _share_range(value)

    @field_validator("noise_sd", mode="before")
    @classmethod
    def _broadcast_noise(cls, value):
        if isinstance(value, (int, float)):
            return {name: float(value) for name in INDEX_NAMES}
        return value

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        L = self.latent_factor_count
        unknown = set(self.noise_sd) - set(INDEX_NAMES)
        if unknown:
            raise ValueError(f"未知的指數: {', '.join(sorted(unknown))}")
        if any(v < 0 or not np.isfinite(v) for v in self.noise_sd.values()):
            raise ValueError("noise_sd 必須是 ≥ 0 的有限值")
        if set(self.index_distributions) != set(INDEX_NAMES):
            raise ValueError("index_distributions 必須剛好包含六個指數")
        if len(self.index_intercepts) != len(INDEX_NAMES):
            raise ValueError("index_intercepts 長度必須為 6")
        if self.category_mix is not None:
            mix = np.asarray(self.category_mix, dtype=float)
            if mix.shape != (CATEGORY_COUNT,) or np.any(mix <= 0) or abs(mix.sum() - 1) > 1e-12:
                raise ValueError("category_mix 必須是 76 個正值且總和為 1")
        if self.category_loadings is not None and np.shape(self.category_loadings) != (L, CATEGORY_COUNT):
            raise ValueError(f"category_loadings 形狀必須為 ({L}, {CATEGORY_COUNT})")
        if self.index_loadings is not None and np.shape(self.index_loadings) != (len(INDEX_NAMES), L):
            raise ValueError(f"index_loadings 形狀必須為 ({len(INDEX_NAMES)}, {L})")
        if self.transactions_total > 0 and self.merchants_per_region_mean == 0:
            raise ValueError("有交易時每個區域至少需要一個商戶")
        return self

    def noise(self, name: str) -> float:
        return float(self.noise_sd.get(name, 0.0))

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canonical.encode("utf-8")).hexdigest()


def make_config(data: Optional[dict] = None, **overrides) -> SynthConfig:
    """建立設定；不合法時轉為 ConfigError"""
    try:
        return SynthConfig.model_validate({**(data or {}), **overrides})
    except ValidationError as e:
        raise ConfigError(f"合成資料設定不合法: {e}") from e


def load_synth_config(path: Path, **overrides) -> SynthConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"找不到合成資料設定檔: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定檔 {path} 不是合法的 JSON: {e}") from e
    return make_config(data, **overrides)


class GroundTruth(BaseModel):
    """植入的真實參數，供還原檢查使用"""

    model_config = ConfigDict(frozen=True)

    format_version: int = GROUND_TRUTH_VERSION
    seed: int
    config_hash: str
    region_ids: List[str]
    factors: List[List[float]]
    index_basis: IndexBasis = "factors"
    index_coordinates: List[List[float]] = Field(default_factory=list)
    activity_loading: float
    category_base_mix: List[float]
    category_loadings: List[List[float]]
    index_loadings: List[List[float]]
    index_intercepts: List[float]
    index_distributions: Dict[str, IndexPrior]
    noise_sd: Dict[str, float]
    nonlinearity: float
    business_market_share: List[float]

    def signal(self, coordinates: np.ndarray) -> np.ndarray:
        """無雜訊的指數值 F⁻¹(sigmoid(b + Cλ))，每欄一個指數；C 是每區域 L 個單位變異數座標"""
        F = np.atleast_2d(np.asarray(coordinates, dtype=float))
        eta = F @ np.asarray(self.index_loadings).T + np.asarray(self.index_intercepts)
        if self.nonlinearity:
            eta = eta + self.nonlinearity * (F[:, :1] ** 2 - 1.0)
        p = special.expit(eta)
        return np.column_stack([self.index_distributions[name].ppf(p[:, j]) for j, name in enumerate(INDEX_NAMES)])

    def clean_indices(self) -> np.ndarray:
        """植入區域上無雜訊的指數值"""
        return self.signal(np.asarray(self.index_coordinates or self.factors))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


@dataclass
class SynthCorpus:
    regions: pd.DataFrame
    transactions: pd.DataFrame
    indices: OfficialIndices
    ground_truth: GroundTruth


def _rng(seed: int, *words: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *words])))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


@dataclass
class _Plan:
    """整個語料共用的抽樣參數"""

    region_ids: List[str]
    factors: np.ndarray
    category_mix: np.ndarray  # R × 76
    category_price: np.ndarray  # 76
    area: np.ndarray
    customer_share: np.ndarray
    business_share: np.ndarray
    customers: np.ndarray
    destination: np.ndarray  # R × R，列為非本區消費的目的地機率
    merchant_region: np.ndarray
    merchant_category: np.ndarray
    merchant_price: np.ndarray
    merchant_ids: np.ndarray
    cell_start: np.ndarray  # R × 76
    cell_count: np.ndarray
    region_start: np.ndarray
    region_count: np.ndarray


def _plant_parameters(config: SynthConfig, region_count: int) -> Tuple[np.ndarray, ...]:
    rng = _rng(config.seed, _PARAMS)
    L = config.latent_factor_count
    factors = rng.standard_normal((region_count, L))
    base_mix = (
        np.asarray(config.category_mix)
        if config.category_mix is not None
        else rng.dirichlet(np.full(CATEGORY_COUNT, 2.0))
    )
    category_loadings = (
        np.asarray(config.category_loadings, dtype=float)
        if config.category_loadings is not None
        else rng.normal(0.0, config.category_loading_scale, size=(L, CATEGORY_COUNT))
    )
    if config.index_loadings is not None:
        index_loadings = np.asarray(config.index_loadings, dtype=float)
    else:
        raw = rng.standard_normal((len(INDEX_NAMES), L))
        index_loadings = 1.2 * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    category_price = np.exp(rng.normal(np.log(25.0), 0.7, size=CATEGORY_COUNT))
    return factors, base_mix, category_loadings, index_loadings, category_price


def _make_plan(config: SynthConfig) -> Tuple[_Plan, GroundTruth]:
    R = config.region_count
    width = max(2, len(str(R)))
    region_ids = [f"R{r + 1:0{width}d}" for r in range(R)]
    factors, base_mix, category_loadings, index_loadings, category_price = _plant_parameters(config, R)
    L = config.latent_factor_count

    rng = _rng(config.seed, _REGIONS)
    area = config.area_km2_median * np.exp(config.area_sd_log * rng.standard_normal(R))
    customer_share = rng.uniform(*config.customer_share_range, size=R)
    business_share = rng.uniform(*config.business_share_range, size=R)
    sd = config.customers_per_region_sd_log
    customers = np.maximum(
        1, np.rint(config.customers_per_region_mean * np.exp(sd * rng.standard_normal(R) - sd * sd / 2))
    ).astype(np.int64)

    mix = _softmax(np.log(base_mix) + factors @ category_loadings)
    attraction = np.sqrt(area) * np.exp(0.5 * factors[:, 0])
    destination = np.tile(attraction, (R, 1))
    np.fill_diagonal(destination, 0.0)
    destination /= destination.sum(axis=1, keepdims=True)

    # 商戶：每區數量、類別與價格倍率，依 (區域, 類別) 排序
    if config.merchants_per_region_mean > 0:
        sd = config.merchants_per_region_sd_log
        counts = np.maximum(
            1, np.rint(config.merchants_per_region_mean * np.exp(sd * rng.standard_normal(R) - sd * sd / 2))
        ).astype(np.int64)
    else:
        counts = np.zeros(R, dtype=np.int64)
    merchant_region = np.repeat(np.arange(R), counts)
    merchant_category = np.concatenate(
        [np.sort(rng.choice(CATEGORY_COUNT, size=n, p=mix[r])) for r, n in enumerate(counts)] or [np.empty(0, int)]
    ).astype(np.int64)
    merchant_price = np.exp(rng.normal(0.0, 0.3, size=merchant_region.size))
    local_index = np.concatenate([np.arange(n) for n in counts] or [np.empty(0, int)])
    merchant_ids = (
        pd.Series(np.asarray(region_ids, dtype=object)[merchant_region])
        + "-M"
        + pd.Series(local_index).astype(str).str.zfill(5)
    ).to_numpy()

    cell_key = merchant_region * CATEGORY_COUNT + merchant_category
    cell_count = np.bincount(cell_key, minlength=R * CATEGORY_COUNT).reshape(R, CATEGORY_COUNT)
    cell_start = (np.cumsum(cell_count.ravel()) - cell_count.ravel()).reshape(R, CATEGORY_COUNT)
    region_start = np.cumsum(counts) - counts

    plan = _Plan(
        region_ids=region_ids,
        factors=factors,
        category_mix=mix,
        category_price=category_price,
        area=area,
        customer_share=customer_share,
        business_share=business_share,
        customers=customers,
        destination=destination,
        merchant_region=merchant_region,
        merchant_category=merchant_category,
        merchant_price=merchant_price,
        merchant_ids=merchant_ids,
        cell_start=cell_start,
        cell_count=cell_count,
        region_start=region_start,
        region_count=counts,
    )
    truth = GroundTruth(
        seed=config.seed,
        config_hash=config.config_hash(),
        region_ids=region_ids,
        factors=factors.tolist(),
        index_coordinates=factors.tolist(),
        activity_loading=config.activity_loading,
        category_base_mix=np.asarray(base_mix, dtype=float).tolist(),
        category_loadings=category_loadings.tolist(),
        index_loadings=index_loadings.tolist(),
        index_intercepts=list(config.index_intercepts),
        index_distributions=dict(config.index_distributions),
        noise_sd={name: config.noise(name) for name in INDEX_NAMES},
        nonlinearity=config.nonlinearity,
        business_market_share=business_share.tolist(),
    )
    return plan, truth


def plant(config: SynthConfig) -> GroundTruth:
    """
    只產生真實參數（不產生交易），用於事先校準雜訊

    沒有交易就沒有指標，index_coordinates 是潛在因子本身
    """
    return _make_plan(config)[1]


def _temporal(rng: np.random.Generator, n: int, night_p: float, weekend_p: float) -> np.ndarray:
    night = rng.random(n) < night_p
    weekend = rng.random(n) < weekend_p
    day = np.where(
        weekend,
        WEEKEND_DAYS[rng.integers(0, WEEKEND_DAYS.size, size=n)],
        WEEKDAY_DAYS[rng.integers(0, WEEKDAY_DAYS.size, size=n)],
    )
    minute = np.where(
        night,
        (22 * 60 + rng.integers(0, NIGHT_MINUTES, size=n)) % (24 * 60),
        rng.integers(6 * 60, 22 * 60, size=n),
    )
    stamps = YEAR_START + (day * 24 * 60 + minute).astype("timedelta64[m]")
    return np.datetime_as_string(stamps, unit="m")


def _pick_merchants(plan: _Plan, rng: np.random.Generator, region: np.ndarray, category: np.ndarray) -> np.ndarray:
    # 該區沒有此類別商戶時，改選該區任一商戶
    u = rng.random(region.size)
    count = plan.cell_count[region, category]
    exact = plan.cell_start[region, category] + np.floor(u * count).astype(np.int64)
    fallback = plan.region_start[region] + np.floor(u * plan.region_count[region]).astype(np.int64)
    return np.where(count > 0, exact, fallback)


def _amounts(plan: _Plan, rng: np.random.Generator, merchants: np.ndarray, region: np.ndarray, scale: float) -> np.ndarray:
    category = plan.merchant_category[merchants]
    L = plan.factors.shape[1]
    euros = (
        plan.category_price[category]
        * plan.merchant_price[merchants]
        * np.exp(0.2 * plan.factors[region, 2 % L])
        * np.exp(rng.normal(0.0, 0.5, size=merchants.size))
        * scale
    )
    return np.maximum(1, np.rint(euros * 100)).astype(np.int64)


def _frame(
    plan: _Plan,
    prefix: str,
    customer_ids: pd.Series,
    kind: str,
    origin: np.ndarray,
    merchants: np.ndarray,
    amounts: np.ndarray,
    stamps: np.ndarray,
) -> pd.DataFrame:
    n = merchants.size
    category = plan.merchant_category[merchants] + 1
    return pd.DataFrame(
        {
            "txn_id": prefix + pd.Series(np.arange(n)).astype(str).str.zfill(8),
            "timestamp": stamps,
            "amount_cents": amounts,
            "customer_id": customer_ids.to_numpy(),
            "customer_kind": kind,
            "home_region_or_country": origin,
            "merchant_id": plan.merchant_ids[merchants],
            "merchant_region": np.asarray(plan.region_ids, dtype=object)[plan.merchant_region[merchants]],
            "category_id": category,
            "group_id": (category - 1) * GROUP_COUNT // CATEGORY_COUNT + 1,
        },
        columns=list(TRANSACTION_COLUMNS),
    )


def _region_block(config: SynthConfig, plan: _Plan, r: int, n_domestic: int, n_foreign: int) -> pd.DataFrame:
    """單一區域的交易：居民的國內交易，接著是在該區發生的外國交易"""
    rng = _rng(config.seed, _REGION_BASE + r)
    rid = plan.region_ids[r]
    L = plan.factors.shape[1]
    f = plan.factors[r]
    t = config.temporal_loading
    night_p = special.expit(special.logit(config.night_propensity) + t * f[1 % L])
    weekend_p = special.expit(special.logit(config.weekend_propensity) - t * f[1 % L])
    stay_p = special.expit(special.logit(config.stay_probability) + 0.5 * f[2 % L])

    blocks = []
    if n_domestic:
        stays = rng.random(n_domestic) < stay_p
        dest = np.where(stays, r, rng.choice(len(plan.region_ids), size=n_domestic, p=plan.destination[r]))
        wanted = rng.choice(CATEGORY_COUNT, size=n_domestic, p=plan.category_mix[r])
        merchants = _pick_merchants(plan, rng, dest, wanted)
        customer = pd.Series(rng.integers(0, plan.customers[r], size=n_domestic)).astype(str).str.zfill(6)
        blocks.append(
            _frame(
                plan,
                f"{rid}-D",
                f"{rid}-C" + customer,
                "D",
                np.full(n_domestic, rid, dtype=object),
                merchants,
                _amounts(plan, rng, merchants, np.full(n_domestic, r), 1.0),
                _temporal(rng, n_domestic, night_p, weekend_p),
            )
        )
    if n_foreign:
        wanted = rng.choice(CATEGORY_COUNT, size=n_foreign, p=plan.category_mix[r])
        merchants = _pick_merchants(plan, rng, np.full(n_foreign, r), wanted)
        customer = rng.integers(0, max(1, n_foreign // 4), size=n_foreign)
        countries = np.asarray(COUNTRY_CODES, dtype=object)[customer % len(COUNTRY_CODES)]
        blocks.append(
            _frame(
                plan,
                f"{rid}-X",
                f"{rid}-F" + pd.Series(customer).astype(str).str.zfill(6),
                "F",
                countries,
                merchants,
                _amounts(plan, rng, merchants, np.full(n_foreign, r), 1.2),
                _temporal(rng, n_foreign, config.night_propensity, config.weekend_propensity),
            )
        )
    if not blocks:
        return pd.DataFrame(columns=list(TRANSACTION_COLUMNS))
    return pd.concat(blocks, ignore_index=True)


def _feature_coordinates(
    region_ids: Sequence[str],
    regions: pd.DataFrame,
    transactions: pd.DataFrame,
    count: int,
    threads: int,
) -> Optional[np.ndarray]:
    """
    由實際產生的交易算出模型看得到的座標

    交易 → 35 個指標 → 分位數正規化 → PCA，取前 count 個主成分分數並縮放為單位變異數。
    下游在全部區域上擬合特徵時得到同一組主成分。無法擬合時回傳 None。
    """
    try:
        result = ingest_frame(transactions, region_table_from_frame(regions), threads=threads)
        matrix = compute_indicators(result.aggregates, result.merchants, result.regions)
        features = fit_features(matrix, region_ids)
        values = np.vstack([matrix.row(rid) for rid in region_ids])
        if count > features.pca.k_max:
            raise ConfigError(f"主成分只有 {features.pca.k_max} 個，不足 {count} 個座標")
        scores = project(features.pca, normalize_matrix(values, features.distributions), count)
    except CardEconError as e:
        logger.warning("[synth] 無法由指標建立座標，官方指數改由潛在因子產生: %s", e)
        return None
    sd = scores.std(axis=0)
    if np.any(sd <= 1e-12):
        logger.warning("[synth] 主成分分數沒有變異，官方指數改由潛在因子產生")
        return None
    return (scores - scores.mean(axis=0)) / sd


def _official_indices(config: SynthConfig, truth: GroundTruth) -> np.ndarray:
    signal = truth.clean_indices()
    rng = _rng(config.seed, _NOISE)
    noise = rng.standard_normal(signal.shape) * np.array([config.noise(name) for name in INDEX_NAMES])
    values = signal + noise
    for name in NONNEGATIVE_INDICES:
        j = INDEX_NAMES.index(name)
        values[:, j] = np.maximum(values[:, j], 0.0)
    return values


def generate(config: SynthConfig, threads: int = 1) -> SynthCorpus:
    """
    產生完整的合成語料

    區域的潛在因子決定活動密度、類別組合、夜間/週末傾向、跨區移動與消費金額；
    官方指數 = F⁻¹(sigmoid(b + Cλ)) + 雜訊。index_basis="features" 時 C 是由產生的交易
    實際算出的前 L 個主成分分數（標準化），管線在無雜訊時可以完全還原；
    "factors" 時 C 就是潛在因子。相同 seed 產生相同輸出。

    Args:
        config: 合成資料設定
        threads: 各區域平行產生的執行緒數；輸出與執行緒數無關

    Returns:
        SynthCorpus
    """
    plan, truth = _make_plan(config)
    R = len(plan.region_ids)
    F = plan.factors

    rng = _rng(config.seed, _ALLOCATION)
    n_foreign_total = int(round(config.transactions_total * config.foreign_fraction))
    n_domestic_total = config.transactions_total - n_foreign_total
    activity = plan.area * np.exp(config.activity_loading * F[:, 0])
    domestic_weight = plan.customer_share * activity
    foreign_weight = plan.business_share * activity * np.exp(0.5 * F[:, 1 % F.shape[1]])
    n_domestic = rng.multinomial(n_domestic_total, domestic_weight / domestic_weight.sum())
    n_foreign = rng.multinomial(n_foreign_total, foreign_weight / foreign_weight.sum())

    def block(r: int) -> pd.DataFrame:
        return _region_block(config, plan, r, int(n_domestic[r]), int(n_foreign[r]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            blocks = list(executor.map(block, range(R)))
        # executor.map 保持區域順序
    else:
        blocks = [block(r) for r in range(R)]
    non_empty = [b for b in blocks if len(b)]
    transactions = (
        pd.concat(non_empty, ignore_index=True) if non_empty else pd.DataFrame(columns=list(TRANSACTION_COLUMNS))
    )

    # 站外國內交易數使 in-dataset / (in-dataset + external) 還原商戶市佔率
    domestic_at = (
        transactions.loc[transactions["customer_kind"] == "D", "merchant_region"]
        .value_counts()
        .reindex(plan.region_ids, fill_value=0)
        .to_numpy()
    )
    external = np.rint(domestic_at * (1 - plan.business_share) / plan.business_share).astype(np.int64)
    regions = pd.DataFrame(
        {
            "region_id": plan.region_ids,
            "name": [f"Region {rid[1:]}" for rid in plan.region_ids],
            "area_km2": np.round(plan.area, 2),
            "customer_market_share": plan.customer_share,
            "external_domestic_txn_count": external,
        },
        columns=list(REGION_COLUMNS),
    )
    if config.index_basis == "features":
        coordinates = _feature_coordinates(plan.region_ids, regions, transactions, F.shape[1], threads)
        if coordinates is not None:
            truth = truth.model_copy(update={"index_basis": "features", "index_coordinates": coordinates.tolist()})
    indices = OfficialIndices(list(plan.region_ids), _official_indices(config, truth))
    logger.info(
        "[synth] %d 個區域，%d 筆交易（外國 %d），%d 個商戶，seed=%d",
        R,
        len(transactions),
        n_foreign_total,
        plan.merchant_ids.size,
        config.seed,
    )
    return SynthCorpus(regions, transactions, indices, truth)


def write_corpus(corpus: SynthCorpus, out_dir: Path, header: Sequence[str] = ()) -> Dict[str, Path]:
    """
    寫出 regions.csv、transactions.csv、indices.csv 與 ground_truth.json

    三個 CSV 檔都以 header 的 '#' 註解開頭；匯入時會略過交易檔開頭的註解。
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "regions": write_table(corpus.regions, out_dir / "regions.csv", header),
        "transactions": write_table(corpus.transactions, out_dir / "transactions.csv", header),
        "indices": corpus.indices.write(out_dir / "indices.csv", header),
    }
    truth_path = out_dir / "ground_truth.json"
    truth_path.write_text(corpus.ground_truth.to_json(), encoding="utf-8")
    paths["ground_truth"] = truth_path
    logger.info("[synth] 已寫出 %s", ", ".join(p.name for p in paths.values()))
    return paths


def load_ground_truth(path: Path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"找不到真實參數檔: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format_version") != GROUND_TRUTH_VERSION:
        raise ConfigError(f"不支援的真實參數格式版本: {data.get('format_version')}")
    return GroundTruth.model_validate(data)


def _signal_variance(truth: GroundTruth, draws: int, seed: int) -> np.ndarray:
    F = _rng(seed, _PARAMS).standard_normal((draws, len(truth.index_loadings[0])))
    return truth.signal(F).var(axis=0)


def theoretical_r2(
    truth: GroundTruth,
    noise_sd: Optional[Union[float, Dict[str, float]]] = None,
    draws: int = 1_000_000,
    seed: int = 0,
) -> Dict[str, float]:
    """
    最佳模型在植入資料上的期望 R² = Var(signal) / (Var(signal) + noise²)

    Var(signal) 以 draws 次蒙地卡羅抽樣估計。
    """
    if noise_sd is None:
        noise = truth.noise_sd
    elif isinstance(noise_sd, (int, float)):
        noise = {name: float(noise_sd) for name in INDEX_NAMES}
    else:
        noise = {name: float(noise_sd.get(name, 0.0)) for name in INDEX_NAMES}
    variance = _signal_variance(truth, draws, seed)
    result = {}
    for j, name in enumerate(INDEX_NAMES):
        sd = noise[name]
        result[name] = 1.0 if sd == 0 else float(variance[j] / (variance[j] + sd * sd))
    return result


def noise_for_target_r2(truth: GroundTruth, target: float, draws: int = 1_000_000, seed: int = 0) -> Dict[str, float]:
    """求出使 theoretical_r2 等於 target 的各指數雜訊標準差"""
    if not 0 < target <= 1:
        raise ConfigError("目標 R² 必須在 (0, 1]")
    variance = _signal_variance(truth, draws, seed)
    return {name: float(np.sqrt(variance[j] * (1 - target) / target)) for j, name in enumerate(INDEX_NAMES)}
