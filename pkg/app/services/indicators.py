"""
微觀經濟指標服務
由區域累計值計算 35 個區域指標
"""
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from services.aggregates import CATEGORY_COUNT, MerchantAggregate, RegionAggregate, RegionTable, Tally
from services.errors import ConfigError, DiversityError
from utils.settings import DEFAULT_BUNDLE_MAP
from utils.tables import read_table, write_table

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"

# 夜間窗口 [22:00, 06:00)，每一分鐘恰好屬於一類
NIGHT_START_HOUR = 22
NIGHT_END_HOUR = 6

DIVERSITY_THRESHOLD = 0.8

BUNDLES = (
    "gas_parking_toll",
    "taxi",
    "public_transport",
    "cafes_restaurants",
    "fast_food",
    "food",
    "recreation",
    "fashion_beauty_jewelry",
    "medical",
    "cultural",
    "travel",
)
OTHER_BUNDLE = "other"

INDICATOR_NAMES = (
    "spending_density",
    "earnings_density",
    "avg_transaction_amount",
    "txn_per_resident",
    "resident_avg_transaction_amount",
    "pct_domestic_visitor_txn",
    "pct_foreign_visitor_txn",
    "resident_diversity",
    "in_area_diversity",
    "business_density",
    "avg_business_earnings",
    *(f"pct_spend_{b}" for b in BUNDLES),
    "pct_resident_night_txn",
    "pct_resident_weekend_txn",
    "pct_resident_night_amount",
    "pct_resident_weekend_amount",
    "pct_area_night_amount",
    "pct_area_weekend_amount",
    "pct_area_night_txn",
    "pct_area_weekend_txn",
    "pct_resident_txn_outside",
    "pct_area_txn_nonresident",
    "pct_resident_amount_outside",
    "pct_area_amount_nonresident",
    "pct_resident_txn_expensive",
)
INDICATOR_COUNT = 35
INDICATOR_COLUMNS = tuple(f"i{i:02d}_{name}" for i, name in enumerate(INDICATOR_NAMES, start=1))

assert len(INDICATOR_COLUMNS) == INDICATOR_COUNT


class TemporalClass(NamedTuple):
    nighttime: bool
    weekend: bool


def classify_temporal(timestamp: datetime) -> TemporalClass:
    """夜間: 當地時間 ∈ [22:00, 06:00)；週末: 星期六或星期日"""
    hour = timestamp.hour
    return TemporalClass(
        nighttime=hour >= NIGHT_START_HOUR or hour < NIGHT_END_HOUR,
        weekend=timestamp.weekday() >= 5,
    )


def temporal_flags(timestamps: pd.Series) -> Tuple[np.ndarray, np.ndarray]:
    """classify_temporal 的向量化版本，每筆交易只判定一次"""
    ts = pd.Series(timestamps)
    hour = ts.dt.hour.to_numpy()
    night = (hour >= NIGHT_START_HOUR) | (hour < NIGHT_END_HOUR)
    weekend = ts.dt.dayofweek.to_numpy() >= 5
    return night.astype(bool), weekend.astype(bool)


def load_category_bundles(path: Optional[Path] = None) -> Dict[int, str]:
    """
    讀取類別→組合對照表

    Args:
        path: category_id, bundle_name 兩欄的 CSV，預設為內建對照表

    Returns:
        category_id → bundle 名稱
    """
    path = Path(path or DEFAULT_BUNDLE_MAP)
    if not path.is_file():
        raise ConfigError(f"找不到類別對照表: {path}")
    frame = read_table(path, dtype={"bundle_name": str})
    if list(frame.columns) != ["category_id", "bundle_name"]:
        raise ConfigError(f"類別對照表 {path} 欄位必須是 category_id, bundle_name")
    ids = frame["category_id"].tolist()
    if sorted(ids) != list(range(1, CATEGORY_COUNT + 1)):
        raise ConfigError(f"類別對照表 {path} 必須恰好包含 1..{CATEGORY_COUNT} 各一次")
    unknown = set(frame["bundle_name"]) - set(BUNDLES) - {OTHER_BUNDLE}
    if unknown:
        raise ConfigError(f"類別對照表 {path} 有未知的組合: {', '.join(sorted(unknown))}")
    return {int(c): str(b) for c, b in zip(frame["category_id"], frame["bundle_name"])}


def diversity_count(category_totals: Sequence[float], threshold: float = DIVERSITY_THRESHOLD) -> int:
    """
    最少需要幾個最大類別，才能涵蓋總量的 threshold 比例

    同值的類別以 category_id 由小到大排序。
    """
    totals = np.asarray(category_totals, dtype=float)
    grand = totals.sum()
    if grand <= 0:
        raise DiversityError("類別總量全為零，多樣性未定義")
    # 穩定排序：同值時保留原本（category_id 遞增）的順序
    order = np.argsort(-totals, kind="stable")
    cumulative = np.cumsum(totals[order])
    reached = np.nonzero(cumulative >= threshold * grand * (1 - 1e-12))[0]
    return int(reached[0]) + 1


def expensive_business_set(merchants: Union[Mapping[str, MerchantAggregate], Iterable[MerchantAggregate]]) -> Set[str]:
    """
    平均交易金額嚴格高於所屬類別平均的商戶

    比較以整數交叉相乘進行，不受浮點誤差影響。
    """
    items = list(merchants.values()) if isinstance(merchants, Mapping) else list(merchants)
    category_count: Dict[int, int] = {}
    category_amount: Dict[int, int] = {}
    for m in items:
        category_count[m.category_id] = category_count.get(m.category_id, 0) + m.txn_count
        category_amount[m.category_id] = category_amount.get(m.category_id, 0) + m.amount_sum
    return {
        m.merchant_id
        for m in items
        if m.amount_sum * category_count[m.category_id] > category_amount[m.category_id] * m.txn_count
    }


@dataclass
class IndicatorMatrix:
    """區域 × 35 指標矩陣，欄位順序固定"""

    region_ids: List[str]
    values: np.ndarray
    warnings: List[Tuple[str, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.region_ids), INDICATOR_COUNT):
            raise ConfigError(f"指標矩陣形狀 {self.values.shape} 與 {len(self.region_ids)} 個區域不符")

    @property
    def columns(self) -> Tuple[str, ...]:
        return INDICATOR_COLUMNS

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(INDICATOR_COLUMNS))
        frame.insert(0, "region_id", self.region_ids)
        return frame

    def rows(self, region_ids: Sequence[str]) -> np.ndarray:
        index = {rid: i for i, rid in enumerate(self.region_ids)}
        return self.values[[index[rid] for rid in region_ids]]

    def row(self, region_id: str) -> np.ndarray:
        return self.rows([region_id])[0]

    def column(self, indicator_id: int) -> np.ndarray:
        return self.values[:, indicator_id - 1]

    def replace_rows(self, updates: Mapping[str, np.ndarray]) -> "IndicatorMatrix":
        values = self.values.copy()
        index = {rid: i for i, rid in enumerate(self.region_ids)}
        for rid, row in updates.items():
            values[index[rid]] = row
        return IndicatorMatrix(list(self.region_ids), values)

    def write(self, path: Path, header: Sequence[str] = ()) -> Path:
        return write_table(self.to_frame(), path, header)


def read_indicator_matrix(path: Path) -> IndicatorMatrix:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"找不到指標矩陣檔案: {path}")
    frame = read_table(path, dtype={"region_id": str})
    expected = ["region_id", *INDICATOR_COLUMNS]
    if list(frame.columns) != expected:
        raise ConfigError(f"指標矩陣 {path} 欄位不符，需要 region_id + 35 個指標欄位")
    return IndicatorMatrix(frame["region_id"].tolist(), frame[list(INDICATOR_COLUMNS)].to_numpy(dtype=float))


class _RegionIndicators:
    """單一區域的計算輔助，收集零分母警告"""

    def __init__(self, region_id: str, warnings: List[Tuple[str, int, str]]):
        self.region_id = region_id
        self.warnings = warnings
        self.current = 0

    def ratio(self, numerator: float, denominator: float, scale: float = 1.0) -> float:
        if denominator == 0:
            self.warnings.append((self.region_id, self.current, "分母為零，指標設為 0"))
            return 0.0
        return scale * numerator / denominator

    def pct(self, numerator: float, denominator: float) -> float:
        return self.ratio(numerator, denominator, 100.0)

    def diversity(self, totals: np.ndarray) -> float:
        try:
            return float(diversity_count(totals))
        except DiversityError:
            self.warnings.append((self.region_id, self.current, "沒有任何類別活動，多樣性設為 0"))
            return 0.0


def compute_indicators(
    aggregates: Mapping[str, RegionAggregate],
    merchants: Mapping[str, MerchantAggregate],
    regions: RegionTable,
    bundles: Optional[Mapping[int, str]] = None,
) -> IndicatorMatrix:
    """
    計算每個區域的 35 個指標

    Args:
        aggregates: region_id → RegionAggregate（缺少的區域視為全零）
        merchants: merchant_id → MerchantAggregate（用於商戶數一致性檢查）
        regions: 區域表（決定列順序）
        bundles: 類別→組合對照表，預設使用內建對照表

    Returns:
        IndicatorMatrix；金額類指標單位為歐元
    """
    bundles = bundles if bundles is not None else load_category_bundles()
    bundle_of = np.array([bundles[c] for c in range(1, CATEGORY_COUNT + 1)])

    warnings: List[Tuple[str, int, str]] = []
    rows = []
    for meta in regions:
        agg = aggregates.get(meta.region_id) or RegionAggregate(region_id=meta.region_id)
        calc = _RegionIndicators(meta.region_id, warnings)
        area = meta.area_km2
        in_area: Tally = agg.in_area
        res: Tally = agg.resident
        values: List[float] = []

        def put(value: float) -> None:
            values.append(value)
            calc.current = len(values) + 1

        calc.current = 1
        put(in_area.count / area)
        put(in_area.amount / 100.0 / area)
        put(calc.ratio(in_area.amount / 100.0, in_area.count))
        put(calc.ratio(res.count, agg.active_residents))
        put(calc.ratio(res.amount / 100.0, res.count))
        put(calc.pct(agg.in_area_domestic_visitors.count, in_area.count))
        put(calc.pct(agg.in_area_foreign.count, in_area.count))
        put(calc.diversity(agg.resident_category_amount))
        put(calc.diversity(agg.in_area_category_amount))
        put(agg.active_businesses / area)
        put(calc.ratio(in_area.amount / 100.0, agg.active_businesses))
        for bundle in BUNDLES:
            put(calc.pct(agg.resident_category_amount[bundle_of == bundle].sum(), res.amount))
        put(calc.pct(agg.resident_night.count, res.count))
        put(calc.pct(agg.resident_weekend.count, res.count))
        put(calc.pct(agg.resident_night.amount, res.amount))
        put(calc.pct(agg.resident_weekend.amount, res.amount))
        put(calc.pct(agg.in_area_night.amount, in_area.amount))
        put(calc.pct(agg.in_area_weekend.amount, in_area.amount))
        put(calc.pct(agg.in_area_night.count, in_area.count))
        put(calc.pct(agg.in_area_weekend.count, in_area.count))
        put(calc.pct(agg.resident_outside.count, res.count))
        put(calc.pct(agg.in_area_visitors.count, in_area.count))
        put(calc.pct(agg.resident_outside.amount, res.amount))
        put(calc.pct(agg.in_area_visitors.amount, in_area.amount))
        put(calc.pct(agg.resident_expensive.count, res.count))
        rows.append(values)

    if merchants:
        counted = sum(a.active_businesses for a in aggregates.values())
        if counted != len(merchants):
            logger.warning("[indicators] 商戶數 %d 與區域活躍商戶總數 %d 不一致", len(merchants), counted)

    for region_id, indicator, text in warnings:
        logger.warning("[indicators] 區域 %s 指標 %d: %s", region_id, indicator, text)

    values = np.array(rows, dtype=float).reshape(len(rows), INDICATOR_COUNT)
    return IndicatorMatrix(regions.ids, values, warnings)
