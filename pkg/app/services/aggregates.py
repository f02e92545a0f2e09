"""
區域與聚合資料型別 - 區域表、區域累計值、商戶累計值
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from services.errors import ConfigError
from utils.tables import read_table

logger = logging.getLogger(__name__)

CATEGORY_COUNT = 76
GROUP_COUNT = 12

REGION_COLUMNS = (
    "region_id",
    "name",
    "area_km2",
    "customer_market_share",
    "external_domestic_txn_count",
)


class RegionMeta(BaseModel):
    """單一區域的中繼資料（面積與兩種市佔率）"""

    model_config = ConfigDict(frozen=True)

    region_id: str = Field(min_length=1)
    name: str
    area_km2: float = Field(gt=0)
    customer_market_share: float = Field(gt=0, le=1)
    business_market_share: Optional[float] = Field(default=None, gt=0, le=1)
    external_domestic_txn_count: Optional[int] = Field(default=None, ge=0)


class RegionTable:
    """有序的區域表，區域的索引位置即為聚合陣列的索引"""

    def __init__(self, regions: Iterable[RegionMeta]):
        self.regions = tuple(regions)
        self._index: Dict[str, int] = {}
        for i, region in enumerate(self.regions):
            if region.region_id in self._index:
                raise ConfigError(f"區域表中有重複的 region_id: {region.region_id}")
            self._index[region.region_id] = i

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self) -> Iterator[RegionMeta]:
        return iter(self.regions)

    def __contains__(self, region_id: object) -> bool:
        return region_id in self._index

    @property
    def ids(self) -> list:
        return [r.region_id for r in self.regions]

    def index_of(self, region_id: str) -> int:
        try:
            return self._index[region_id]
        except KeyError:
            raise ConfigError(f"未知的區域: {region_id}") from None

    def get(self, region_id: str) -> RegionMeta:
        return self.regions[self.index_of(region_id)]

    def customer_weights(self) -> np.ndarray:
        """國內客戶去偏權重 1 / customer_market_share，依區域順序"""
        return 1.0 / np.array([r.customer_market_share for r in self.regions], dtype=float)

    def business_weights(self) -> np.ndarray:
        """外國客戶去偏權重 1 / business_market_share，未設定者為 NaN"""
        shares = [r.business_market_share for r in self.regions]
        return np.array([np.nan if s is None else 1.0 / s for s in shares], dtype=float)

    def with_business_shares(self, shares: Mapping[str, float]) -> "RegionTable":
        """回傳設定好商戶市佔率的新區域表"""
        unknown = set(shares) - set(self._index)
        if unknown:
            raise ConfigError(f"未知的區域: {', '.join(sorted(unknown))}")
        return RegionTable(
            r.model_copy(update={"business_market_share": shares[r.region_id]})
            if r.region_id in shares
            else r
            for r in self.regions
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.regions])


def load_region_table(path: Path) -> RegionTable:
    """
    讀取區域表檔案

    Args:
        path: region_id, name, area_km2, customer_market_share,
              external_domestic_txn_count 五欄的 CSV

    Returns:
        RegionTable
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"找不到區域表檔案: {path}")
    frame = read_table(path, dtype={"region_id": str, "name": str}, keep_default_na=False)
    table = region_table_from_frame(frame, str(path))
    logger.info("[regions] 載入 %d 個區域: %s", len(table), path.name)
    return table


def region_table_from_frame(frame: pd.DataFrame, source: str = "DataFrame") -> RegionTable:
    """由區域表 DataFrame 建立 RegionTable；欄位與檔案格式相同"""
    missing = [c for c in REGION_COLUMNS[:4] if c not in frame.columns]
    if missing:
        raise ConfigError(f"區域表 {source} 缺少欄位: {', '.join(missing)}")

    regions = []
    for row in frame.to_dict("records"):
        external = row.get("external_domestic_txn_count", "")
        share = row.get("business_market_share", "")
        try:
            regions.append(
                RegionMeta(
                    region_id=str(row["region_id"]),
                    name=str(row["name"]),
                    area_km2=row["area_km2"],
                    customer_market_share=row["customer_market_share"],
                    business_market_share=None if share in ("", None) else share,
                    external_domestic_txn_count=None if external in ("", None) else int(external),
                )
            )
        except (ValidationError, ValueError) as e:
            raise ConfigError(f"區域表 {source} 中的區域 {row.get('region_id')} 不合法: {e}") from e
    return RegionTable(regions)


@dataclass(frozen=True)
class Tally:
    """加權後的 (交易數, 金額) 組；金額單位為歐分"""

    count: float = 0.0
    amount: float = 0.0

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(self.count + other.count, self.amount + other.amount)


def _zeros() -> np.ndarray:
    return np.zeros(CATEGORY_COUNT)


@dataclass(frozen=True, eq=False)
class RegionAggregate:
    """
    單一區域的所有累計值

    in-area 端以交易發生的商戶區域計算，resident 端以客戶居住區域計算。
    類別陣列長度為 76，索引 i 對應 category_id i+1。
    """

    region_id: str
    in_area_same_region: Tally = Tally()
    in_area_domestic_visitors: Tally = Tally()
    in_area_foreign: Tally = Tally()
    in_area_category_count: np.ndarray = field(default_factory=_zeros)
    in_area_category_amount: np.ndarray = field(default_factory=_zeros)
    in_area_night: Tally = Tally()
    in_area_weekend: Tally = Tally()
    resident: Tally = Tally()
    resident_category_count: np.ndarray = field(default_factory=_zeros)
    resident_category_amount: np.ndarray = field(default_factory=_zeros)
    resident_outside: Tally = Tally()
    resident_night: Tally = Tally()
    resident_weekend: Tally = Tally()
    resident_expensive: Tally = Tally()
    active_residents: int = 0
    active_businesses: int = 0

    @property
    def in_area(self) -> Tally:
        # 三個來源分割相加即為總量
        return self.in_area_same_region + self.in_area_domestic_visitors + self.in_area_foreign

    @property
    def in_area_visitors(self) -> Tally:
        return self.in_area_domestic_visitors + self.in_area_foreign

    def is_empty(self) -> bool:
        return self.in_area.count == 0 and self.resident.count == 0


@dataclass(frozen=True)
class MerchantAggregate:
    """單一商戶的原始（未加權）交易數與金額"""

    merchant_id: str
    region_id: str
    category_id: int
    txn_count: int
    amount_sum: int

    @property
    def average_amount(self) -> float:
        return self.amount_sum / self.txn_count


def zero_aggregates(region_ids: Sequence[str]) -> Dict[str, RegionAggregate]:
    return {rid: RegionAggregate(region_id=rid) for rid in region_ids}
