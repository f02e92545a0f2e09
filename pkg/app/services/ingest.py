"""
交易資料匯入服務
解析、驗證、去偏並聚合刷卡交易，單次串流完成
"""
import io
import logging
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.aggregates import (
    CATEGORY_COUNT,
    GROUP_COUNT,
    MerchantAggregate,
    RegionAggregate,
    RegionTable,
    Tally,
)
from services.errors import BusinessShareError, IngestError, MissingBusinessShareError
from services.indicators import TIMESTAMP_FORMAT, expensive_business_set, temporal_flags

logger = logging.getLogger(__name__)

TRANSACTION_COLUMNS = (
    "txn_id",
    "timestamp",
    "amount_cents",
    "customer_id",
    "customer_kind",
    "home_region_or_country",
    "merchant_id",
    "merchant_region",
    "category_id",
    "group_id",
)

# 外國客戶在 origin 欄位的代碼（國內客戶為居住區域索引）
FOREIGN = -1
DEFAULT_CHUNK_ROWS = 500_000

CELL_KEYS = ["merchant_idx", "origin", "category_id", "night", "weekend"]

Source = Union[str, Path, BinaryIO, io.TextIOBase]


@dataclass(frozen=True)
class Domestic:
    home_region_id: str


@dataclass(frozen=True)
class Foreign:
    country_code: str


@dataclass(frozen=True)
class TransactionRecord:
    """單筆刷卡交易"""

    txn_id: str
    timestamp: datetime
    amount: int  # 歐分
    customer_id: str
    customer_kind: Union[Domestic, Foreign]
    merchant_id: str
    merchant_region_id: str
    category_id: int
    group_id: int


@dataclass
class RejectReport:
    """被拒絕的資料列，依原因計數"""

    counts: Counter = field(default_factory=Counter)
    rows_read: int = 0
    accepted: int = 0

    def add(self, reason: str, n: int = 1) -> None:
        if n:
            self.counts[reason] += n

    @property
    def rejected(self) -> int:
        return sum(self.counts.values())

    def is_empty(self) -> bool:
        return self.rejected == 0

    def to_dict(self) -> Dict[str, int]:
        return dict(sorted(self.counts.items()))


class _LineCountingReader(io.RawIOBase):
    """包裝位元組串流，邊讀邊計算行數（含被 pandas 略過的格式錯誤列）"""

    def __init__(self, raw: BinaryIO):
        self._raw = raw
        self.newlines = 0
        self.nbytes = 0
        self.last_byte = b""

    def readable(self) -> bool:
        return True

    def readinto(self, buffer) -> int:
        data = self._raw.read(len(buffer))
        if not data:
            return 0
        n = len(data)
        buffer[:n] = data
        self.newlines += data.count(b"\n")
        self.nbytes += n
        self.last_byte = data[-1:]
        return n

    @property
    def lines(self) -> int:
        if self.nbytes == 0:
            return 0
        return self.newlines + (0 if self.last_byte == b"\n" else 1)


def _open_source(source: Source) -> Tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        try:
            return open(source, "rb"), True
        except OSError as e:
            raise IngestError(f"無法讀取交易檔案 {source}: {e}") from e
    if isinstance(source, io.TextIOBase):
        return io.BytesIO(source.read().encode("utf-8")), False
    return source, False


def _as_int(column: pd.Series) -> Tuple[pd.Series, pd.Series]:
    """字串欄位轉整數；回傳 (數值, 是否為合法整數)"""
    values = pd.to_numeric(column, errors="coerce")
    ok = values.notna() & np.isfinite(values) & (values == np.floor(values))
    return values.where(ok, 0).astype("int64"), ok


def _validate_chunk(raw: pd.DataFrame, regions: RegionTable, report: RejectReport) -> pd.DataFrame:
    """驗證一個資料區塊，回傳欄位化的有效交易，並把拒絕原因記錄到 report"""
    reason = pd.Series("", index=raw.index, dtype=object)

    def flag(mask: pd.Series, name: str) -> None:
        hit = mask & (reason == "")
        reason[hit] = name

    raw = raw.reindex(columns=list(TRANSACTION_COLUMNS))
    # 欄位數不足的列會得到 NaN
    flag(raw.isna().any(axis=1), "malformed_row")
    raw = raw.fillna("")
    # 無法以 UTF-8 解碼的位元組已被替換為 U+FFFD
    undecodable = pd.Series(False, index=raw.index)
    for column in raw.columns:
        undecodable |= raw[column].astype(str).str.contains("\ufffd", regex=False)
    flag(undecodable, "malformed_row")
    flag((raw == "").any(axis=1), "missing_field")

    timestamp = pd.to_datetime(raw["timestamp"], format=TIMESTAMP_FORMAT, errors="coerce")
    flag(timestamp.isna(), "bad_timestamp")

    amount, amount_ok = _as_int(raw["amount_cents"])
    flag(~amount_ok, "bad_amount")
    flag(amount <= 0, "nonpositive_amount")

    kind = raw["customer_kind"]
    flag(~kind.isin(["D", "F"]), "bad_customer_kind")

    domestic = kind == "D"
    home_idx = pd.Series(
        pd.Categorical(raw["home_region_or_country"], categories=regions.ids).codes, index=raw.index
    )
    flag(domestic & (home_idx < 0), "unknown_home_region")

    merchant_idx = pd.Series(
        pd.Categorical(raw["merchant_region"], categories=regions.ids).codes, index=raw.index
    )
    flag(merchant_idx < 0, "unknown_merchant_region")

    category, category_ok = _as_int(raw["category_id"])
    flag(~category_ok, "malformed_category")
    flag((category < 1) | (category > CATEGORY_COUNT), "out_of_range_category")

    group, group_ok = _as_int(raw["group_id"])
    flag(~group_ok, "malformed_group")
    flag((group < 1) | (group > GROUP_COUNT), "out_of_range_group")

    for name, n in reason[reason != ""].value_counts().items():
        report.add(name, int(n))

    keep = (reason == "").to_numpy()
    ts = timestamp[keep]
    night, weekend = temporal_flags(ts)
    is_domestic = domestic[keep].to_numpy()
    batch = pd.DataFrame(
        {
            "txn_id": raw["txn_id"][keep].to_numpy(),
            "timestamp": ts.to_numpy(),
            "amount_cents": amount[keep].to_numpy(dtype="int64"),
            "customer_id": raw["customer_id"][keep].to_numpy(),
            "customer_kind": kind[keep].to_numpy(),
            "origin": np.where(is_domestic, home_idx[keep].to_numpy(), FOREIGN).astype("int32"),
            "country_code": np.where(is_domestic, "", raw["home_region_or_country"][keep].to_numpy()),
            "merchant_id": raw["merchant_id"][keep].to_numpy(),
            "merchant_idx": merchant_idx[keep].to_numpy().astype("int32"),
            "category_id": category[keep].to_numpy(dtype="int64"),
            "group_id": group[keep].to_numpy(dtype="int64"),
            "night": night,
            "weekend": weekend,
        }
    )
    report.accepted += len(batch)
    return batch


def iter_transaction_batches(
    source: Source,
    regions: RegionTable,
    report: RejectReport,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> Iterator[pd.DataFrame]:
    """
    串流讀取交易檔案，逐區塊產生已驗證的欄位化交易

    Args:
        source: 檔案路徑或串流
        regions: 區域表
        report: 拒絕報告，讀取完畢時才完整
        chunk_rows: 每區塊列數

    Yields:
        已驗證交易的 DataFrame
    """
    stream, owned = _open_source(source)
    counter = _LineCountingReader(stream)
    parsed = 0
    comments = 0
    try:
        try:
            buffered = io.BufferedReader(counter)
            # 檔案開頭的 '#' 來源註解不是資料列
            while buffered.peek(1)[:1] == b"#":
                buffered.readline()
                comments += 1
            reader = pd.read_csv(
                buffered,
                dtype=str,
                keep_default_na=False,
                skip_blank_lines=False,
                on_bad_lines="skip",
                quoting=3,  # csv.QUOTE_NONE
                chunksize=chunk_rows,
                encoding="utf-8",
                encoding_errors="replace",
            )
            for raw in reader:
                missing = [c for c in TRANSACTION_COLUMNS if c not in raw.columns]
                if missing:
                    raise IngestError(f"交易檔案缺少欄位: {', '.join(missing)}")
                parsed += len(raw)
                yield _validate_chunk(raw, regions, report)
        except pd.errors.EmptyDataError as e:
            raise IngestError(f"交易檔案是空的，缺少表頭: {e}") from e
        except (pd.errors.ParserError, UnicodeDecodeError, OSError) as e:
            raise IngestError(f"無法解析交易檔案: {e}") from e
    finally:
        if owned:
            stream.close()

    data_rows = max(counter.lines - comments - 1, 0)
    # 欄位過多的列被 pandas 略過
    report.add("malformed_row", data_rows - parsed)
    report.rows_read += data_rows


def batch_to_records(batch: pd.DataFrame, regions: RegionTable) -> List[TransactionRecord]:
    ids = regions.ids
    records = []
    for row in batch.itertuples(index=False):
        kind = Domestic(ids[row.origin]) if row.origin != FOREIGN else Foreign(row.country_code)
        records.append(
            TransactionRecord(
                txn_id=row.txn_id,
                timestamp=pd.Timestamp(row.timestamp).to_pydatetime(),
                amount=int(row.amount_cents),
                customer_id=row.customer_id,
                customer_kind=kind,
                merchant_id=row.merchant_id,
                merchant_region_id=ids[row.merchant_idx],
                category_id=int(row.category_id),
                group_id=int(row.group_id),
            )
        )
    return records


def records_to_batch(records: Sequence[TransactionRecord], regions: RegionTable) -> pd.DataFrame:
    """TransactionRecord 序列轉為欄位化批次（與 iter_transaction_batches 輸出同格式）"""
    timestamps = pd.to_datetime(pd.Series([r.timestamp for r in records], dtype="datetime64[ns]"))
    night, weekend = temporal_flags(timestamps)
    return pd.DataFrame(
        {
            "txn_id": [r.txn_id for r in records],
            "timestamp": timestamps.to_numpy(),
            "amount_cents": np.array([r.amount for r in records], dtype="int64"),
            "customer_id": [r.customer_id for r in records],
            "customer_kind": ["D" if isinstance(r.customer_kind, Domestic) else "F" for r in records],
            "origin": np.array(
                [
                    regions.index_of(r.customer_kind.home_region_id)
                    if isinstance(r.customer_kind, Domestic)
                    else FOREIGN
                    for r in records
                ],
                dtype="int32",
            ),
            "country_code": [
                r.customer_kind.country_code if isinstance(r.customer_kind, Foreign) else "" for r in records
            ],
            "merchant_id": [r.merchant_id for r in records],
            "merchant_idx": np.array([regions.index_of(r.merchant_region_id) for r in records], dtype="int32"),
            "category_id": np.array([r.category_id for r in records], dtype="int64"),
            "group_id": np.array([r.group_id for r in records], dtype="int64"),
            "night": night,
            "weekend": weekend,
        }
    )


def parse_transactions(source: Source, regions: RegionTable) -> Tuple[List[TransactionRecord], RejectReport]:
    """
    解析交易檔案為 TransactionRecord 串列

    適合小型輸入；大型檔案請用 iter_transaction_batches 直接聚合。
    """
    report = RejectReport()
    records: List[TransactionRecord] = []
    for batch in iter_transaction_batches(source, regions, report):
        records.extend(batch_to_records(batch, regions))
    return records, report


def debias_weight(record: TransactionRecord, regions: RegionTable) -> float:
    """
    單筆交易的去偏權重

    國內客戶: 1 / 居住區域的 customer_market_share
    外國客戶: 1 / 商戶區域的 business_market_share
    """
    if isinstance(record.customer_kind, Domestic):
        return 1.0 / regions.get(record.customer_kind.home_region_id).customer_market_share
    share = regions.get(record.merchant_region_id).business_market_share
    if share is None:
        raise MissingBusinessShareError(record.merchant_region_id)
    return 1.0 / share


def _group_sum(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    return frame.groupby(keys, sort=True)[["count", "cents"]].sum()


@dataclass
class IngestAccumulator:
    """
    部分聚合結果，全部以整數 (交易數, 歐分) 儲存

    整數相加精確且可交換，因此任意分片、任意順序合併都得到相同結果；
    去偏權重只在 finalize 時依固定的鍵順序套用一次。
    """

    cells: pd.DataFrame
    merchants: pd.DataFrame
    merchant_residents: pd.DataFrame
    customers: pd.DataFrame
    records: int = 0

    @classmethod
    def empty(cls) -> "IngestAccumulator":
        return cls.from_batch(records_to_batch([], RegionTable([])))

    @classmethod
    def from_batch(cls, batch: pd.DataFrame) -> "IngestAccumulator":
        frame = batch.assign(count=np.ones(len(batch), dtype="int64"), cents=batch["amount_cents"].astype("int64"))
        domestic = frame[frame["origin"] != FOREIGN]
        customers = (
            domestic[["origin", "customer_id"]].drop_duplicates().sort_values(["origin", "customer_id"])
        )
        return cls(
            cells=_group_sum(frame, CELL_KEYS),
            merchants=_group_sum(frame, ["merchant_id", "merchant_idx", "category_id"]),
            merchant_residents=_group_sum(domestic, ["merchant_id", "origin"]),
            customers=customers.reset_index(drop=True),
            records=len(frame),
        )

    def merge(self, other: "IngestAccumulator") -> "IngestAccumulator":
        def combine(a: pd.DataFrame, b: pd.DataFrame) -> pd.DataFrame:
            both = pd.concat([a, b])
            return both.groupby(level=list(range(both.index.nlevels)), sort=True).sum()

        customers = (
            pd.concat([self.customers, other.customers])
            .drop_duplicates()
            .sort_values(["origin", "customer_id"])
            .reset_index(drop=True)
        )
        return IngestAccumulator(
            cells=combine(self.cells, other.cells),
            merchants=combine(self.merchants, other.merchants),
            merchant_residents=combine(self.merchant_residents, other.merchant_residents),
            customers=customers,
            records=self.records + other.records,
        )

    def domestic_counts_by_merchant_region(self, regions: RegionTable) -> Dict[str, int]:
        """各商戶區域內，資料集中國內客戶的原始交易數"""
        cells = self.cells.reset_index()
        domestic = cells[cells["origin"] != FOREIGN]
        sums = domestic.groupby("merchant_idx")["count"].sum()
        counts = {rid: 0 for rid in regions.ids}
        for idx, n in sums.items():
            counts[regions.ids[int(idx)]] = int(n)
        return counts

    def foreign_regions(self, regions: RegionTable) -> List[str]:
        cells = self.cells.reset_index()
        idx = sorted(set(cells.loc[cells["origin"] == FOREIGN, "merchant_idx"].astype(int)))
        return [regions.ids[i] for i in idx]


def merge_tree(parts: Sequence[IngestAccumulator]) -> IngestAccumulator:
    """以固定的成對順序合併部分結果"""
    if not parts:
        return IngestAccumulator.empty()
    level = list(parts)
    while len(level) > 1:
        level = [level[i].merge(level[i + 1]) if i + 1 < len(level) else level[i] for i in range(0, len(level), 2)]
    return level[0]


def accumulate(batches: Iterable[pd.DataFrame], threads: int = 1) -> IngestAccumulator:
    """
    把批次轉為部分聚合並合併

    Args:
        batches: 欄位化交易批次
        threads: 平行處理的執行緒數，結果與執行緒數無關
    """
    if threads <= 1:
        return merge_tree([IngestAccumulator.from_batch(b) for b in batches])

    parts: List[IngestAccumulator] = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        for batch in batches:
            pending.append(pool.submit(IngestAccumulator.from_batch, batch))
            # 限制同時在記憶體中的批次數
            while len(pending) >= 2 * threads:
                parts.append(pending.popleft().result())
        while pending:
            parts.append(pending.popleft().result())
    return merge_tree(parts)


def compute_business_share(
    records: Union[Sequence[TransactionRecord], IngestAccumulator],
    regions: RegionTable,
    external_totals: Optional[Mapping[str, int]] = None,
    only: Optional[Iterable[str]] = None,
) -> RegionTable:
    """
    計算各區域的商戶市佔率

    share(r) = 資料集內國內交易數 / (資料集內國內交易數 + 站外國內交易數)

    Args:
        records: 交易或已累計的 IngestAccumulator
        regions: 區域表
        external_totals: 各區域站外國內交易數，預設取區域表中的 external_domestic_txn_count
        only: 只計算這些區域（預設全部）

    Returns:
        設定好 business_market_share 的新區域表
    """
    if isinstance(records, IngestAccumulator):
        in_dataset = records.domestic_counts_by_merchant_region(regions)
    else:
        in_dataset = Counter({rid: 0 for rid in regions.ids})
        for rec in records:
            if isinstance(rec.customer_kind, Domestic):
                in_dataset[rec.merchant_region_id] += 1

    targets = list(regions.ids if only is None else only)
    shares: Dict[str, float] = {}
    degenerate = []
    for rid in targets:
        if external_totals is not None and rid in external_totals:
            external = int(external_totals[rid])
        else:
            external = regions.get(rid).external_domestic_txn_count or 0
        inside = int(in_dataset.get(rid, 0))
        if inside + external == 0:
            degenerate.append(rid)
            continue
        share = inside / (inside + external)
        if share <= 0:
            share = 1.0 / (external + 1)
            logger.warning("[share] 區域 %s 沒有資料集內的國內交易，市佔率下限取 %.3g", rid, share)
        shares[rid] = min(share, 1.0)
    if degenerate:
        raise BusinessShareError(degenerate)
    return regions.with_business_shares(shares)


def _tally_by(keys: np.ndarray, counts: np.ndarray, amounts: np.ndarray, mask: np.ndarray, size: int) -> np.ndarray:
    """依索引加總（交易數, 金額），回傳 shape (size, 2)"""
    k = keys[mask]
    return np.stack(
        [
            np.bincount(k, weights=counts[mask], minlength=size),
            np.bincount(k, weights=amounts[mask], minlength=size),
        ],
        axis=1,
    )


def _resolve_merchants(acc: IngestAccumulator, regions: RegionTable) -> Dict[str, MerchantAggregate]:
    merchants = acc.merchants.reset_index()
    if merchants.empty:
        return {}
    # 同一商戶若出現在多個區域/類別，取交易最多者（平手取較小鍵）
    ordered = merchants.sort_values(
        ["merchant_id", "count", "merchant_idx", "category_id"], ascending=[True, False, True, True]
    )
    totals = merchants.groupby("merchant_id")[["count", "cents"]].sum()
    dominant = ordered.drop_duplicates("merchant_id", keep="first").set_index("merchant_id")
    conflicts = merchants["merchant_id"].duplicated(keep=False)
    if conflicts.any():
        names = sorted(set(merchants.loc[conflicts, "merchant_id"]))
        logger.warning("[aggregate] %d 個商戶的區域或類別不一致，採用交易最多者: %s", len(names), ", ".join(names[:5]))
    ids = regions.ids
    return {
        mid: MerchantAggregate(
            merchant_id=mid,
            region_id=ids[int(dominant.at[mid, "merchant_idx"])],
            category_id=int(dominant.at[mid, "category_id"]),
            txn_count=int(totals.at[mid, "count"]),
            amount_sum=int(totals.at[mid, "cents"]),
        )
        for mid in dominant.index
    }


def finalize(
    acc: IngestAccumulator, regions: RegionTable
) -> Tuple[Dict[str, RegionAggregate], Dict[str, MerchantAggregate]]:
    """
    套用去偏權重，產生每個區域與每個商戶的累計值

    Returns:
        (region_id → RegionAggregate, merchant_id → MerchantAggregate)；
        只包含至少出現一次的區域
    """
    n = len(regions)
    cells = acc.cells.reset_index()
    if cells.empty:
        return {}, {}

    m = cells["merchant_idx"].to_numpy(dtype=np.int64)
    o = cells["origin"].to_numpy(dtype=np.int64)
    c = cells["category_id"].to_numpy(dtype=np.int64) - 1
    night = cells["night"].to_numpy(dtype=bool)
    weekend = cells["weekend"].to_numpy(dtype=bool)

    customer_w = regions.customer_weights()
    business_w = regions.business_weights()
    foreign = o == FOREIGN
    missing = np.unique(m[foreign & np.isnan(business_w[m])])
    if missing.size:
        raise MissingBusinessShareError(regions.ids[int(missing[0])])

    weight = np.where(foreign, business_w[m], customer_w[np.where(foreign, 0, o)])
    wc = cells["count"].to_numpy(dtype=float) * weight
    wa = cells["cents"].to_numpy(dtype=float) * weight

    everything = np.ones_like(foreign)
    domestic = ~foreign
    home = np.where(foreign, 0, o)

    same = _tally_by(m, wc, wa, domestic & (o == m), n)
    visitors = _tally_by(m, wc, wa, domestic & (o != m), n)
    foreigners = _tally_by(m, wc, wa, foreign, n)
    area_night = _tally_by(m, wc, wa, night, n)
    area_weekend = _tally_by(m, wc, wa, weekend, n)
    area_cat = _tally_by(m * CATEGORY_COUNT + c, wc, wa, everything, n * CATEGORY_COUNT)

    resident = _tally_by(home, wc, wa, domestic, n)
    outside = _tally_by(home, wc, wa, domestic & (o != m), n)
    res_night = _tally_by(home, wc, wa, domestic & night, n)
    res_weekend = _tally_by(home, wc, wa, domestic & weekend, n)
    res_cat = _tally_by(home * CATEGORY_COUNT + c, wc, wa, domestic, n * CATEGORY_COUNT)

    merchants = _resolve_merchants(acc, regions)
    expensive = expensive_business_set(merchants)
    mr = acc.merchant_residents.reset_index()
    mr = mr[mr["merchant_id"].isin(expensive)]
    mr_home = mr["origin"].to_numpy(dtype=np.int64)
    mr_w = customer_w[mr_home] if len(mr) else np.zeros(0)
    res_expensive = _tally_by(
        mr_home,
        mr["count"].to_numpy(dtype=float) * mr_w,
        mr["cents"].to_numpy(dtype=float) * mr_w,
        np.ones(len(mr), dtype=bool),
        n,
    )

    active_residents = np.bincount(acc.customers["origin"].to_numpy(dtype=np.int64), minlength=n)
    business_regions = [regions.index_of(ma.region_id) for ma in merchants.values()]
    active_businesses = np.bincount(np.array(business_regions, dtype=np.int64), minlength=n)

    present = set(m.tolist()) | set(o[domestic].tolist())
    area_cat = area_cat.reshape(n, CATEGORY_COUNT, 2)
    res_cat = res_cat.reshape(n, CATEGORY_COUNT, 2)

    def tally(arr: np.ndarray, i: int) -> Tally:
        return Tally(float(arr[i, 0]), float(arr[i, 1]))

    aggregates = {}
    for i in sorted(present):
        rid = regions.ids[i]
        aggregates[rid] = RegionAggregate(
            region_id=rid,
            in_area_same_region=tally(same, i),
            in_area_domestic_visitors=tally(visitors, i),
            in_area_foreign=tally(foreigners, i),
            in_area_category_count=area_cat[i, :, 0].copy(),
            in_area_category_amount=area_cat[i, :, 1].copy(),
            in_area_night=tally(area_night, i),
            in_area_weekend=tally(area_weekend, i),
            resident=tally(resident, i),
            resident_category_count=res_cat[i, :, 0].copy(),
            resident_category_amount=res_cat[i, :, 1].copy(),
            resident_outside=tally(outside, i),
            resident_night=tally(res_night, i),
            resident_weekend=tally(res_weekend, i),
            resident_expensive=tally(res_expensive, i),
            active_residents=int(active_residents[i]),
            active_businesses=int(active_businesses[i]),
        )
    return aggregates, merchants


def aggregate(
    records: Union[Sequence[TransactionRecord], Iterable[pd.DataFrame]],
    regions: RegionTable,
    threads: int = 1,
) -> Tuple[Dict[str, RegionAggregate], Dict[str, MerchantAggregate]]:
    """
    聚合交易為區域與商戶累計值

    Args:
        records: TransactionRecord 序列，或 iter_transaction_batches 產生的批次
        regions: 已設定所需商戶市佔率的區域表
    """
    if isinstance(records, (list, tuple)) and (not records or isinstance(records[0], TransactionRecord)):
        batches: Iterable[pd.DataFrame] = [records_to_batch(records, regions)]
    else:
        batches = records
    return finalize(accumulate(batches, threads=threads), regions)


@dataclass
class IngestResult:
    aggregates: Dict[str, RegionAggregate]
    merchants: Dict[str, MerchantAggregate]
    report: RejectReport
    regions: RegionTable
    seconds: float

    @property
    def throughput(self) -> float:
        return self.report.rows_read / self.seconds if self.seconds > 0 else float("inf")

    def summary_frame(self) -> pd.DataFrame:
        """各區域去偏後的主要累計值（金額單位為歐元）"""
        rows = []
        for region in self.regions:
            agg = self.aggregates.get(region.region_id) or RegionAggregate(region_id=region.region_id)
            rows.append(
                {
                    "region_id": region.region_id,
                    "in_area_txn": agg.in_area.count,
                    "in_area_amount_eur": agg.in_area.amount / 100,
                    "in_area_foreign_txn": agg.in_area_foreign.count,
                    "resident_txn": agg.resident.count,
                    "resident_amount_eur": agg.resident.amount / 100,
                    "active_residents": agg.active_residents,
                    "active_businesses": agg.active_businesses,
                    "business_market_share": region.business_market_share,
                }
            )
        return pd.DataFrame(rows)


def ingest_file(
    source: Source,
    regions: RegionTable,
    threads: int = 1,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    external_totals: Optional[Mapping[str, int]] = None,
) -> IngestResult:
    """
    單次串流：解析 → 累計 → 計算商戶市佔率 → 去偏聚合

    只有出現外國交易的區域需要商戶市佔率；其餘區域維持未設定。
    """
    started = time.perf_counter()
    report = RejectReport()
    logger.info("[ingest] 開始讀取交易資料（%d 執行緒，每區塊 %d 列）", threads, chunk_rows)
    acc = accumulate(iter_transaction_batches(source, regions, report, chunk_rows), threads=threads)
    return _complete(acc, regions, report, external_totals, started)


def ingest_frame(
    frame: pd.DataFrame,
    regions: RegionTable,
    threads: int = 1,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    external_totals: Optional[Mapping[str, int]] = None,
) -> IngestResult:
    """
    匯入記憶體中的交易表，驗證與聚合規則與 ingest_file 相同

    Args:
        frame: 具備交易檔所有欄位的 DataFrame，值以字串形式驗證
    """
    missing = [c for c in TRANSACTION_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestError(f"交易資料缺少欄位: {', '.join(missing)}")
    started = time.perf_counter()
    report = RejectReport()
    report.rows_read = len(frame)

    def batches() -> Iterator[pd.DataFrame]:
        for start in range(0, len(frame), chunk_rows):
            raw = frame.iloc[start : start + chunk_rows][list(TRANSACTION_COLUMNS)].astype(str)
            yield _validate_chunk(raw.reset_index(drop=True), regions, report)

    acc = accumulate(batches(), threads=threads)
    return _complete(acc, regions, report, external_totals, started)


def _complete(
    acc: IngestAccumulator,
    regions: RegionTable,
    report: RejectReport,
    external_totals: Optional[Mapping[str, int]],
    started: float,
) -> IngestResult:
    needed = [rid for rid in acc.foreign_regions(regions) if regions.get(rid).business_market_share is None]
    if needed:
        regions = compute_business_share(acc, regions, external_totals, only=needed)
        logger.info("[ingest] 已計算 %d 個區域的商戶市佔率", len(needed))

    aggregates, merchants = finalize(acc, regions)
    seconds = time.perf_counter() - started
    result = IngestResult(aggregates, merchants, report, regions, seconds)
    logger.info(
        "[ingest] 完成: %d 列讀取，%d 列接受，%d 列拒絕，%.0f 列/秒",
        report.rows_read,
        report.accepted,
        report.rejected,
        result.throughput,
    )
    if not report.is_empty():
        logger.warning("[ingest] 拒絕原因: %s", report.to_dict())
    return result
