"""
交易匯入測試：解析、拒絕原因、去偏權重、商戶市佔率與聚合
"""
import io
import random
from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from services.aggregates import RegionMeta, RegionTable, load_region_table
from services.errors import BusinessShareError, ConfigError, IngestError, MissingBusinessShareError
from services.indicators import compute_indicators
from services.ingest import (
    Domestic,
    Foreign,
    RejectReport,
    TransactionRecord,
    accumulate,
    aggregate,
    compute_business_share,
    debias_weight,
    finalize,
    ingest_file,
    ingest_frame,
    iter_transaction_batches,
    parse_transactions,
    records_to_batch,
)
from tests.conftest import HAND_TRANSACTIONS, HEADER


def _record(txn_id, kind, merchant_region="R1", amount=1000, customer="C1", category=7, when=None):
    return TransactionRecord(
        txn_id=txn_id,
        timestamp=when or datetime(2011, 1, 3, 10, 0),
        amount=amount,
        customer_id=customer,
        customer_kind=kind,
        merchant_id="M1",
        merchant_region_id=merchant_region,
        category_id=category,
        group_id=1,
    )


def _stream(lines):
    return io.BytesIO(("\n".join([HEADER, *lines]) + "\n").encode("utf-8"))


def _indicator_values(aggregates, merchants, regions):
    return compute_indicators(aggregates, merchants, regions).values


def test_parse_well_formed_rows(hand_regions):
    lines = HAND_TRANSACTIONS.splitlines()[1:4]
    records, report = parse_transactions(_stream(lines), hand_regions)
    assert len(records) == 3
    assert report.is_empty()
    assert report.rows_read == 3
    first = records[0]
    assert first.txn_id == "T01"
    assert first.amount == 1000
    assert first.customer_kind == Domestic("R1")
    assert first.timestamp == datetime(2011, 1, 3, 10, 0)


def test_parse_foreign_customer(hand_regions):
    lines = [HAND_TRANSACTIONS.splitlines()[7]]
    records, _ = parse_transactions(_stream(lines), hand_regions)
    assert records[0].customer_kind == Foreign("FR")


def test_reject_reasons_are_counted():
    regions = RegionTable([RegionMeta(region_id="R1", name="a", area_km2=1, customer_market_share=1)])
    lines = [
        "A1,2011-01-03T10:00,100,C1,D,R1,M1,R1,7,1",
        "A2,2011-01-03T10:00,0,C1,D,R1,M1,R1,7,1",
        "A3,2011-01-03T10:00,100,C1,D,R1,M1,R1,77,1",
        "A4,2011-01-03T10:00,100,C1,D,R9,M1,R1,7,1",
        "A5,2011-01-03T10:00,100,C1,D,R1,M1,R9,7,1",
        "A6,not-a-date,100,C1,D,R1,M1,R1,7,1",
        "A7,2011-01-03T10:00,100,C1,X,R1,M1,R1,7,1",
        "A8,2011-01-03T10:00,100,C1,D,R1,M1,R1,7,13",
        "A9,2011-01-03T10:00,1.5,C1,D,R1,M1,R1,7,1",
        "A10,2011-01-03T10:00,100",
        "A11,2011-01-03T10:00,100,C1,D,R1,M1,R1,7,1,extra",
    ]
    records, report = parse_transactions(_stream(lines), regions)
    assert [r.txn_id for r in records] == ["A1"]
    assert report.to_dict() == {
        "bad_amount": 1,
        "bad_customer_kind": 1,
        "bad_timestamp": 1,
        "malformed_row": 2,
        "nonpositive_amount": 1,
        "out_of_range_category": 1,
        "out_of_range_group": 1,
        "unknown_home_region": 1,
        "unknown_merchant_region": 1,
    }
    # 拒絕數 + 接受數 = 輸入列數
    assert report.rejected + len(records) == report.rows_read == len(lines)


def test_zero_amount_row_is_rejected(hand_regions):
    lines = HAND_TRANSACTIONS.splitlines()[1:3] + ["T99,2011-01-03T10:00,0,C1,D,R1,M1,R1,7,1"]
    records, report = parse_transactions(_stream(lines), hand_regions)
    assert len(records) == 2
    assert report.to_dict() == {"nonpositive_amount": 1}


def test_undecodable_row_is_rejected_not_fatal(hand_regions, tmp_path):
    path = tmp_path / "transactions.csv"
    bad = b"T13,2011-01-03T10:00,1000,C\xff\xfe,D,R1,M1,R1,7,1\n"
    path.write_bytes(HAND_TRANSACTIONS.encode("utf-8") + bad)
    records, report = parse_transactions(path, hand_regions)
    assert len(records) == 12
    assert "T13" not in {r.txn_id for r in records}
    assert report.to_dict() == {"malformed_row": 1}
    assert report.rows_read == 13
    result = ingest_file(path, hand_regions)
    assert result.report.accepted == 12 and result.report.rejected == 1


def test_leading_comment_lines_are_skipped(hand_regions, hand_result, tmp_path):
    path = tmp_path / "transactions.csv"
    path.write_text("# tool=card-econ\n# seed=2011\n" + HAND_TRANSACTIONS, encoding="utf-8")
    result = ingest_file(path, hand_regions)
    assert result.report.rows_read == 12 and result.report.is_empty()
    assert np.array_equal(
        _indicator_values(result.aggregates, result.merchants, result.regions),
        _indicator_values(hand_result.aggregates, hand_result.merchants, hand_result.regions),
    )


def test_frame_ingest_matches_file_ingest(hand_regions, hand_result):
    frame = pd.read_csv(io.StringIO(HAND_TRANSACTIONS), dtype=str, keep_default_na=False)
    # 數值欄位以整數型別提供時，轉成字串後驗證結果相同
    frame["amount_cents"] = frame["amount_cents"].astype("int64")
    frame.loc[len(frame)] = [*frame.iloc[0, :2], -5, *frame.iloc[0, 3:]]
    result = ingest_frame(frame, hand_regions, chunk_rows=5)
    assert result.report.rows_read == 13 and result.report.accepted == 12
    assert result.report.to_dict() == {"nonpositive_amount": 1}
    assert np.array_equal(
        _indicator_values(result.aggregates, result.merchants, result.regions),
        _indicator_values(hand_result.aggregates, hand_result.merchants, hand_result.regions),
    )
    with pytest.raises(IngestError):
        ingest_frame(frame.drop(columns=["group_id"]), hand_regions)


def test_missing_header_column_is_fatal(hand_regions):
    stream = io.BytesIO(b"txn_id,timestamp\nT1,2011-01-03T10:00\n")
    with pytest.raises(IngestError):
        parse_transactions(stream, hand_regions)


def test_unreadable_source_is_fatal(hand_regions, tmp_path):
    with pytest.raises(IngestError):
        parse_transactions(tmp_path / "missing.csv", hand_regions)


def test_chunked_reading_matches_single_chunk(hand_files, hand_regions):
    report = RejectReport()
    batches = list(iter_transaction_batches(hand_files.transactions, hand_regions, report, chunk_rows=5))
    assert [len(b) for b in batches] == [5, 5, 2]
    assert report.rows_read == 12 and report.is_empty()


def test_region_table_validation(tmp_path):
    path = tmp_path / "regions.csv"
    path.write_text("region_id,name,area_km2,customer_market_share\nR1,a,0,0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_region_table(path)
    path.write_text("region_id,name,area_km2,customer_market_share\nR1,a,1,0.5\nR1,b,1,0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="R1"):
        load_region_table(path)
    with pytest.raises(ConfigError):
        load_region_table(tmp_path / "nope.csv")


def test_debias_weight_domestic(hand_regions):
    assert debias_weight(_record("a", Domestic("R2")), hand_regions) == 4.0
    assert debias_weight(_record("b", Domestic("R3")), hand_regions) == 1.0


def test_debias_weight_foreign(hand_regions):
    regions = hand_regions.with_business_shares({"R1": 0.2})
    assert debias_weight(_record("a", Foreign("FR")), regions) == pytest.approx(5.0, rel=1e-15)


def test_debias_weight_foreign_requires_business_share(hand_regions):
    with pytest.raises(MissingBusinessShareError):
        debias_weight(_record("a", Foreign("FR")), hand_regions)


def test_business_share_ratio():
    regions = RegionTable(
        [
            RegionMeta(region_id="R1", name="a", area_km2=1, customer_market_share=1, external_domestic_txn_count=20),
            RegionMeta(region_id="R2", name="b", area_km2=1, customer_market_share=1, external_domestic_txn_count=0),
        ]
    )
    records = [_record(f"a{i}", Domestic("R1")) for i in range(80)]
    records += [_record(f"b{i}", Domestic("R2"), merchant_region="R2") for i in range(3)]
    shares = compute_business_share(records, regions)
    assert shares.get("R1").business_market_share == pytest.approx(0.8, abs=1e-15)
    assert shares.get("R2").business_market_share == 1.0


def test_business_share_external_totals_override(hand_regions):
    records, _ = parse_transactions(io.BytesIO(HAND_TRANSACTIONS.encode("utf-8")), hand_regions)
    shares = compute_business_share(records, hand_regions, external_totals={"R1": 15})
    # R1 資料集內國內交易 5 筆：T01 T02 T03 T06 T12
    assert shares.get("R1").business_market_share == pytest.approx(0.25, abs=1e-15)


def test_business_share_both_zero_lists_region(hand_regions):
    regions = RegionTable(
        [*hand_regions, RegionMeta(region_id="R4", name="d", area_km2=1, customer_market_share=1, external_domestic_txn_count=0)]
    )
    records, _ = parse_transactions(io.BytesIO(HAND_TRANSACTIONS.encode("utf-8")), regions)
    with pytest.raises(BusinessShareError) as info:
        compute_business_share(records, regions)
    assert info.value.region_ids == ["R4"]


def test_business_share_many_regions_matches_row_ratio():
    rng = np.random.default_rng(3)
    inside = rng.integers(1, 200, size=52)
    external = rng.integers(0, 200, size=52)
    regions = RegionTable(
        RegionMeta(
            region_id=f"R{i:02d}", name="x", area_km2=1, customer_market_share=1,
            external_domestic_txn_count=int(external[i]),
        )
        for i in range(52)
    )
    records = [
        _record(f"{i}-{j}", Domestic(f"R{i:02d}"), merchant_region=f"R{i:02d}")
        for i in range(52)
        for j in range(int(inside[i]))
    ]
    shares = compute_business_share(records, regions)
    for i in range(52):
        expected = inside[i] / (inside[i] + external[i])
        assert shares.get(f"R{i:02d}").business_market_share == expected


def test_single_domestic_record_trace(hand_regions):
    record = _record("a", Domestic("R1"), amount=1234)
    aggregates, merchants = aggregate([record], hand_regions)
    agg = aggregates["R1"]
    assert agg.in_area.amount == agg.resident.amount == 2 * 1234
    assert agg.in_area_same_region.count == 2.0
    assert agg.in_area_domestic_visitors.count == 0 and agg.in_area_foreign.count == 0
    assert merchants["M1"].txn_count == 1


def test_empty_input_emits_no_regions(hand_regions):
    aggregates, merchants = aggregate([], hand_regions)
    assert aggregates == {} and merchants == {}
    result = ingest_file(io.BytesIO((HEADER + "\n").encode("utf-8")), hand_regions)
    assert result.aggregates == {} and result.report.rows_read == 0


def test_hand_fixture_accumulators(hand_result):
    R1 = hand_result.aggregates["R1"]
    assert hand_result.regions.get("R1").business_market_share == 0.5
    # 只有出現外國交易的區域需要商戶市佔率
    assert hand_result.regions.get("R2").business_market_share is None
    assert (R1.in_area_same_region.count, R1.in_area_same_region.amount) == (8.0, 13400.0)
    assert (R1.in_area_domestic_visitors.count, R1.in_area_domestic_visitors.amount) == (4.0, 10000.0)
    assert (R1.in_area_foreign.count, R1.in_area_foreign.amount) == (4.0, 22000.0)
    assert (R1.resident.count, R1.resident.amount) == (10.0, 21400.0)
    assert (R1.resident_outside.count, R1.resident_outside.amount) == (2.0, 8000.0)
    assert (R1.in_area_night.count, R1.in_area_night.amount) == (4.0, 14000.0)
    assert (R1.in_area_weekend.count, R1.in_area_weekend.amount) == (6.0, 19400.0)
    assert (R1.resident_expensive.count, R1.resident_expensive.amount) == (2.0, 6000.0)
    assert R1.active_residents == 2 and R1.active_businesses == 3

    R2 = hand_result.aggregates["R2"]
    assert (R2.in_area.count, R2.in_area.amount) == (7.0, 17000.0)
    assert (R2.resident.count, R2.resident.amount) == (8.0, 16000.0)
    R3 = hand_result.aggregates["R3"]
    assert (R3.resident.count, R3.resident.amount) == (3.0, 5000.0)
    assert R3.active_residents == 2

    assert {m: a.region_id for m, a in hand_result.merchants.items()} == {
        "M1": "R1", "M2": "R1", "M3": "R2", "M4": "R3", "M5": "R1",
    }


def test_partition_invariants(hand_result):
    for agg in hand_result.aggregates.values():
        parts = agg.in_area_same_region + agg.in_area_domestic_visitors + agg.in_area_foreign
        assert parts == agg.in_area
        assert agg.in_area_category_amount.sum() == agg.in_area.amount
        assert agg.in_area_category_count.sum() == agg.in_area.count
        assert agg.resident_category_amount.sum() == agg.resident.amount


def test_total_weighted_amount_is_conserved(hand_result):
    total = sum(agg.in_area.amount for agg in hand_result.aggregates.values())
    assert total == 64400.0


def test_aggregation_is_order_independent(hand_files, hand_result):
    records, _ = parse_transactions(hand_files.transactions, hand_result.regions)
    expected = _indicator_values(hand_result.aggregates, hand_result.merchants, hand_result.regions)
    rng = random.Random(11)
    for _ in range(5):
        shuffled = records[:]
        rng.shuffle(shuffled)
        aggregates, merchants = aggregate(shuffled, hand_result.regions)
        assert np.array_equal(_indicator_values(aggregates, merchants, hand_result.regions), expected)


def test_merge_matches_concatenation(hand_files, hand_result):
    regions = hand_result.regions
    records, _ = parse_transactions(hand_files.transactions, regions)
    whole = finalize(accumulate([records_to_batch(records, regions)]), regions)
    split = finalize(
        accumulate([records_to_batch(records[:4], regions), records_to_batch(records[4:], regions)]), regions
    )
    threaded = finalize(
        accumulate([records_to_batch(records[i : i + 3], regions) for i in range(0, 12, 3)], threads=4), regions
    )
    expected = _indicator_values(*whole, regions)
    assert np.array_equal(_indicator_values(*split, regions), expected)
    assert np.array_equal(_indicator_values(*threaded, regions), expected)


def test_ingest_threads_and_chunks_do_not_change_result(hand_files, hand_regions, hand_result):
    other = ingest_file(hand_files.transactions, hand_regions, threads=3, chunk_rows=2)
    assert np.array_equal(
        _indicator_values(other.aggregates, other.merchants, other.regions),
        _indicator_values(hand_result.aggregates, hand_result.merchants, hand_result.regions),
    )


def test_summary_frame(hand_result):
    frame = hand_result.summary_frame()
    assert list(frame["region_id"]) == ["R1", "R2", "R3"]
    row = frame.set_index("region_id").loc["R1"]
    assert row["in_area_amount_eur"] == 454.0
    assert row["business_market_share"] == 0.5
