"""
測試共用夾具
- 3 個區域、12 筆交易的手算資料
- 植入潛在因子的指標矩陣與官方指數（不經過交易資料）
- 小型合成語料（產生 → 匯入 → 指標）
"""
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import special

from services.aggregates import load_region_table
from services.indicators import INDICATOR_COUNT, IndicatorMatrix, compute_indicators
from services.ingest import ingest_file
from services.pipeline import INDEX_NAMES, OfficialIndices
from services.synthgen import DEFAULT_INDEX_PRIORS, generate, make_config, write_corpus

HAND_REGIONS = """\
region_id,name,area_km2,customer_market_share,external_domestic_txn_count
R1,Alpha,10,0.5,5
R2,Beta,20,0.25,3
R3,Gamma,5,1.0,0
"""

# 2011-01-03 是星期一；T07 為夜間外國交易，T08 為週末外國交易，T12 落在 06:00 邊界
HAND_TRANSACTIONS = """\
txn_id,timestamp,amount_cents,customer_id,customer_kind,home_region_or_country,merchant_id,merchant_region,category_id,group_id
T01,2011-01-03T10:00,1000,C1,D,R1,M1,R1,7,1
T02,2011-01-03T23:00,2000,C1,D,R1,M1,R1,7,1
T03,2011-01-08T12:00,3000,C2,D,R1,M2,R1,13,2
T04,2011-01-04T09:00,4000,C2,D,R1,M3,R2,13,2
T05,2011-01-05T14:00,1500,C3,D,R2,M3,R2,13,2
T06,2011-01-05T15:00,2500,C3,D,R2,M1,R1,7,1
T07,2011-01-06T02:00,5000,F1,F,FR,M1,R1,7,1
T08,2011-01-09T20:00,6000,F2,F,DE,M2,R1,13,2
T09,2011-01-07T11:00,800,C4,D,R3,M4,R3,1,1
T10,2011-01-07T12:00,1200,C4,D,R3,M4,R3,1,1
T11,2011-01-07T13:00,3000,C5,D,R3,M3,R2,13,2
T12,2011-01-09T06:00,700,C1,D,R1,M5,R1,4,1
"""

HEADER = HAND_TRANSACTIONS.splitlines()[0]


@pytest.fixture
def hand_files(tmp_path: Path) -> SimpleNamespace:
    regions = tmp_path / "regions.csv"
    transactions = tmp_path / "transactions.csv"
    regions.write_text(HAND_REGIONS, encoding="utf-8")
    transactions.write_text(HAND_TRANSACTIONS, encoding="utf-8")
    return SimpleNamespace(regions=regions, transactions=transactions, dir=tmp_path)


@pytest.fixture
def hand_regions(hand_files):
    return load_region_table(hand_files.regions)


@pytest.fixture
def hand_result(hand_files, hand_regions):
    return ingest_file(hand_files.transactions, hand_regions)


def make_planted(seed: int = 7, region_count: int = 52, factor_count: int = 3):
    """
    指標 = exp(線性(潛在因子)) × 基準值，官方指數 = F⁻¹(sigmoid(線性(潛在因子)))
    """
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((region_count, factor_count))
    A = rng.standard_normal((factor_count, INDICATOR_COUNT))
    base = rng.uniform(1.0, 100.0, size=INDICATOR_COUNT)
    noise = 0.05 * rng.standard_normal((region_count, INDICATOR_COUNT))
    values = base * np.exp(0.25 * F @ A + noise)

    loadings = rng.standard_normal((len(INDEX_NAMES), factor_count))
    loadings = 1.2 * loadings / np.linalg.norm(loadings, axis=1, keepdims=True)
    p = special.expit(F @ loadings.T)
    index_values = np.column_stack(
        [DEFAULT_INDEX_PRIORS[name].ppf(p[:, j]) for j, name in enumerate(INDEX_NAMES)]
    )
    region_ids = [f"P{r + 1:02d}" for r in range(region_count)]
    return SimpleNamespace(
        matrix=IndicatorMatrix(region_ids, values),
        indices=OfficialIndices(region_ids, index_values),
        factors=F,
        region_ids=region_ids,
    )


@pytest.fixture(scope="session")
def planted():
    return make_planted()


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """52 個區域、12 萬筆交易、無雜訊的合成語料，匯入後算好指標"""
    out = tmp_path_factory.mktemp("synth")
    config = make_config(region_count=52, transactions_total=120_000, seed=2011)
    corpus = generate(config)
    paths = write_corpus(corpus, out)
    regions = load_region_table(paths["regions"])
    result = ingest_file(paths["transactions"], regions)
    matrix = compute_indicators(result.aggregates, result.merchants, result.regions)
    return SimpleNamespace(config=config, corpus=corpus, paths=paths, regions=regions, result=result, matrix=matrix)
