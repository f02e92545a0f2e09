"""
模型管線服務
指標正規化 → PCA → 每個官方指數一個 logit GLM → 反 CDF，
以及重複隨機切分的交叉驗證、主成分數掃描與報表
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from services.decompose import ComponentSelection, PCAModel, correlate, fit_pca, project, select_components
from services.errors import (
    CardEconError,
    ConfigError,
    DimensionMismatchError,
    FitError,
    InsufficientDataError,
    ZeroVarianceError,
)
from services.glm import GLMModel, fit_glm, predict_norm, r_squared
from services.indicators import INDICATOR_COLUMNS, INDICATOR_COUNT, IndicatorMatrix
from services.normalize import FittedDistribution, fit_distribution, from_quantile, to_quantile
from utils.tables import read_table, write_table

logger = logging.getLogger(__name__)

INDEX_NAMES = (
    "gdp",
    "housing_price",
    "unemployment_rate",
    "higher_education_pct",
    "crime_rate",
    "life_expectancy",
)
NONNEGATIVE_INDICES = ("unemployment_rate", "higher_education_pct", "crime_rate")

FORMAT_VERSION = 1
DEFAULT_SEED = 2011
DEFAULT_SESSIONS = 4
DEFAULT_TRAIN_SIZE = 34
DEFAULT_K = 6
CORRELATION_FLAG = 0.40

SplitMode = Literal["independent", "partition"]
METRICS = ("r2_train_norm", "r2_val_norm", "r2_train_orig", "r2_val_orig")


@dataclass
class OfficialIndices:
    """各區域的六個官方社經指數"""

    region_ids: List[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.region_ids), len(INDEX_NAMES)):
            raise ConfigError(f"官方指數形狀 {self.values.shape} 與 {len(self.region_ids)} 個區域不符")
        self._index = {rid: i for i, rid in enumerate(self.region_ids)}

    def __contains__(self, region_id: object) -> bool:
        return region_id in self._index

    def rows(self, region_ids: Sequence[str]) -> np.ndarray:
        missing = [rid for rid in region_ids if rid not in self._index]
        if missing:
            raise ConfigError(f"官方指數缺少區域: {', '.join(missing)}")
        values = self.values[[self._index[rid] for rid in region_ids]]
        if np.isnan(values).any():
            bad = [rid for rid, row in zip(region_ids, values) if np.isnan(row).any()]
            raise ConfigError(f"官方指數有缺值: {', '.join(bad)}")
        return values

    def column(self, name: str) -> np.ndarray:
        return self.values[:, INDEX_NAMES.index(name)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(INDEX_NAMES))
        frame.insert(0, "region_id", self.region_ids)
        return frame

    def write(self, path: Path, header: Sequence[str] = ()) -> Path:
        return write_table(self.to_frame(), path, header)


def load_official_indices(path: Path) -> OfficialIndices:
    """讀取官方指數檔（region_id + 六個指數欄位）"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"找不到官方指數檔案: {path}")
    frame = read_table(path, dtype={"region_id": str})
    missing = [c for c in ("region_id", *INDEX_NAMES) if c not in frame.columns]
    if missing:
        raise ConfigError(f"官方指數 {path} 缺少欄位: {', '.join(missing)}")
    for name in NONNEGATIVE_INDICES:
        if (frame[name] < 0).any():
            raise ConfigError(f"官方指數 {name} 不可為負值")
    indices = OfficialIndices(frame["region_id"].tolist(), frame[list(INDEX_NAMES)].to_numpy(dtype=float))
    logger.info("[indices] 載入 %d 個區域的官方指數: %s", len(indices.region_ids), path.name)
    return indices


class IndexModel(BaseModel):
    """單一官方指數的輸出分布與 GLM"""

    model_config = ConfigDict(frozen=True)

    distribution: FittedDistribution
    glm: GLMModel


class TrainedPipeline(BaseModel):
    """訓練完成的管線；不可變，可序列化為 JSON"""

    model_config = ConfigDict(frozen=True)

    format_version: int = FORMAT_VERSION
    indicator_columns: List[str]
    input_distributions: List[FittedDistribution]
    pca: PCAModel
    selection: ComponentSelection
    k: int
    outputs: Dict[str, IndexModel]
    training_regions: List[str]
    feature_regions: List[str]
    seed: int
    provenance: Dict[str, str] = {}

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainedPipeline":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"管線檔不是合法的 JSON: {e}") from e
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigError(f"不支援的管線格式版本: {version}")
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"管線檔內容不合法: {e}") from e

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "TrainedPipeline":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"找不到管線檔案: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def with_provenance(self, provenance: Mapping[str, str]) -> "TrainedPipeline":
        return self.model_copy(update={"provenance": dict(provenance)})


@dataclass(frozen=True)
class FeatureModel:
    """訓練區域上擬合的 35 個指標分布與 PCA"""

    distributions: Tuple[FittedDistribution, ...]
    pca: PCAModel
    regions: Tuple[str, ...]


def _matrix_rows(matrix: IndicatorMatrix, region_ids: Sequence[str]) -> np.ndarray:
    known = set(matrix.region_ids)
    missing = [rid for rid in region_ids if rid not in known]
    if missing:
        raise ConfigError(f"指標矩陣缺少區域: {', '.join(missing)}")
    return matrix.rows(region_ids)


def normalize_matrix(values: np.ndarray, distributions: Sequence[FittedDistribution]) -> np.ndarray:
    """以每欄各自的分布做分位數正規化（夾值，不報錯）"""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != len(distributions):
        raise DimensionMismatchError(f"需要 {len(distributions)} 個指標，得到 {values.shape[1]}")
    return np.column_stack([to_quantile(values[:, j], d, strict=False) for j, d in enumerate(distributions)])


def fit_features(matrix: IndicatorMatrix, region_ids: Sequence[str], standardize: bool = False) -> FeatureModel:
    """在指定區域上擬合 35 個指標分布與 PCA"""
    X = _matrix_rows(matrix, region_ids)
    distributions = []
    for j, name in enumerate(INDICATOR_COLUMNS):
        try:
            distributions.append(fit_distribution(X[:, j]))
        except CardEconError as e:
            raise FitError(name, e) from e
    try:
        pca = fit_pca(normalize_matrix(X, distributions), standardize=standardize)
    except CardEconError as e:
        raise FitError("pca", e) from e
    return FeatureModel(tuple(distributions), pca, tuple(region_ids))


def _fit_heads(
    features: FeatureModel,
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    region_ids: Sequence[str],
    selection: ComponentSelection,
    seed: int,
) -> TrainedPipeline:
    k = select_components(features.pca, selection)
    if len(region_ids) <= k + 1:
        raise InsufficientDataError(f"k={k} 至少需要 {k + 2} 個訓練區域，目前只有 {len(region_ids)} 個")
    Z = normalize_matrix(_matrix_rows(matrix, region_ids), features.distributions)
    scores = project(features.pca, Z, k)
    Y = indices.rows(region_ids)

    outputs = {}
    for j, name in enumerate(INDEX_NAMES):
        try:
            distribution = fit_distribution(Y[:, j])
            y_norm = to_quantile(Y[:, j], distribution)
            glm = fit_glm(scores, y_norm)
        except CardEconError as e:
            raise FitError(name, e) from e
        outputs[name] = IndexModel(distribution=distribution, glm=glm)

    return TrainedPipeline(
        indicator_columns=list(INDICATOR_COLUMNS),
        input_distributions=list(features.distributions),
        pca=features.pca,
        selection=selection,
        k=k,
        outputs=outputs,
        training_regions=list(region_ids),
        feature_regions=list(features.regions),
        seed=seed,
    )


def train(
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    region_subset: Sequence[str],
    selection: Optional[ComponentSelection] = None,
    seed: int = DEFAULT_SEED,
    standardize: bool = False,
    feature_regions: Optional[Sequence[str]] = None,
) -> TrainedPipeline:
    """
    訓練完整管線

    Args:
        matrix: 指標矩陣
        indices: 官方指數
        region_subset: 訓練區域；分布、PCA 與 GLM 都只用這些區域擬合
        selection: 主成分數的選擇方式，預設固定 k=6
        seed: 記錄於管線中
        standardize: PCA 前是否標準化
        feature_regions: 若指定，正規化與 PCA 改用這些區域（全域特徵變體）
    """
    selection = selection or ComponentSelection.fixed(DEFAULT_K)
    region_ids = list(region_subset)
    if len(set(region_ids)) != len(region_ids):
        raise ConfigError("訓練區域有重複")
    indices.rows(region_ids)
    features = fit_features(matrix, list(feature_regions) if feature_regions else region_ids, standardize)
    pipeline = _fit_heads(features, matrix, indices, region_ids, selection, seed)
    logger.info("[train] %d 個區域，k=%d，%s", len(region_ids), pipeline.k, selection.describe())
    return pipeline


def predict_rows(pipeline: TrainedPipeline, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    對指標列做預測

    Returns:
        (正規化尺度 m×6, 原始尺度 m×6)
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    Z = normalize_matrix(values, pipeline.input_distributions)
    scores = project(pipeline.pca, Z, pipeline.k)
    normalized = np.empty((values.shape[0], len(INDEX_NAMES)))
    original = np.empty_like(normalized)
    for j, name in enumerate(INDEX_NAMES):
        head = pipeline.outputs[name]
        normalized[:, j] = predict_norm(head.glm, scores)
        original[:, j] = from_quantile(normalized[:, j], head.distribution)
    return normalized, original


@dataclass
class Prediction:
    region_ids: List[str]
    normalized: np.ndarray
    original: np.ndarray
    errors: Dict[str, str] = field(default_factory=dict)

    def column(self, name: str, scale: str = "original") -> np.ndarray:
        source = self.original if scale == "original" else self.normalized
        return source[:, INDEX_NAMES.index(name)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"region_id": self.region_ids})
        for j, name in enumerate(INDEX_NAMES):
            frame[name] = self.original[:, j]
            frame[f"{name}_norm"] = self.normalized[:, j]
        return frame


def predict(
    pipeline: TrainedPipeline,
    matrix: IndicatorMatrix,
    region_subset: Optional[Sequence[str]] = None,
) -> Prediction:
    """
    預測區域的六個指數；未知區域或含非有限值的列記為該區域的錯誤，其餘照常預測
    """
    requested = list(region_subset) if region_subset is not None else list(matrix.region_ids)
    known = set(matrix.region_ids)
    errors: Dict[str, str] = {}
    ok: List[str] = []
    for rid in requested:
        if rid not in known:
            errors[rid] = f"指標矩陣中沒有區域 {rid}"
        elif not np.all(np.isfinite(matrix.row(rid))):
            errors[rid] = f"區域 {rid} 的指標含有缺值"
        else:
            ok.append(rid)
    for rid, message in errors.items():
        logger.warning("[predict] %s", message)

    if ok:
        normalized, original = predict_rows(pipeline, matrix.rows(ok))
    else:
        normalized = original = np.empty((0, len(INDEX_NAMES)))
    return Prediction(ok, normalized, original, errors)


def _safe_r2(actual: np.ndarray, predicted: np.ndarray) -> Optional[float]:
    try:
        return r_squared(actual, predicted)
    except (InsufficientDataError, ZeroVarianceError):
        return None


def evaluate(
    pipeline: TrainedPipeline,
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    region_ids: Sequence[str],
) -> Dict[str, Tuple[Optional[float], Optional[float]]]:
    """
    計算每個指數在正規化與原始尺度上的 R²

    Returns:
        指數名稱 → (R² 正規化, R² 原始)；少於 2 個區域或目標為常數時為 None
    """
    if len(region_ids) == 0:
        return {name: (None, None) for name in INDEX_NAMES}
    normalized, original = predict_rows(pipeline, _matrix_rows(matrix, region_ids))
    Y = indices.rows(region_ids)
    result = {}
    for j, name in enumerate(INDEX_NAMES):
        y_norm = to_quantile(Y[:, j], pipeline.outputs[name].distribution, strict=False)
        result[name] = (_safe_r2(y_norm, normalized[:, j]), _safe_r2(Y[:, j], original[:, j]))
    return result


# ----------------------------------------------------------------- cross validation


@dataclass(frozen=True)
class IndexScores:
    r2_train_norm: Optional[float]
    r2_train_orig: Optional[float]
    r2_val_norm: Optional[float] = None
    r2_val_orig: Optional[float] = None


@dataclass
class SessionResult:
    session: int
    train_regions: List[str]
    validation_regions: List[str]
    k: Optional[int] = None
    scores: Dict[str, IndexScores] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class CrossValReport:
    """交叉驗證結果：每回合、每指數的訓練/驗證 R²（兩種尺度）"""

    seed: int
    selection: ComponentSelection
    split_mode: str
    refit_features: bool
    sessions: List[SessionResult]

    @property
    def succeeded(self) -> List[SessionResult]:
        return [s for s in self.sessions if s.ok]

    @property
    def failed(self) -> List[SessionResult]:
        return [s for s in self.sessions if not s.ok]

    def averages(self) -> Dict[str, Dict[str, Optional[float]]]:
        """成功回合的算術平均；沒有任何值時為 None"""
        result = {}
        for name in INDEX_NAMES:
            row = {}
            for metric in METRICS:
                values = [getattr(s.scores[name], metric) for s in self.succeeded]
                values = [v for v in values if v is not None]
                row[metric] = float(np.mean(values)) if values else None
            result[name] = row
        return result

    def mean_over_indices(self) -> Dict[str, Optional[float]]:
        averages = self.averages()
        result = {}
        for metric in METRICS:
            values = [averages[name][metric] for name in INDEX_NAMES if averages[name][metric] is not None]
            result[metric] = float(np.mean(values)) if values else None
        return result

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.succeeded:
            for name in INDEX_NAMES:
                sc = s.scores[name]
                rows.append({"session": str(s.session), "index": name, "k": s.k, **{m: getattr(sc, m) for m in METRICS}})
        for name, avg in self.averages().items():
            rows.append({"session": "mean", "index": name, "k": None, **avg})
        frame = pd.DataFrame(rows, columns=["session", "index", "k", *METRICS])
        return frame

    def splits_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.sessions:
            rows += [{"session": s.session, "region_id": rid, "role": "train"} for rid in s.train_regions]
            rows += [{"session": s.session, "region_id": rid, "role": "validation"} for rid in s.validation_regions]
        return pd.DataFrame(rows, columns=["session", "region_id", "role"])

    def failures_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"session": s.session, "error": s.error} for s in self.failed], columns=["session", "error"]
        )


def _session_rng(seed: int, *words: int) -> np.random.Generator:
    # Philox 為計數器型產生器，跨平台可重現
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *words])))


def make_splits(
    region_ids: Sequence[str],
    sessions: int,
    train_size: int,
    seed: int,
    split_mode: SplitMode = "independent",
) -> List[Tuple[List[str], List[str]]]:
    """
    產生每回合的 (訓練區域, 驗證區域)，兩者皆保持原始區域順序

    independent: 每回合以 (seed, 回合) 各自獨立抽樣
    partition: 一次洗牌後依序取不重疊的驗證區塊，需要 sessions × 驗證數 ≤ 區域數
    """
    region_ids = list(region_ids)
    m = len(region_ids)
    if sessions < 1:
        raise ConfigError("sessions 必須 ≥ 1")
    if not 2 <= train_size <= m:
        raise ConfigError(f"train_size 必須在 2..{m}，得到 {train_size}")
    if split_mode not in ("independent", "partition"):
        raise ConfigError(f"未知的切分模式: {split_mode}")

    validation_size = m - train_size
    if split_mode == "partition":
        if sessions * validation_size > m:
            raise ConfigError(
                f"partition 模式需要 sessions × 驗證區域數 ≤ {m}，"
                f"目前為 {sessions} × {validation_size} = {sessions * validation_size}"
            )
        order = _session_rng(seed).permutation(m)
    splits = []
    for s in range(1, sessions + 1):
        if split_mode == "independent":
            chosen = _session_rng(seed, s).permutation(m)[:train_size]
            in_train = np.zeros(m, dtype=bool)
            in_train[chosen] = True
        else:
            val_idx = order[(s - 1) * validation_size : s * validation_size]
            in_train = np.ones(m, dtype=bool)
            in_train[val_idx] = False
        splits.append(
            ([rid for rid, t in zip(region_ids, in_train) if t], [rid for rid, t in zip(region_ids, in_train) if not t])
        )
    return splits


def _run_session(
    session: int,
    split: Tuple[List[str], List[str]],
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    selections: Sequence[ComponentSelection],
    seed: int,
    standardize: bool,
    global_features: Optional[FeatureModel],
) -> List[SessionResult]:
    train_ids, val_ids = split
    results = []
    try:
        features = global_features or fit_features(matrix, train_ids, standardize)
    except CardEconError as e:
        logger.warning("[crossval] 第 %d 回合失敗: %s", session, e)
        return [SessionResult(session, train_ids, val_ids, error=str(e)) for _ in selections]

    for selection in selections:
        result = SessionResult(session, train_ids, val_ids)
        try:
            pipeline = _fit_heads(features, matrix, indices, train_ids, selection, seed)
            train_r2 = evaluate(pipeline, matrix, indices, train_ids)
            val_r2 = evaluate(pipeline, matrix, indices, val_ids)
            result.k = pipeline.k
            result.scores = {
                name: IndexScores(
                    r2_train_norm=train_r2[name][0],
                    r2_train_orig=train_r2[name][1],
                    r2_val_norm=val_r2[name][0],
                    r2_val_orig=val_r2[name][1],
                )
                for name in INDEX_NAMES
            }
        except CardEconError as e:
            logger.warning("[crossval] 第 %d 回合（%s）失敗: %s", session, selection.describe(), e)
            result.error = str(e)
        results.append(result)
    return results


def _cross_validate_many(
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    selections: Sequence[ComponentSelection],
    sessions: int,
    train_size: int,
    seed: int,
    split_mode: SplitMode,
    refit_features: bool,
    standardize: bool,
    threads: int,
    regions: Optional[Sequence[str]],
) -> List[CrossValReport]:
    region_ids = list(regions) if regions is not None else list(matrix.region_ids)
    indices.rows(region_ids)
    _matrix_rows(matrix, region_ids)
    splits = make_splits(region_ids, sessions, train_size, seed, split_mode)

    global_features = None
    if not refit_features:
        global_features = fit_features(matrix, region_ids, standardize)

    def run(item):
        s, split = item
        return _run_session(s, split, matrix, indices, selections, seed, standardize, global_features)

    items = list(enumerate(splits, start=1))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(items))) as executor:
            per_session = list(executor.map(run, items))
    else:
        per_session = [run(item) for item in items]

    reports = []
    for i, selection in enumerate(selections):
        report = CrossValReport(
            seed=seed,
            selection=selection,
            split_mode=split_mode,
            refit_features=refit_features,
            sessions=[results[i] for results in per_session],
        )
        if not report.succeeded:
            errors = "; ".join(f"#{s.session}: {s.error}" for s in report.failed)
            raise InsufficientDataError(f"所有交叉驗證回合都失敗（{selection.describe()}）: {errors}")
        reports.append(report)
    return reports


def cross_validate(
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    sessions: int = DEFAULT_SESSIONS,
    train_size: int = DEFAULT_TRAIN_SIZE,
    seed: int = DEFAULT_SEED,
    selection: Optional[ComponentSelection] = None,
    split_mode: SplitMode = "independent",
    refit_features: bool = True,
    standardize: bool = False,
    threads: int = 1,
    regions: Optional[Sequence[str]] = None,
) -> CrossValReport:
    """
    重複隨機切分的交叉驗證

    每回合以 train_size 個區域重新擬合整條管線（正規化 + PCA + GLM），
    在訓練集與驗證集上以兩種尺度計算 R²。失敗的回合不計入平均。

    Args:
        refit_features: False 時正規化與 PCA 改在全部區域上擬合一次
        threads: 回合的平行數；結果與執行緒數無關
    """
    selection = selection or ComponentSelection.fixed(DEFAULT_K)
    report = _cross_validate_many(
        matrix, indices, [selection], sessions, train_size, seed, split_mode, refit_features, standardize, threads, regions
    )[0]
    logger.info(
        "[crossval] %d/%d 回合成功，%s，平均: %s",
        len(report.succeeded),
        sessions,
        selection.describe(),
        {m: None if v is None else round(v, 4) for m, v in report.mean_over_indices().items()},
    )
    return report


@dataclass
class SweepResult:
    reports: Dict[int, CrossValReport]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for k, report in sorted(self.reports.items()):
            rows.append({"k": k, "sessions_ok": len(report.succeeded), **report.mean_over_indices()})
        return pd.DataFrame(rows, columns=["k", "sessions_ok", *METRICS])


def component_sweep(
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    k_range: Iterable[int],
    sessions: int = DEFAULT_SESSIONS,
    train_size: int = DEFAULT_TRAIN_SIZE,
    seed: int = DEFAULT_SEED,
    split_mode: SplitMode = "independent",
    refit_features: bool = True,
    standardize: bool = False,
    threads: int = 1,
) -> SweepResult:
    """對每個 k 執行交叉驗證，回傳平均 R² 曲線；各 k 共用同一組切分與特徵擬合"""
    ks = list(k_range)
    if not ks:
        raise ConfigError("k 範圍不可為空")
    for k in ks:
        if k > INDICATOR_COUNT:
            raise ConfigError(f"k={k} 超過主成分總數 {INDICATOR_COUNT}")
    selections = [ComponentSelection.fixed(k) for k in ks]
    reports = _cross_validate_many(
        matrix, indices, selections, sessions, train_size, seed, split_mode, refit_features, standardize, threads, None
    )
    logger.info("[sweep] 完成 k=%d..%d", min(ks), max(ks))
    return SweepResult(dict(zip(ks, reports)))


# ----------------------------------------------------------------- reports


@dataclass
class CorrelationTable:
    frame: pd.DataFrame
    threshold: float = CORRELATION_FLAG

    def flagged(self) -> List[Tuple[str, str, float]]:
        return [
            (component, name, float(self.frame.loc[component, name]))
            for component in self.frame.index
            for name in self.frame.columns
            if abs(self.frame.loc[component, name]) > self.threshold
        ]

    def to_long_frame(self) -> pd.DataFrame:
        long = self.frame.reset_index(names="component").melt(id_vars="component", var_name="index", value_name="r")
        long["flagged"] = long["r"].abs() > self.threshold
        return long


def pc_index_correlations(
    pipeline: TrainedPipeline,
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    regions: Optional[Sequence[str]] = None,
) -> CorrelationTable:
    """主成分分數與正規化官方指數之間的 k × 6 Pearson 相關表"""
    region_ids = list(regions) if regions is not None else pipeline.training_regions
    Z = normalize_matrix(_matrix_rows(matrix, region_ids), pipeline.input_distributions)
    scores = project(pipeline.pca, Z, pipeline.k)
    Y = indices.rows(region_ids)
    Y_norm = np.column_stack(
        [to_quantile(Y[:, j], pipeline.outputs[name].distribution, strict=False) for j, name in enumerate(INDEX_NAMES)]
    )
    frame = correlate(scores, Y_norm, [f"PC{i + 1}" for i in range(pipeline.k)], list(INDEX_NAMES))
    return CorrelationTable(frame)


def fit_summary(
    pipeline: TrainedPipeline,
    matrix: IndicatorMatrix,
    indices: OfficialIndices,
    regions: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """每個區域的觀測值與預測值（原始與正規化尺度）"""
    region_ids = list(regions) if regions is not None else pipeline.training_regions
    normalized, original = predict_rows(pipeline, _matrix_rows(matrix, region_ids))
    Y = indices.rows(region_ids)
    frame = pd.DataFrame({"region_id": region_ids})
    for j, name in enumerate(INDEX_NAMES):
        frame[f"{name}_observed"] = Y[:, j]
        frame[f"{name}_predicted"] = original[:, j]
        frame[f"{name}_observed_norm"] = to_quantile(Y[:, j], pipeline.outputs[name].distribution, strict=False)
        frame[f"{name}_predicted_norm"] = normalized[:, j]
    return frame


def write_crossval_report(report: CrossValReport, out_dir: Path, header: Sequence[str] = ()) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [
        write_table(report.to_frame(), out_dir / "crossval.csv", header),
        write_table(report.splits_frame(), out_dir / "crossval_splits.csv", header),
    ]
    if report.failed:
        paths.append(write_table(report.failures_frame(), out_dir / "crossval_failures.csv", header))
    return paths


def write_sweep(result: SweepResult, path: Path, header: Sequence[str] = ()) -> Path:
    return write_table(result.to_frame(), path, header)


def write_correlations(table: CorrelationTable, path: Path, header: Sequence[str] = ()) -> Path:
    return write_table(table.to_long_frame(), path, header)
