"""
命令列介面
子命令對應管線的各階段：ingest → train / crossval / sweep → predict / report，另有 synth 與 serve
"""
import functools
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Literal, NoReturn, Optional, Tuple

import click
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from services.decompose import ComponentSelection, loadings_table, variance_curve
from services.errors import CardEconError, ConfigError, IngestError
from services.indicators import INDICATOR_COLUMNS, compute_indicators, load_category_bundles, read_indicator_matrix
from services.ingest import DEFAULT_CHUNK_ROWS, ingest_file
from services.aggregates import load_region_table
from services.pipeline import (
    DEFAULT_K,
    DEFAULT_SESSIONS,
    DEFAULT_TRAIN_SIZE,
    TrainedPipeline,
    component_sweep,
    cross_validate,
    fit_summary,
    load_official_indices,
    pc_index_correlations,
    predict,
    train,
    write_correlations,
    write_crossval_report,
    write_sweep,
)
from services.synthgen import generate, load_synth_config, make_config, noise_for_target_r2, plant, write_corpus
from utils.file_monitor import FileMonitor
from utils.settings import TOOL_NAME, TOOL_VERSION, Settings, load_settings, setup_logging
from utils.tables import write_table

logger = logging.getLogger(__name__)

INPUT_FIELDS = ("transactions", "regions", "indices", "matrix", "pipeline", "bundles", "synth_config")
# 不影響輸出內容的欄位不列入 config hash
UNHASHED_FIELDS = ("output", "output_dir", "threads", "log_level")


class RunConfig(BaseModel):
    """一次命令執行的完整設定"""

    model_config = ConfigDict(frozen=True)

    command: str
    transactions: Optional[Path] = None
    regions: Optional[Path] = None
    indices: Optional[Path] = None
    matrix: Optional[Path] = None
    pipeline: Optional[Path] = None
    bundles: Optional[Path] = None
    synth_config: Optional[Path] = None
    output: Optional[Path] = None
    output_dir: Optional[Path] = None

    k: Optional[int] = Field(default=None, ge=1)
    variance: Optional[float] = Field(default=None, gt=0, le=1)
    sessions: int = Field(default=DEFAULT_SESSIONS, ge=1)
    train_size: int = Field(default=DEFAULT_TRAIN_SIZE, ge=2)
    split_mode: Literal["independent", "partition"] = "independent"
    refit_features: bool = True
    standardize: bool = False
    k_min: int = Field(default=1, ge=1)
    k_max: int = Field(default=16, ge=1, le=len(INDICATOR_COLUMNS))
    region_ids: Tuple[str, ...] = ()
    chunk_rows: int = Field(default=DEFAULT_CHUNK_ROWS, ge=1)

    region_count: Optional[int] = Field(default=None, ge=3)
    transactions_total: Optional[int] = Field(default=None, ge=0)
    noise_sd: Optional[float] = Field(default=None, ge=0)
    target_r2: Optional[float] = Field(default=None, gt=0, le=1)
    factors: Optional[int] = Field(default=None, ge=1)
    nonlinearity: Optional[float] = None
    index_basis: Optional[Literal["features", "factors"]] = None

    seed: int
    threads: int = Field(ge=1)
    log_level: str = "INFO"

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.k is not None and self.variance is not None:
            raise ValueError("--k 與 --variance 只能擇一")
        if self.k_min > self.k_max:
            raise ValueError("--k-min 不可大於 --k-max")
        if self.noise_sd is not None and self.target_r2 is not None:
            raise ValueError("--noise-sd 與 --target-r2 只能擇一")
        return self

    def selection(self) -> ComponentSelection:
        if self.variance is not None:
            return ComponentSelection.variance(self.variance)
        return ComponentSelection.fixed(self.k or DEFAULT_K)

    def require(self, *names: str) -> None:
        """檢查此命令需要的輸入檔都已指定且存在"""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"缺少必要參數 --{name.replace('_', '-')}")
            if name in INPUT_FIELDS and not Path(value).is_file():
                raise ConfigError(f"找不到檔案: {value}")

    def config_hash(self) -> str:
        """SHA1(正規化 JSON)，路徑只保留檔名"""
        data = self.model_dump(mode="json", exclude=set(UNHASHED_FIELDS))
        for name in INPUT_FIELDS:
            if data.get(name):
                data[name] = Path(data[name]).name
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canonical.encode("utf-8")).hexdigest()

    def inputs(self) -> List[Path]:
        return [getattr(self, name) for name in INPUT_FIELDS if getattr(self, name) is not None]

    def header(self) -> List[str]:
        return FileMonitor(self.inputs()).header_lines(self.seed, self.config_hash())


def _fail(error: Exception, exit_code: int) -> NoReturn:
    payload = {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}
    click.echo(json.dumps(payload, ensure_ascii=False), err=True)
    sys.exit(exit_code)


def handle_errors(func):
    """把領域錯誤轉為結束碼與 stderr 上的 JSON 錯誤摘要"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except IngestError as e:
            logger.error("[cli] %s", e)
            _fail(e, 1)
        except CardEconError as e:
            logger.error("[cli] %s", e)
            _fail(e, 2)
        except OSError as e:
            logger.error("[cli] %s", e)
            _fail(e, 2)

    return wrapper


def build_config(ctx: click.Context, command: str, **options) -> RunConfig:
    settings: Settings = ctx.obj
    values = {k: v for k, v in options.items() if v is not None}
    values.setdefault("seed", settings.seed)
    values.setdefault("threads", settings.threads)
    values["log_level"] = settings.log_level
    try:
        config = RunConfig(command=command, **values)
    except ValidationError as e:
        raise ConfigError(f"參數不合法: {e}") from e
    logger.info("[cli] %s seed=%d config=%s", command, config.seed, config.config_hash()[:10])
    return config


def _echo_json(data: dict) -> None:
    click.echo(json.dumps(data, ensure_ascii=False, sort_keys=True))


path_option = functools.partial(click.option, type=click.Path(path_type=Path))
seed_option = click.option("--seed", type=int, default=None, help="隨機種子（預設取 CARD_ECON_SEED）")
threads_option = click.option("--threads", type=int, default=None, help="執行緒數（預設為 CPU 數）")
k_option = click.option("--k", type=int, default=None, help=f"固定主成分數（預設 {DEFAULT_K}）")
variance_option = click.option("--variance", type=float, default=None, help="改以累積解釋變異門檻 τ 選擇主成分數")
standardize_option = click.option("--standardize", is_flag=True, default=False, help="PCA 前先標準化各欄")


@click.group()
@click.version_option(TOOL_VERSION, prog_name=TOOL_NAME)
@click.option("--log-level", default=None, help="日誌等級（預設取 CARD_ECON_LOG_LEVEL）")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str]):
    """以刷卡交易資料預測區域社經指數"""
    settings = load_settings()
    if log_level:
        settings = settings.model_copy(update={"log_level": log_level})
    setup_logging(settings.log_level)
    ctx.obj = settings


@cli.command("ingest")
@path_option("--transactions", required=True, help="交易 CSV")
@path_option("--regions", required=True, help="區域表 CSV")
@path_option("--output", required=True, help="輸出的指標矩陣 CSV")
@path_option("--bundles", default=None, help="類別→組合對照表")
@click.option("--chunk-rows", type=int, default=None, help="串流讀取的區塊列數")
@threads_option
@seed_option
@click.pass_context
@handle_errors
def cmd_ingest(ctx, transactions, regions, output, bundles, chunk_rows, threads, seed):
    """解析、去偏、聚合交易並計算 35 個指標"""
    config = build_config(
        ctx, "ingest", transactions=transactions, regions=regions, output=output,
        bundles=bundles or ctx.obj.bundle_map, chunk_rows=chunk_rows, threads=threads, seed=seed,
    )
    config.require("regions", "transactions", "bundles")
    region_table = load_region_table(config.regions)
    bundle_map = load_category_bundles(config.bundles)
    result = ingest_file(config.transactions, region_table, threads=config.threads, chunk_rows=config.chunk_rows)
    matrix = compute_indicators(result.aggregates, result.merchants, result.regions, bundle_map)

    header = config.header()
    matrix.write(config.output, header)
    summary_path = config.output.with_name(f"{config.output.stem}_aggregates.csv")
    write_table(result.summary_frame(), summary_path, header)
    _echo_json(
        {
            "rows_read": result.report.rows_read,
            "accepted": result.report.accepted,
            "rejected": result.report.to_dict(),
            "throughput_rows_per_s": round(result.throughput, 1),
            "regions": len(matrix.region_ids),
            "warnings": len(matrix.warnings),
            "matrix": str(config.output),
            "summary": str(summary_path),
        }
    )


@cli.command("train")
@path_option("--matrix", required=True, help="指標矩陣 CSV")
@path_option("--indices", required=True, help="官方指數 CSV")
@path_option("--output", required=True, help="輸出的管線 JSON")
@click.option("--region", "region_ids", multiple=True, help="只用這些區域訓練（可重複）")
@k_option
@variance_option
@standardize_option
@seed_option
@click.pass_context
@handle_errors
def cmd_train(ctx, matrix, indices, output, region_ids, k, variance, standardize, seed):
    """在指定區域上訓練完整管線"""
    config = build_config(
        ctx, "train", matrix=matrix, indices=indices, output=output, region_ids=region_ids,
        k=k, variance=variance, standardize=standardize, seed=seed,
    )
    config.require("matrix", "indices")
    indicator_matrix = read_indicator_matrix(config.matrix)
    official = load_official_indices(config.indices)
    regions = list(config.region_ids) or [rid for rid in indicator_matrix.region_ids if rid in official]
    pipeline = train(
        indicator_matrix, official, regions, config.selection(), seed=config.seed, standardize=config.standardize
    )
    pipeline = pipeline.with_provenance(FileMonitor(config.inputs()).provenance(config.seed, config.config_hash()))
    pipeline.save(config.output)
    _echo_json({"pipeline": str(config.output), "k": pipeline.k, "training_regions": len(regions)})


@cli.command("predict")
@path_option("--pipeline", required=True, help="訓練好的管線 JSON")
@path_option("--matrix", required=True, help="指標矩陣 CSV")
@path_option("--output", required=True, help="輸出的預測 CSV")
@click.option("--region", "region_ids", multiple=True, help="只預測這些區域（可重複）")
@seed_option
@click.pass_context
@handle_errors
def cmd_predict(ctx, pipeline, matrix, output, region_ids, seed):
    """以訓練好的管線預測六個官方指數"""
    config = build_config(
        ctx, "predict", pipeline=pipeline, matrix=matrix, output=output, region_ids=region_ids, seed=seed
    )
    config.require("pipeline", "matrix")
    trained = TrainedPipeline.load(config.pipeline)
    indicator_matrix = read_indicator_matrix(config.matrix)
    prediction = predict(trained, indicator_matrix, list(config.region_ids) or None)
    write_table(prediction.to_frame(), config.output, config.header())
    _echo_json({"predicted": len(prediction.region_ids), "errors": prediction.errors, "output": str(config.output)})


def _crossval_options(func):
    for option in reversed(
        [
            click.option("--sessions", type=int, default=None, help=f"訓練回合數（預設 {DEFAULT_SESSIONS}）"),
            click.option("--train-size", type=int, default=None, help=f"每回合訓練區域數（預設 {DEFAULT_TRAIN_SIZE}）"),
            click.option("--split-mode", type=click.Choice(["independent", "partition"]), default=None),
            click.option("--global-features", is_flag=True, default=False, help="正規化與 PCA 只在全部區域上擬合一次"),
            standardize_option,
            threads_option,
            seed_option,
        ]
    ):
        func = option(func)
    return func


@cli.command("crossval")
@path_option("--matrix", required=True, help="指標矩陣 CSV")
@path_option("--indices", required=True, help="官方指數 CSV")
@path_option("--output-dir", required=True, help="報表輸出目錄")
@k_option
@variance_option
@_crossval_options
@click.pass_context
@handle_errors
def cmd_crossval(ctx, matrix, indices, output_dir, k, variance, sessions, train_size, split_mode,
                 global_features, standardize, threads, seed):
    """重複隨機切分的交叉驗證"""
    config = build_config(
        ctx, "crossval", matrix=matrix, indices=indices, output_dir=output_dir, k=k, variance=variance,
        sessions=sessions, train_size=train_size, split_mode=split_mode, refit_features=not global_features,
        standardize=standardize, threads=threads, seed=seed,
    )
    config.require("matrix", "indices")
    report = cross_validate(
        read_indicator_matrix(config.matrix),
        load_official_indices(config.indices),
        sessions=config.sessions,
        train_size=config.train_size,
        seed=config.seed,
        selection=config.selection(),
        split_mode=config.split_mode,
        refit_features=config.refit_features,
        standardize=config.standardize,
        threads=config.threads,
    )
    paths = write_crossval_report(report, config.output_dir, config.header())
    _echo_json(
        {
            "sessions_ok": len(report.succeeded),
            "sessions_failed": len(report.failed),
            "mean": report.mean_over_indices(),
            "files": [str(p) for p in paths],
        }
    )


@cli.command("sweep")
@path_option("--matrix", required=True, help="指標矩陣 CSV")
@path_option("--indices", required=True, help="官方指數 CSV")
@path_option("--output", required=True, help="輸出的 k 曲線 CSV")
@click.option("--k-min", type=int, default=None, help="最小主成分數（預設 1）")
@click.option("--k-max", type=int, default=None, help="最大主成分數（預設 16）")
@_crossval_options
@click.pass_context
@handle_errors
def cmd_sweep(ctx, matrix, indices, output, k_min, k_max, sessions, train_size, split_mode,
              global_features, standardize, threads, seed):
    """對一段 k 範圍做交叉驗證，輸出平均 R² 曲線"""
    config = build_config(
        ctx, "sweep", matrix=matrix, indices=indices, output=output, k_min=k_min, k_max=k_max,
        sessions=sessions, train_size=train_size, split_mode=split_mode, refit_features=not global_features,
        standardize=standardize, threads=threads, seed=seed,
    )
    config.require("matrix", "indices")
    result = component_sweep(
        read_indicator_matrix(config.matrix),
        load_official_indices(config.indices),
        range(config.k_min, config.k_max + 1),
        sessions=config.sessions,
        train_size=config.train_size,
        seed=config.seed,
        split_mode=config.split_mode,
        refit_features=config.refit_features,
        standardize=config.standardize,
        threads=config.threads,
    )
    write_sweep(result, config.output, config.header())
    _echo_json({"rows": len(result.reports), "output": str(config.output)})


@cli.command("synth")
@path_option("--output-dir", required=True, help="輸出目錄")
@path_option("--config", "synth_config", default=None, help="合成資料設定 JSON")
@click.option("--region-count", type=int, default=None, help="區域數（預設 52）")
@click.option("--transactions", "transactions_total", type=int, default=None, help="交易總數")
@click.option("--noise-sd", type=float, default=None, help="所有指數共用的雜訊標準差")
@click.option("--target-r2", type=float, default=None, help="依理論 R² 自動校準雜訊")
@click.option("--factors", type=int, default=None, help="潛在因子數")
@click.option("--nonlinearity", type=float, default=None, help="指數線性預測子的平方項係數")
@click.option(
    "--index-basis",
    type=click.Choice(["features", "factors"]),
    default=None,
    help="官方指數植入在指標主成分（預設）或潛在因子上",
)
@threads_option
@seed_option
@click.pass_context
@handle_errors
def cmd_synth(ctx, output_dir, synth_config, region_count, transactions_total, noise_sd, target_r2,
              factors, nonlinearity, index_basis, threads, seed):
    """產生含植入訊號的合成語料"""
    config = build_config(
        ctx, "synth", output_dir=output_dir, synth_config=synth_config, region_count=region_count,
        transactions_total=transactions_total, noise_sd=noise_sd, target_r2=target_r2, factors=factors,
        nonlinearity=nonlinearity, index_basis=index_basis, threads=threads, seed=seed,
    )
    if config.synth_config is not None:
        config.require("synth_config")
    overrides = {
        "region_count": config.region_count,
        "transactions_total": config.transactions_total,
        "noise_sd": config.noise_sd,
        "latent_factor_count": config.factors,
        "nonlinearity": config.nonlinearity,
        "index_basis": config.index_basis,
        "seed": config.seed,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    synth = load_synth_config(config.synth_config, **overrides) if config.synth_config else make_config(**overrides)
    if config.target_r2 is not None:
        synth = make_config(synth.model_dump(), noise_sd=noise_for_target_r2(plant(synth), config.target_r2))

    corpus = generate(synth, threads=config.threads)
    paths = write_corpus(corpus, config.output_dir, config.header())
    _echo_json(
        {
            "transactions": len(corpus.transactions),
            "regions": len(corpus.regions),
            "noise_sd": corpus.ground_truth.noise_sd,
            "index_basis": corpus.ground_truth.index_basis,
            "files": {k: str(v) for k, v in paths.items()},
        }
    )


@cli.command("report")
@path_option("--pipeline", required=True, help="訓練好的管線 JSON")
@path_option("--matrix", required=True, help="指標矩陣 CSV")
@path_option("--indices", required=True, help="官方指數 CSV")
@path_option("--output-dir", required=True, help="報表輸出目錄")
@seed_option
@click.pass_context
@handle_errors
def cmd_report(ctx, pipeline, matrix, indices, output_dir, seed):
    """輸出變異曲線、載荷、主成分與指數相關表，以及全樣本觀測/預測對照"""
    config = build_config(
        ctx, "report", pipeline=pipeline, matrix=matrix, indices=indices, output_dir=output_dir, seed=seed
    )
    config.require("pipeline", "matrix", "indices")
    trained = TrainedPipeline.load(config.pipeline)
    indicator_matrix = read_indicator_matrix(config.matrix)
    official = load_official_indices(config.indices)
    header = config.header()
    out = config.output_dir

    correlations = pc_index_correlations(trained, indicator_matrix, official)
    paths = [
        write_table(variance_curve(trained.pca), out / "variance_curve.csv", header),
        write_table(loadings_table(trained.pca, trained.indicator_columns), out / "loadings.csv", header),
        write_correlations(correlations, out / "pc_index_correlations.csv", header),
        write_table(fit_summary(trained, indicator_matrix, official), out / "fit_summary.csv", header),
    ]
    _echo_json({"flagged": len(correlations.flagged()), "files": [str(p) for p in paths]})


@cli.command("serve")
@click.option("--host", default="127.0.0.1", help="綁定位址")
@click.option("--port", type=int, default=8000, help="連接埠")
def cmd_serve(host: str, port: int):
    """啟動預測 API 服務"""
    import uvicorn

    uvicorn.run("main:app", host=host, port=port)


if __name__ == "__main__":
    cli()
