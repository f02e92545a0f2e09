"""
預測 API 端點
"""
from typing import Dict, List, Optional

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from services.errors import CardEconError
from services.indicators import INDICATOR_COLUMNS
from services.pipeline import INDEX_NAMES, predict_rows
from services.pipeline_registry import pipeline_registry


router = APIRouter()


class LoadPipelineRequest(BaseModel):
    path: str


class PipelineResponse(BaseModel):
    pipeline_id: str
    indices: List[str]
    k: int
    training_regions: int
    message: str


class IndicatorRow(BaseModel):
    region_id: str
    indicators: Dict[str, float]


class PredictRequest(BaseModel):
    pipeline_id: str
    rows: List[IndicatorRow]


class RegionPrediction(BaseModel):
    region_id: str
    normalized: Optional[Dict[str, float]] = None
    original: Optional[Dict[str, float]] = None
    error: Optional[str] = None


class PredictResponse(BaseModel):
    pipeline_id: str
    predictions: List[RegionPrediction]


@router.post("/pipelines", response_model=PipelineResponse)
async def load_pipeline(request: LoadPipelineRequest):
    """載入訓練好的管線檔"""
    try:
        pipeline_id = pipeline_registry.load(request.path)
    except CardEconError as e:
        raise HTTPException(status_code=400, detail=str(e))

    pipeline = pipeline_registry.get(pipeline_id)
    return PipelineResponse(
        pipeline_id=pipeline_id,
        indices=list(INDEX_NAMES),
        k=pipeline.k,
        training_regions=len(pipeline.training_regions),
        message="管線已載入",
    )


@router.get("/pipelines")
async def get_pipeline_info():
    """獲取已載入管線的統計信息"""
    # 清理過期管線
    cleaned = pipeline_registry.cleanup_expired()
    return {
        "loaded_pipelines": pipeline_registry.count(),
        "pipeline_ids": pipeline_registry.ids(),
        "cleaned_pipelines": cleaned,
    }


@router.delete("/pipelines/{pipeline_id}")
async def delete_pipeline(pipeline_id: str):
    """卸載指定管線"""
    deleted = pipeline_registry.delete(pipeline_id)
    return {
        "deleted": deleted,
        "message": "管線已卸載" if deleted else "管線不存在",
    }


@router.post("/", response_model=PredictResponse)
async def predict(request: PredictRequest):
    """
    預測六個官方指數

    缺少指標的列只回報該區域的錯誤，其餘區域照常預測。
    """
    pipeline = pipeline_registry.get(request.pipeline_id)
    if pipeline is None:
        raise HTTPException(status_code=404, detail=f"管線不存在: {request.pipeline_id}")

    predictions: List[RegionPrediction] = []
    valid_rows = []
    for row in request.rows:
        missing = [c for c in INDICATOR_COLUMNS if c not in row.indicators]
        if missing:
            predictions.append(RegionPrediction(region_id=row.region_id, error=f"缺少 {len(missing)} 個指標: {missing[0]} 等"))
            continue
        values = [row.indicators[c] for c in INDICATOR_COLUMNS]
        if not np.all(np.isfinite(values)):
            predictions.append(RegionPrediction(region_id=row.region_id, error="指標含有非有限值"))
            continue
        predictions.append(RegionPrediction(region_id=row.region_id))
        valid_rows.append((len(predictions) - 1, values))

    if valid_rows:
        try:
            normalized, original = predict_rows(pipeline, np.array([values for _, values in valid_rows]))
        except CardEconError as e:
            raise HTTPException(status_code=400, detail=str(e))
        for (slot, _), norm_row, orig_row in zip(valid_rows, normalized, original):
            predictions[slot] = RegionPrediction(
                region_id=predictions[slot].region_id,
                normalized=dict(zip(INDEX_NAMES, map(float, norm_row))),
                original=dict(zip(INDEX_NAMES, map(float, orig_row))),
            )

    return PredictResponse(pipeline_id=request.pipeline_id, predictions=predictions)
