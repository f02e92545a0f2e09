import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# 導入預測路由
from api.v1.predict.endpoints import router as predict_router
from services.errors import CardEconError
from services.pipeline_registry import pipeline_registry
from utils.settings import TOOL_NAME, TOOL_VERSION, load_settings

logger = logging.getLogger(__name__)

app = FastAPI(title="Card Econ API", description="以刷卡交易預測區域社經指數的 API", version=TOOL_VERSION)

# 添加 CORS 中間件
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # 允許所有來源，生產環境應該指定具體域名
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# 註冊預測路由
app.include_router(predict_router, prefix="/api/v1/predict", tags=["預測"])

# 預先載入設定中的管線
_settings = load_settings()
if _settings.pipeline_path:
    try:
        pipeline_registry.load(_settings.pipeline_path)
    except CardEconError as e:
        logger.error("[api] 無法預先載入管線: %s", e)


@app.get("/")
async def read_root():
    return {"service": TOOL_NAME, "version": TOOL_VERSION}


@app.get("/api/health")
async def health():
    return {"status": "ok", "loaded_pipelines": pipeline_registry.count()}
