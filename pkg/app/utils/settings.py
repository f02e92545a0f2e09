"""
執行設定 - 從 .env 與環境變數載入，並設定日誌
"""
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

TOOL_NAME = "card-econ"
TOOL_VERSION = "1.0.0"

BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = BASE_DIR / "data"
DEFAULT_BUNDLE_MAP = DATA_DIR / "category_bundles.csv"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings(BaseModel):
    """環境層級的預設值，CLI 旗標可覆寫"""

    log_level: str = "INFO"
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    seed: int = 2011
    bundle_map: Path = DEFAULT_BUNDLE_MAP
    pipeline_path: Optional[Path] = None
    session_timeout: int = Field(default=3600, gt=0)


def load_settings(env_file: Optional[Path] = None) -> Settings:
    """
    載入環境變數（CARD_ECON_*）並建立設定

    Args:
        env_file: 指定的 .env 檔，預設由 python-dotenv 自動搜尋

    Returns:
        Settings 實例
    """
    load_dotenv(env_file)
    values = {}
    for field in Settings.model_fields:
        raw = os.getenv(f"CARD_ECON_{field.upper()}")
        if raw not in (None, ""):
            values[field] = raw
    return Settings(**values)


def setup_logging(level: str = "INFO") -> None:
    """設定根日誌：單一 stderr handler"""
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if getattr(handler, "_card_econ", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler._card_econ = True
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())
