"""
管線註冊表 - 快取已載入的訓練管線供 API 使用
"""
import logging
import time
from pathlib import Path
from threading import Lock
from typing import Dict, List, Optional

from services.errors import ConfigError
from services.pipeline import TrainedPipeline
from utils.file_monitor import FileMonitor
from utils.settings import load_settings

logger = logging.getLogger(__name__)


class PipelineRegistry:
    """以管線檔內容的 SHA1 為 ID，管理已載入的管線"""

    def __init__(self, session_timeout: int = 3600):  # 1小時未使用即釋放
        self.pipelines: Dict[str, dict] = {}
        self.lock = Lock()
        self.session_timeout = session_timeout

    def load(self, path: Path) -> str:
        """
        載入管線檔；相同內容的檔案只會載入一次

        Args:
            path: 管線 JSON 檔路徑

        Returns:
            pipeline_id（檔案內容的 SHA1）
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"找不到管線檔案: {path}")
        pipeline_id = FileMonitor.calculate_file_hash(path)
        if not pipeline_id:
            raise ConfigError(f"無法讀取管線檔案: {path}")

        with self.lock:
            if pipeline_id in self.pipelines:
                self.pipelines[pipeline_id]["last_access"] = time.time()
                return pipeline_id

        pipeline = TrainedPipeline.load(path)
        with self.lock:
            self.pipelines[pipeline_id] = {
                "pipeline": pipeline,
                "path": str(path),
                "loaded_at": time.time(),
                "last_access": time.time(),
            }
        logger.info("[registry] 已載入管線 %s (%s)", pipeline_id[:10], path.name)
        return pipeline_id

    def get(self, pipeline_id: str) -> Optional[TrainedPipeline]:
        """取得管線並更新存取時間"""
        with self.lock:
            entry = self.pipelines.get(pipeline_id)
            if entry is None:
                return None
            entry["last_access"] = time.time()
            return entry["pipeline"]

    def info(self, pipeline_id: str) -> Optional[dict]:
        with self.lock:
            entry = self.pipelines.get(pipeline_id)
            if entry is None:
                return None
            return {k: v for k, v in entry.items() if k != "pipeline"}

    def cleanup_expired(self) -> int:
        """清理過期的管線"""
        current_time = time.time()
        with self.lock:
            expired = [
                pid for pid, entry in self.pipelines.items()
                if current_time - entry["last_access"] > self.session_timeout
            ]
            for pid in expired:
                del self.pipelines[pid]
        if expired:
            logger.info("[registry] 清除 %d 個過期管線", len(expired))
        return len(expired)

    def count(self) -> int:
        with self.lock:
            return len(self.pipelines)

    def ids(self) -> List[str]:
        with self.lock:
            return sorted(self.pipelines)

    def delete(self, pipeline_id: str) -> bool:
        """刪除指定管線"""
        with self.lock:
            if pipeline_id in self.pipelines:
                del self.pipelines[pipeline_id]
                return True
            return False


# 全域管線註冊表實例
pipeline_registry = PipelineRegistry(load_settings().session_timeout)
