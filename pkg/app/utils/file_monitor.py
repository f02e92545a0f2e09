"""
輸入檔案追蹤
計算輸入檔案的內容 hash，寫入每個輸出檔的表頭，讓相同輸入可重現相同輸出
"""
import hashlib
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from utils.settings import TOOL_NAME, TOOL_VERSION

logger = logging.getLogger(__name__)


class FileMonitor:
    """記錄一組輸入檔的內容 hash"""

    def __init__(self, files: Iterable[Path] = ()):
        """
        初始化檔案監控器

        Args:
            files: 要追蹤的輸入檔案（不存在的檔案會被略過）
        """
        self.files = sorted({Path(f) for f in files if f is not None}, key=lambda p: p.name)

    @staticmethod
    def calculate_file_hash(file_path: Path) -> str:
        """
        計算單一檔案的 SHA1 hash 值

        Args:
            file_path: 檔案路徑

        Returns:
            檔案的 hash 值字串，無法讀取時回傳空字串
        """
        hash_obj = hashlib.sha1()
        try:
            # 分塊讀取大檔案
            with open(file_path, "rb") as file:
                for chunk in iter(lambda: file.read(1 << 20), b""):
                    hash_obj.update(chunk)
            return hash_obj.hexdigest()
        except (IOError, OSError) as e:
            logger.error("[hash] 無法讀取檔案 %s: %s", file_path, e)
            return ""

    def scan(self) -> Dict[str, str]:
        """
        取得所有追蹤檔案的 hash，以檔名為 key（不含目錄，避免路徑影響輸出）

        Returns:
            檔名對應 hash 值的字典
        """
        hashes = {}
        for file_path in self.files:
            if not file_path.is_file():
                continue
            file_hash = self.calculate_file_hash(file_path)
            if file_hash:
                hashes[file_path.name] = file_hash
                logger.debug("[hash] %s -> %s...", file_path.name, file_hash[:10])
        return hashes

    def provenance(self, seed: Optional[int] = None, config_hash: Optional[str] = None) -> Dict[str, str]:
        """輸出檔要嵌入的來源資訊"""
        info = {"tool": TOOL_NAME, "version": TOOL_VERSION}
        if seed is not None:
            info["seed"] = str(seed)
        if config_hash is not None:
            info["config_hash"] = config_hash
        for name, file_hash in self.scan().items():
            info[f"input:{name}"] = file_hash
        return info

    def header_lines(self, seed: Optional[int] = None, config_hash: Optional[str] = None) -> List[str]:
        """以 '# key=value' 形式排列的表頭註解"""
        return [f"# {key}={value}" for key, value in self.provenance(seed, config_hash).items()]
