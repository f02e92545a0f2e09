"""
分隔文字表格讀寫：表頭註解 + CSV 內容
"""
from pathlib import Path
from typing import Sequence

import pandas as pd


def write_table(frame: pd.DataFrame, path: Path, header: Sequence[str] = ()) -> Path:
    """
    寫出 CSV，前面加上 '#' 開頭的來源註解

    Args:
        frame: 要寫出的表格
        path: 輸出路徑
        header: 註解行（已含 '# ' 前綴）

    Returns:
        輸出路徑
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for line in header:
            f.write(line.rstrip("\n") + "\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    return path


def read_table(path: Path, **kwargs) -> pd.DataFrame:
    """讀取 write_table 的輸出（忽略註解行）"""
    kwargs.setdefault("float_precision", "round_trip")
    return pd.read_csv(path, comment="#", **kwargs)
