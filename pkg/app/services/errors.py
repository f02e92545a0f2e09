"""
錯誤類型 - 所有服務共用的例外階層
"""
from typing import Iterable


class CardEconError(Exception):
    """所有領域錯誤的基底類別"""


class IngestError(CardEconError):
    """交易資料流無法讀取（致命錯誤）"""


class ConfigError(CardEconError):
    """設定、區域表或合成資料設定不合法"""


class MissingBusinessShareError(CardEconError):
    """外國交易所在區域尚未設定商戶市佔率"""

    def __init__(self, region_id: str):
        super().__init__(
            f"區域 {region_id} 的 business_market_share 未設定，請先執行 compute_business_share"
        )
        self.region_id = region_id


class BusinessShareError(CardEconError):
    """無法計算商戶市佔率（兩個計數皆為零）"""

    def __init__(self, region_ids: Iterable[str]):
        self.region_ids = sorted(region_ids)
        super().__init__(f"以下區域的站內與站外國內交易數皆為零: {', '.join(self.region_ids)}")


class DomainError(CardEconError, ValueError):
    """數值超出函數定義域"""


class InsufficientDataError(CardEconError):
    """樣本數不足"""


class DegenerateDistributionError(CardEconError):
    """樣本完全相同，無法擬合分布"""


class ZeroVarianceError(CardEconError):
    """某欄位變異數為零"""

    def __init__(self, column: str):
        super().__init__(f"欄位 {column} 的變異數為零")
        self.column = column


class DimensionMismatchError(CardEconError, ValueError):
    """矩陣或向量維度不符"""


class DiversityError(CardEconError):
    """類別總量全為零，多樣性未定義"""


class FitError(CardEconError):
    """擬合失敗，附帶指標或指數名稱"""

    def __init__(self, target: str, cause: Exception):
        super().__init__(f"{target}: {cause}")
        self.target = target
        self.cause = cause
