# utils/exceptions.py

from typing import Optional, Sequence


class AuditError(Exception):
    """所有歧視稽核流程錯誤的共同基底類別。"""
    pass

class SchemaValidationError(AuditError):
    """當資料集 schema 宣告不合法（重名、缺少欄位角色）時拋出的自訂例外。"""
    pass

class DataLoadError(AuditError):
    """當 CSV 載入或儲存格解析失敗時拋出的自訂例外，會標示出錯的列與欄。"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column

class UnknownAttributeError(AuditError):
    """當查詢的受保護屬性名稱不在 schema 中時拋出的自訂例外。"""
    pass

class UndefinedRateError(AuditError):
    """當比率的分母為零（例如某一群組為空）時拋出的自訂例外。"""
    pass

class ScmSpecError(AuditError):
    """當結構因果模型 (SCM) 規格文件不合法時拋出的自訂例外。"""
    pass

class CyclicGraphError(ScmSpecError):
    """當 SCM 的父節點圖存在環時拋出，`cycle` 紀錄其中一個環。"""

    def __init__(self, message: str, cycle: Sequence[str] = ()):
        super().__init__(message)
        self.cycle = list(cycle)

class SingularFitError(AuditError):
    """當迴歸設計矩陣秩不足（例如父節點為常數）時拋出的自訂例外。"""
    pass

class LogLinkDomainError(AuditError):
    """當 log 連結節點出現非正值時拋出的自訂例外。"""
    pass

class InterventionError(AuditError):
    """當 do-介入的目標節點不存在或數值超出定義域時拋出的自訂例外。"""
    pass

class MissingNoiseError(AuditError):
    """當雜訊表缺少所需的 (列, 節點) 項目時拋出的自訂例外。"""
    pass

class ClassifierError(AuditError):
    """當分類器 b() 找不到所需特徵或設定不合法時拋出的自訂例外。"""
    pass

class DistanceError(AuditError):
    """當距離計算遇到全距為零但數值不同的特徵時拋出的自訂例外。"""
    pass

class EmptySearchSpaceError(AuditError):
    """當 k-NN 搜尋空間為空時拋出的自訂例外。"""
    pass

class MissingCounterfactualError(AuditError):
    """當申訴人沒有對應的反事實紀錄，或反事實資料集與屬性不一致時拋出的自訂例外。"""
    pass

class InvalidParameterError(AuditError):
    """當執行參數（k、alpha、tau 等）不合法時拋出的自訂例外。"""
    pass

class ManifestError(AuditError):
    """當執行清單 (manifest) 無法讀取或驗證失敗時拋出的自訂例外。"""
    pass
