# services/dataset_service.py

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from utils.exceptions import (
    DataLoadError,
    SchemaValidationError,
    UndefinedRateError,
    UnknownAttributeError,
)

logger = logging.getLogger(__name__)

FeatureKind = Literal["continuous", "ordinal", "interval", "categorical"]
NUMERIC_KINDS = ("continuous", "ordinal", "interval")
INTERSECTION_SEPARATOR = "_x_"


class FeatureSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    kind: FeatureKind = "continuous"
    # 類別特徵作為 SCM 父節點時的虛擬編碼參考水準
    reference: Optional[str] = None


class ProtectedSpec(BaseModel):
    """受保護屬性：來源標籤 `protected_value` 編碼為 1，`non_protected_value` 編碼為 0。"""
    model_config = ConfigDict(frozen=True)

    name: str
    protected_value: str = "1"
    non_protected_value: str = "0"


class Schema(BaseModel):
    """
    資料集的欄位角色宣告：特徵 X、受保護屬性 A 與二元決策 Ŷ。
    """
    model_config = ConfigDict(frozen=True)

    features: Tuple[FeatureSpec, ...]
    protected: Tuple[ProtectedSpec, ...]
    decision: str

    @model_validator(mode="after")
    def _check_roles(self) -> "Schema":
        if not self.features:
            raise ValueError("schema 至少需要一個特徵")
        if not self.protected:
            raise ValueError("schema 至少需要一個受保護屬性")
        names = [f.name for f in self.features] + [p.name for p in self.protected] + [self.decision]
        duplicated = sorted({n for n in names if names.count(n) > 1})
        if duplicated:
            raise ValueError(f"欄位名稱重複: {duplicated}")
        for p in self.protected:
            if p.protected_value == p.non_protected_value:
                raise ValueError(f"受保護屬性 '{p.name}' 的兩個來源標籤相同")
        return self

    @classmethod
    def parse(cls, document: dict) -> "Schema":
        try:
            return cls.model_validate(document)
        except ValidationError as e:
            raise SchemaValidationError(f"schema 驗證失敗: {e}") from e

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def protected_names(self) -> List[str]:
        return [p.name for p in self.protected]

    @property
    def numeric_features(self) -> List[str]:
        return [f.name for f in self.features if f.kind in NUMERIC_KINDS]

    @property
    def categorical_features(self) -> List[str]:
        return [f.name for f in self.features if f.kind == "categorical"]

    @property
    def columns(self) -> List[str]:
        return self.feature_names + self.protected_names + [self.decision]

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaValidationError(f"schema 中沒有特徵 '{name}'")

    def protected_spec(self, name: str) -> ProtectedSpec:
        for p in self.protected:
            if p.name == name:
                return p
        raise UnknownAttributeError(f"未知的受保護屬性 '{name}'，可用的有 {self.protected_names}")

    def with_protected(self, spec: ProtectedSpec) -> "Schema":
        return Schema(features=self.features, protected=self.protected + (spec,), decision=self.decision)


@dataclass(frozen=True)
class Record:
    id: int
    x: Tuple
    a: Dict[str, int]
    y_hat: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    不可變的決策資料集 (x_i, a_i, ŷ_i)。
    `frame` 的索引即穩定的列編號；正規化統計量是在完整的事實資料上計算的 (min, max)。
    """
    schema: Schema
    frame: pd.DataFrame
    normalization_stats: Dict[str, Tuple[float, float]]

    @classmethod
    def from_frame(cls, schema: Schema, frame: pd.DataFrame) -> "Dataset":
        """從已編碼的 DataFrame（受保護屬性與決策為 0/1）建立並驗證資料集。"""
        missing = [c for c in schema.columns if c not in frame.columns]
        if missing:
            raise DataLoadError(f"資料缺少欄位: {missing}", column=missing[0])

        data = {}
        for f in schema.features:
            col = frame[f.name]
            if f.kind == "categorical":
                values = col.astype(str)
                bad = col.isna().to_numpy()
            else:
                values = pd.to_numeric(col, errors="coerce").astype(float)
                bad = values.isna().to_numpy()
            _reject_bad_cells(bad, f.name)
            data[f.name] = values.to_numpy()
        for name in schema.protected_names + [schema.decision]:
            values = pd.to_numeric(frame[name], errors="coerce")
            _reject_bad_cells(~values.isin([0, 1]).to_numpy(), name)
            data[name] = values.astype(np.int64).to_numpy()

        clean = pd.DataFrame(data, columns=schema.columns)
        clean.index = pd.RangeIndex(len(clean), name="row_id")
        return cls(schema=schema, frame=clean, normalization_stats=_min_max_stats(schema, clean))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def row_ids(self) -> np.ndarray:
        return self.frame.index.to_numpy()

    @property
    def features(self) -> pd.DataFrame:
        return self.frame[self.schema.feature_names]

    @property
    def decisions(self) -> pd.Series:
        return self.frame[self.schema.decision]

    def protected_column(self, attr: str) -> pd.Series:
        self.schema.protected_spec(attr)
        return self.frame[attr]

    def record(self, row_id: int) -> Record:
        row = self.frame.loc[row_id]
        return Record(
            id=int(row_id),
            x=tuple(row[self.schema.feature_names]),
            a={p: int(row[p]) for p in self.schema.protected_names},
            y_hat=int(row[self.schema.decision]),
        )

    def records(self) -> Iterator[Record]:
        for row_id in self.frame.index:
            yield self.record(row_id)

    def to_csv(self, path: str, delimiter: str = ",") -> None:
        """以來源標籤寫回 CSV，使 load_dataset 可以原樣讀回。"""
        out = self.frame.copy()
        for p in self.schema.protected:
            out[p.name] = out[p.name].map({1: p.protected_value, 0: p.non_protected_value})
        out.to_csv(path, sep=delimiter, index=False, encoding="utf-8")


def _reject_bad_cells(bad: np.ndarray, column: str) -> None:
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataLoadError(f"第 {row} 列（檔案第 {row + 2} 行）欄位 '{column}' 的值無法解析", row=row, column=column)


def _min_max_stats(schema: Schema, frame: pd.DataFrame) -> Dict[str, Tuple[float, float]]:
    if frame.empty:
        return {}
    return {name: (float(frame[name].min()), float(frame[name].max())) for name in schema.numeric_features}


def load_dataset(path: str, schema: Schema, delimiter: str = ",") -> Dataset:
    """
    讀取 UTF-8 CSV 並依 schema 驗證。缺值、非二元的受保護屬性或決策值一律拒絕。

    Raises:
        DataLoadError: 檔案不存在、缺少欄位或儲存格無法解析（標示列與欄）。
    """
    logger.info(f"--- [Dataset] 正在載入 {path} ---")
    try:
        raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise DataLoadError(f"找不到資料檔案: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DataLoadError(f"資料檔案 {path} 沒有表頭列") from e

    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in schema.columns if c not in raw.columns]
    if missing:
        raise DataLoadError(f"檔案 {path} 缺少欄位: {missing}", column=missing[0])

    coded = {}
    for f in schema.features:
        col = raw[f.name].str.strip()
        if f.kind == "categorical":
            _reject_bad_cells((col == "").to_numpy(), f.name)
            coded[f.name] = col
        else:
            values = pd.to_numeric(col, errors="coerce")
            _reject_bad_cells(values.isna().to_numpy(), f.name)
            coded[f.name] = values
    for p in schema.protected:
        values = raw[p.name].str.strip().map({p.protected_value: 1, p.non_protected_value: 0})
        _reject_bad_cells(values.isna().to_numpy(), p.name)
        coded[p.name] = values
    decision = pd.to_numeric(raw[schema.decision].str.strip(), errors="coerce")
    _reject_bad_cells(~decision.isin([0, 1]).to_numpy(), schema.decision)
    coded[schema.decision] = decision

    dataset = Dataset.from_frame(schema, pd.DataFrame(coded, columns=schema.columns))
    logger.info(f"--- ✅ [Dataset] 已載入 {len(dataset)} 筆紀錄。 ---")
    return dataset


def partition_search_spaces(d: Dataset, attr: str) -> Tuple[np.ndarray, np.ndarray]:
    """回傳 (控制搜尋空間, 測試搜尋空間)：A=1 與 A=0 的列編號，皆為遞增排序。"""
    column = d.protected_column(attr).to_numpy()
    ids = d.row_ids
    return ids[column == 1], ids[column == 0]


def intersection_name(attrs: Sequence[str]) -> str:
    return INTERSECTION_SEPARATOR.join(attrs)


def derive_intersection_attribute(d: Dataset, attrs: Sequence[str], name: Optional[str] = None) -> Dataset:
    """
    新增交集受保護屬性 A* = 1{A_1=1 ∧ ... ∧ A_q=1}，原有欄位保持不變。
    """
    attrs = list(attrs)
    if len(set(attrs)) != len(attrs):
        raise SchemaValidationError(f"交集屬性清單中有重複名稱: {attrs}")
    if len(attrs) < 2:
        raise SchemaValidationError("交集屬性至少需要兩個受保護屬性")
    for attr in attrs:
        d.schema.protected_spec(attr)

    name = name or intersection_name(attrs)
    if name in d.schema.columns:
        raise SchemaValidationError(f"欄位 '{name}' 已存在")

    frame = d.frame.copy()
    frame[name] = np.logical_and.reduce([frame[a].to_numpy() == 1 for a in attrs]).astype(np.int64)
    schema = d.schema.with_protected(ProtectedSpec(name=name))
    frame = frame[schema.columns]
    logger.info(f"--- [Dataset] 已建立交集屬性 '{name}'，盛行率 {frame[name].mean():.2%} ---")
    return Dataset(schema=schema, frame=frame, normalization_stats=dict(d.normalization_stats))


def _group_split(d: Dataset, attr: str) -> Tuple[pd.Series, pd.Series]:
    column = d.protected_column(attr)
    protected = d.decisions[column == 1]
    non_protected = d.decisions[column == 0]
    if protected.empty or non_protected.empty:
        raise UndefinedRateError(f"屬性 '{attr}' 的其中一組沒有任何紀錄，比率無定義")
    return protected, non_protected


def demographic_parity(d: Dataset, attr: str) -> Tuple[float, float]:
    """回傳 (P(Ŷ=1 | A=1), P(Ŷ=1 | A=0))。"""
    protected, non_protected = _group_split(d, attr)
    return float(protected.mean()), float(non_protected.mean())


def joint_acceptance_shares(d: Dataset, attr: str) -> Tuple[float, float]:
    """回傳 (P(Ŷ=1 ∧ A=1), P(Ŷ=1 ∧ A=0))，兩者相加即為整體接受率。"""
    if len(d) == 0:
        raise UndefinedRateError("資料集為空，比率無定義")
    column = d.protected_column(attr).to_numpy()
    accepted = d.decisions.to_numpy() == 1
    return float(np.mean(accepted & (column == 1))), float(np.mean(accepted & (column == 0)))


def negative_rate_gap(d: Dataset, attr: str) -> float:
    """P(Ŷ=0 | A=1) − P(Ŷ=0 | A=0)：k 涵蓋整個搜尋空間時 Δp 的極限值。"""
    rate_protected, rate_non_protected = demographic_parity(d, attr)
    return (1.0 - rate_protected) - (1.0 - rate_non_protected)
