# services/similarity_service.py

import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.dataset_service import Dataset, Schema
from utils.exceptions import DistanceError, SchemaValidationError

logger = logging.getLogger(__name__)

OrdinalScaling = Literal["minmax", "rank"]
FeatureVector = Union[Sequence, Mapping, pd.Series]


def per_attribute_distance(v1, v2, kind: str, stats: Optional[Tuple[float, float]] = None) -> float:
    """
    單一屬性的距離：類別屬性為重疊量測 (相同 0、不同 1)；數值屬性為 |v1 − v2| / (max − min)。
    反事實值可能落在事實資料的範圍外，此時單項距離可大於 1。
    """
    if kind == "categorical":
        return 0.0 if str(v1) == str(v2) else 1.0
    diff = abs(float(v1) - float(v2))
    if stats is None:
        return diff
    low, high = stats
    if high - low == 0:
        if diff == 0:
            return 0.0
        raise DistanceError(f"全距為零的特徵出現不同的值 ({v1} vs {v2})")
    return diff / (high - low)


@dataclass(frozen=True)
class EncodedFeatures:
    """把特徵拆成數值矩陣與類別矩陣，供一對多距離計算使用。"""
    numeric: np.ndarray
    categorical: np.ndarray

    def __len__(self) -> int:
        return self.numeric.shape[0]

    def take(self, positions: np.ndarray) -> "EncodedFeatures":
        return EncodedFeatures(numeric=self.numeric[positions], categorical=self.categorical[positions])


@dataclass(frozen=True, eq=False)
class DistanceContext:
    """
    Gower 距離的計算環境。`stats` 為事實資料上的 (min, max)；
    `ordinal_scaling="rank"` 時序位特徵改以其在事實資料中的名次 (縮放到 [0, 1]) 比較。
    """
    schema: Schema
    stats: Dict[str, Tuple[float, float]]
    normalize: bool = True
    ordinal_scaling: OrdinalScaling = "minmax"
    levels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.normalize:
            missing = [n for n in self.schema.numeric_features if n not in self.stats]
            if missing:
                raise SchemaValidationError(f"正規化需要下列特徵的 (min, max): {missing}")

    @classmethod
    def from_dataset(cls, d: Dataset, normalize: bool = True, ordinal_scaling: OrdinalScaling = "minmax") -> "DistanceContext":
        levels = {}
        if ordinal_scaling == "rank":
            levels = {
                f.name: np.unique(d.frame[f.name].to_numpy(dtype=float))
                for f in d.schema.features if f.kind == "ordinal"
            }
        return cls(schema=d.schema, stats=dict(d.normalization_stats), normalize=normalize,
                   ordinal_scaling=ordinal_scaling, levels=levels)

    @property
    def numeric_names(self) -> list:
        return self.schema.numeric_features

    @property
    def categorical_names(self) -> list:
        return self.schema.categorical_features

    def _ranked(self, name: str) -> bool:
        return self.ordinal_scaling == "rank" and name in self.levels

    def _scaled(self, name: str, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if not self._ranked(name):
            return values
        levels = self.levels[name]
        if len(levels) < 2:
            return np.zeros_like(values)
        return np.interp(values, levels, np.arange(len(levels), dtype=float)) / (len(levels) - 1)

    def attribute_stats(self, name: str) -> Optional[Tuple[float, float]]:
        if not self.normalize:
            return None
        if self._ranked(name):
            return (0.0, 1.0)
        return self.stats[name]

    @property
    def ranges(self) -> np.ndarray:
        out = []
        for name in self.numeric_names:
            stats = self.attribute_stats(name)
            out.append(1.0 if stats is None else stats[1] - stats[0])
        return np.asarray(out, dtype=float)

    def encode(self, frame: pd.DataFrame) -> EncodedFeatures:
        numeric = np.column_stack(
            [self._scaled(n, frame[n].to_numpy()) for n in self.numeric_names]
        ) if self.numeric_names else np.zeros((len(frame), 0))
        categorical = np.column_stack(
            [frame[n].astype(str).to_numpy() for n in self.categorical_names]
        ) if self.categorical_names else np.zeros((len(frame), 0), dtype=object)
        return EncodedFeatures(numeric=numeric.astype(float), categorical=categorical)

    def encode_vector(self, x: FeatureVector) -> EncodedFeatures:
        return self.encode(pd.DataFrame([as_feature_mapping(x, self.schema)]))


def as_feature_mapping(x: FeatureVector, schema: Schema) -> Dict[str, object]:
    names = schema.feature_names
    if isinstance(x, (Mapping, pd.Series)):
        missing = [n for n in names if n not in x]
        if missing:
            raise SchemaValidationError(f"特徵向量缺少 {missing}")
        return {n: x[n] for n in names}
    x = list(x)
    if len(x) != len(names):
        raise SchemaValidationError(f"特徵向量長度 {len(x)} 與 schema 的 {len(names)} 個特徵不符")
    return dict(zip(names, x))


def gower_distance(x1: FeatureVector, x2: FeatureVector, ctx: DistanceContext) -> float:
    """只在特徵 X 上計算的單項距離平均值；受保護屬性與決策不參與。"""
    v1 = as_feature_mapping(x1, ctx.schema)
    v2 = as_feature_mapping(x2, ctx.schema)
    total = 0.0
    for f in ctx.schema.features:
        a, b = v1[f.name], v2[f.name]
        if f.kind == "categorical":
            total += per_attribute_distance(a, b, f.kind)
            continue
        a, b = ctx._scaled(f.name, [a])[0], ctx._scaled(f.name, [b])[0]
        total += per_attribute_distance(a, b, f.kind, ctx.attribute_stats(f.name))
    return total / len(ctx.schema.features)


def gower_distances(center: EncodedFeatures, others: EncodedFeatures, ctx: DistanceContext) -> np.ndarray:
    """一對多的向量化 Gower 距離，`center` 為單列編碼。"""
    n_features = len(ctx.schema.features)
    diff = np.abs(others.numeric - center.numeric[0])
    ranges = ctx.ranges
    zero = ranges == 0
    if zero.any():
        if (diff[:, zero] > 0).any():
            bad = [n for n, z in zip(ctx.numeric_names, zero) if z]
            raise DistanceError(f"全距為零的特徵 {bad} 出現不同的值")
        ranges = np.where(zero, 1.0, ranges)
    total = (diff / ranges).sum(axis=1)
    if others.categorical.shape[1]:
        total = total + (others.categorical != center.categorical[0]).sum(axis=1)
    return total / n_features
