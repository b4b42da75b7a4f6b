# model/classifiers.py

import logging
from typing import Dict, Literal, Mapping

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from utils.exceptions import ClassifierError

logger = logging.getLogger(__name__)

ClassifierKind = Literal["loan_linear_threshold", "school_weighted_cutoff"]


class Classifier(BaseModel):
    """
    受稽核的決策模型 b()：Ŷ = 1{Σ w_j·x_j > threshold}，嚴格大於。
    只依賴特徵，不讀取受保護屬性。
    """
    model_config = ConfigDict(frozen=True)

    kind: ClassifierKind
    weights: Dict[str, float]
    threshold: float

    @field_validator("weights")
    @classmethod
    def _non_empty(cls, weights: Dict[str, float]) -> Dict[str, float]:
        if not weights:
            raise ValueError("分類器至少需要一個特徵權重")
        return weights

    @classmethod
    def parse(cls, document: dict) -> "Classifier":
        try:
            return cls.model_validate(document)
        except ValidationError as e:
            raise ClassifierError(f"分類器設定不合法: {e}") from e

    def score(self, features: pd.DataFrame) -> np.ndarray:
        missing = [name for name in self.weights if name not in features.columns]
        if missing:
            raise ClassifierError(f"分類器 '{self.kind}' 缺少特徵 {missing}")
        total = np.zeros(len(features))
        for name, weight in self.weights.items():
            total = total + weight * features[name].to_numpy(dtype=float)
        return total

    def predict(self, features: pd.DataFrame) -> np.ndarray:
        return (self.score(features) > self.threshold).astype(np.int64)

    def classify(self, x: Mapping[str, float]) -> int:
        missing = [name for name in self.weights if name not in x]
        if missing:
            raise ClassifierError(f"分類器 '{self.kind}' 缺少特徵 {missing}")
        return int(sum(w * float(x[name]) for name, w in self.weights.items()) > self.threshold)


def loan_classifier(threshold: float = 225000.0, balance_weight: float = 5.0) -> Classifier:
    """貸款情境：Ŷ = 1{AnnualSalary + 5·AccountBalance > 225000}。"""
    return Classifier(
        kind="loan_linear_threshold",
        weights={"AnnualSalary": 1.0, "AccountBalance": balance_weight},
        threshold=threshold,
    )


def school_classifier(cutoff: float = 20.8, ugpa_weight: float = 0.6, lsat_weight: float = 0.4) -> Classifier:
    """法學院情境：Ŷ = 1{0.6·UGPA + 0.4·LSAT > ψ}，ψ 預設 20.8。"""
    return Classifier(
        kind="school_weighted_cutoff",
        weights={"UGPA": ugpa_weight, "LSAT": lsat_weight},
        threshold=cutoff,
    )
