# services/counterfactual_service.py

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from model.classifiers import Classifier
from services.dataset_service import Dataset, Record
from services.scm_service import FittedScm, link_transform, linear_predictor, node_values
from utils.exceptions import (
    InterventionError,
    MissingCounterfactualError,
    MissingNoiseError,
    UnknownAttributeError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseTable:
    """
    推斷 (或生成時儲存) 的外生雜訊。
    `residuals`：非根節點的 û；`roots`：根節點的觀測值；
    `slopes`：逐列覆寫的係數（節點 -> 以 term 名稱為欄的表），只出現在真實生成模型中；
    `draws`：生成器的原始外生抽樣，供 sidecar 輸出。
    """
    residuals: pd.DataFrame
    roots: pd.DataFrame
    slopes: Dict[str, pd.DataFrame] = field(default_factory=dict)
    draws: Optional[pd.DataFrame] = None

    @property
    def row_ids(self) -> np.ndarray:
        return self.roots.index.to_numpy()

    def to_frame(self) -> pd.DataFrame:
        parts = [self.roots, self.residuals.add_prefix("u_")]
        for node, table in self.slopes.items():
            parts.append(table.add_prefix(f"slope_{node}_"))
        if self.draws is not None:
            parts.append(self.draws.add_prefix("draw_"))
        frame = pd.concat(parts, axis=1)
        frame.index.name = "row_id"
        return frame

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, encoding="utf-8")


@dataclass(frozen=True, eq=False)
class CfDataset:
    """
    受保護列在 do-介入下的反事實對應 (x^CF, a^CF, ŷ^CF)，索引為來源列編號。
    """
    source: Dataset
    intervention: Dict[str, float]
    frame: pd.DataFrame
    noise: Optional[NoiseTable] = None

    def __len__(self) -> int:
        return len(self.frame)

    def __contains__(self, row_id) -> bool:
        return row_id in self.frame.index

    @property
    def row_ids(self) -> np.ndarray:
        return self.frame.index.to_numpy()

    @property
    def features(self) -> pd.DataFrame:
        return self.frame[self.source.schema.feature_names]

    @property
    def decisions(self) -> pd.Series:
        return self.frame[self.source.schema.decision]

    def record(self, row_id: int) -> Record:
        if row_id not in self.frame.index:
            raise MissingCounterfactualError(f"第 {row_id} 列沒有反事實紀錄")
        schema = self.source.schema
        row = self.frame.loc[row_id]
        return Record(
            id=int(row_id),
            x=tuple(row[schema.feature_names]),
            a={p: int(row[p]) for p in schema.protected_names},
            y_hat=int(row[schema.decision]),
        )

    def to_csv(self, path: str, delimiter: str = ",") -> None:
        schema = self.source.schema
        out = self.frame.copy()
        for p in schema.protected:
            out[p.name] = out[p.name].map({1: p.protected_value, 0: p.non_protected_value})
        out = out.reset_index().rename(columns={"row_id": "source_row_id"})
        out[schema.columns + ["source_row_id"]].to_csv(path, sep=delimiter, index=False, encoding="utf-8")


def abduct(m: FittedScm, d: Dataset) -> NoiseTable:
    """
    殘差推斷：identity 連結 û = x − (截距 + 權重·父節點)；log 連結 û = log(x) − (...)；
    根節點原樣記錄。
    """
    if m.interventions:
        raise InterventionError("推斷步驟必須使用未介入的模型")
    values = node_values(m.spec, d)
    n = len(d)
    residuals = {}
    for node in m.spec.non_roots:
        y = link_transform(node, m.spec.link.get(node, "identity"), values[node])
        residuals[node] = y - linear_predictor(m.weights[node], values, n)
    index = pd.Index(d.row_ids, name="row_id")
    return NoiseTable(
        residuals=pd.DataFrame(residuals, index=index, columns=m.spec.non_roots),
        roots=pd.DataFrame({r: values[r] for r in m.spec.roots}, index=index, columns=m.spec.roots),
    )


def intervene(m: FittedScm, do: Mapping[str, float]) -> FittedScm:
    """回傳 do-介入後的模型 M′：被介入節點成為常數，入邊權重捨棄、出邊保留。"""
    for node, value in do.items():
        if node not in m.spec.nodes:
            raise InterventionError(f"無法介入不存在的節點 '{node}'")
        if node in m.spec.protected and value not in (0, 1):
            raise InterventionError(f"受保護節點 '{node}' 只能介入為 0 或 1，收到 {value}")
        if m.spec.link.get(node) == "log" and not value > 0:
            raise InterventionError(f"log 連結節點 '{node}' 的介入值必須為正，收到 {value}")
    weights = {node: w for node, w in m.weights.items() if node not in do}
    return FittedScm(spec=m.spec, weights=weights, interventions={**m.interventions, **dict(do)})


def predict(m_intervened: FittedScm, noise: NoiseTable, row_ids: Iterable[int]) -> pd.DataFrame:
    """
    依拓撲順序計算節點值：根節點取介入值或觀測值，非根節點取 截距 + 權重·父節點 + û
    （log 連結再取指數）。回傳以列編號為索引的 DataFrame。
    """
    row_ids = np.asarray(list(row_ids), dtype=np.int64)
    n = len(row_ids)
    missing_rows = row_ids[~np.isin(row_ids, noise.roots.index) | ~np.isin(row_ids, noise.residuals.index)]
    if len(missing_rows):
        raise MissingNoiseError(f"雜訊表缺少列 {missing_rows[:5].tolist()} 等 {len(missing_rows)} 筆")

    spec = m_intervened.spec
    values: Dict[str, np.ndarray] = {}
    for node in m_intervened.topo_order:
        if node in m_intervened.interventions:
            values[node] = np.full(n, m_intervened.interventions[node])
        elif not spec.parents.get(node):
            if node not in noise.roots.columns:
                raise MissingNoiseError(f"雜訊表缺少根節點 '{node}'")
            values[node] = noise.roots.loc[row_ids, node].to_numpy()
        else:
            if node not in noise.residuals.columns:
                raise MissingNoiseError(f"雜訊表缺少節點 '{node}' 的 û")
            slopes = None
            if node in noise.slopes:
                table = noise.slopes[node].loc[row_ids]
                slopes = {c: table[c].to_numpy() for c in table.columns}
            eta = linear_predictor(m_intervened.weights[node], values, n, slopes) + \
                noise.residuals.loc[row_ids, node].to_numpy(dtype=float)
            values[node] = np.exp(eta) if spec.link.get(node) == "log" else eta
    return pd.DataFrame(values, index=pd.Index(row_ids, name="row_id"), columns=list(spec.nodes))


def generate_counterfactual_dataset(m: FittedScm, d: Dataset, do: Mapping[str, float], clf: Classifier,
                                    noise: Optional[NoiseTable] = None) -> CfDataset:
    """
    以推斷、介入、預測三步驟產生受保護列的反事實資料集，並用分類器重新計算 ŷ^CF。
    提供 `noise`（例如生成器儲存的真實外生抽樣）時直接使用，不再做殘差推斷。
    """
    if not do:
        raise InterventionError("反事實資料集需要至少一個介入")
    for attr, value in do.items():
        try:
            d.schema.protected_spec(attr)
        except UnknownAttributeError as e:
            raise InterventionError(f"介入目標 '{attr}' 不是受保護屬性") from e
        if value != 0:
            raise InterventionError(f"反事實資料集只支援 do({attr} := 0)，收到 {value}")

    logger.info(f"--- [Counterfactual] 正在以 do({', '.join(f'{a}:={v}' for a, v in do.items())}) 產生反事實資料集 ---")
    mask = np.logical_and.reduce([d.frame[attr].to_numpy() == 1 for attr in do])
    row_ids = d.row_ids[mask]
    if noise is None:
        noise = abduct(m, d)

    predicted = predict(intervene(m, do), noise, row_ids)
    frame = d.frame.loc[row_ids].copy()
    # 非後代節點保持事實值
    for node in m.spec.descendants(list(do)):
        if node in d.schema.feature_names:
            frame[node] = predicted[node].to_numpy()
    for attr, value in do.items():
        frame[attr] = int(value)
    frame[d.schema.decision] = clf.predict(frame[d.schema.feature_names])

    logger.info(f"--- ✅ [Counterfactual] 已產生 {len(frame)} 筆反事實紀錄，"
                f"其中 {int(frame[d.schema.decision].sum())} 筆為正向決策。 ---")
    return CfDataset(source=d, intervention=dict(do), frame=frame, noise=noise)
