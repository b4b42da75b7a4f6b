# services/search_service.py

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from services.counterfactual_service import CfDataset
from services.dataset_service import Dataset, partition_search_spaces
from services.similarity_service import DistanceContext, EncodedFeatures, FeatureVector, gower_distances
from utils.exceptions import EmptySearchSpaceError, InvalidParameterError, MissingCounterfactualError

logger = logging.getLogger(__name__)

CenterKind = Literal["factual", "counterfactual"]


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """
    k-NN 查詢結果：成員依距離遞增排列 (同距離時列編號小者優先)。
    `saturated` 表示搜尋空間小於所要求的 k。
    """
    center_kind: CenterKind
    members: np.ndarray
    distances: np.ndarray
    k: int
    saturated: bool = False

    def __len__(self) -> int:
        return len(self.members)

    def without(self, row_id: int, k: int) -> "Neighborhood":
        """移除某一成員 (通常是申訴人自己) 並截回 k 筆。"""
        keep = self.members != row_id
        return Neighborhood(self.center_kind, self.members[keep][:k], self.distances[keep][:k], k, self.saturated)


def rank_space(center: EncodedFeatures, space: np.ndarray, encoded: EncodedFeatures, positions: np.ndarray,
               ctx: DistanceContext) -> Tuple[np.ndarray, np.ndarray]:
    """回傳整個搜尋空間依 (距離, 列編號) 排序後的 (列編號, 距離)。"""
    dists = gower_distances(center, encoded.take(positions), ctx)
    order = np.lexsort((space, dists))
    return space[order], dists[order]


def _select(ids: np.ndarray, dists: np.ndarray, k: int, epsilon: Optional[float],
            center_kind: CenterKind) -> Neighborhood:
    members, distances = ids[:k], dists[:k]
    if epsilon is not None:
        within = distances <= epsilon
        members, distances = members[within], distances[within]
    return Neighborhood(center_kind, members, distances, k, saturated=len(ids) < k)


def _check_k(k: int) -> None:
    if k < 1:
        raise InvalidParameterError(f"k 必須為正整數，收到 {k}")


def _check_query(space: np.ndarray, k: int) -> None:
    _check_k(k)
    if len(space) == 0:
        raise EmptySearchSpaceError("搜尋空間為空")


def top_k_neighbors(center: FeatureVector, space: Iterable[int], d: Dataset, k: int, ctx: DistanceContext,
                    epsilon: Optional[float] = None, center_kind: CenterKind = "factual",
                    encoded: Optional[EncodedFeatures] = None) -> Neighborhood:
    """
    在搜尋空間中找出與搜尋中心距離最小的 k 筆紀錄；設定 epsilon 時另外要求距離 ≤ ε。

    Raises:
        InvalidParameterError: k < 1。
        EmptySearchSpaceError: 搜尋空間為空。
    """
    space = np.asarray(list(space), dtype=np.int64)
    _check_query(space, k)
    encoded = encoded if encoded is not None else ctx.encode(d.features)
    positions = d.frame.index.get_indexer(space)
    ids, dists = rank_space(ctx.encode_vector(center), space, encoded, positions, ctx)
    return _select(ids, dists, k, epsilon, center_kind)


@dataclass
class NeighborhoodSearch:
    """
    對單一資料集與受保護屬性重複查詢的搜尋器：事實資料只編碼一次，
    `cache=True` 時保留每個搜尋中心的完整排序，k 掃描時只需切片。
    """
    d: Dataset
    attr: str
    ctx: DistanceContext
    cf: Optional[CfDataset] = None
    cache: bool = False
    _rankings: Dict[Tuple[str, str, int], Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.control_space, self.test_space = partition_search_spaces(self.d, self.attr)
        self.encoded = self.ctx.encode(self.d.features)
        self._positions = {
            "control": self.d.frame.index.get_indexer(self.control_space),
            "test": self.d.frame.index.get_indexer(self.test_space),
        }
        self._cf_encoded = self.ctx.encode(self.cf.features) if self.cf is not None else None
        self._cf_positions = (
            {row_id: i for i, row_id in enumerate(self.cf.row_ids)} if self.cf is not None else {}
        )

    def _center(self, row_id: int, kind: CenterKind) -> EncodedFeatures:
        if kind == "factual":
            position = self.d.frame.index.get_loc(row_id)
            return self.encoded.take(np.array([position]))
        if self.cf is None or row_id not in self._cf_positions:
            raise MissingCounterfactualError(f"申訴人 {row_id} 沒有反事實紀錄")
        return self._cf_encoded.take(np.array([self._cf_positions[row_id]]))

    def ranking(self, row_id: int, kind: CenterKind, space: str) -> Tuple[np.ndarray, np.ndarray]:
        key = (space, kind, int(row_id))
        if key in self._rankings:
            return self._rankings[key]
        ids = self.control_space if space == "control" else self.test_space
        if len(ids) == 0:
            raise EmptySearchSpaceError(f"屬性 '{self.attr}' 的{'控制' if space == 'control' else '測試'}搜尋空間為空")
        result = rank_space(self._center(row_id, kind), ids, self.encoded, self._positions[space], self.ctx)
        if self.cache:
            self._rankings[key] = result
        return result

    def control_group(self, complainant: int, k: int, epsilon: Optional[float] = None) -> Neighborhood:
        # 申訴人本身在控制搜尋空間中，先多取一筆再移除
        ids, dists = self.ranking(complainant, "factual", "control")
        return _select(ids, dists, k + 1, epsilon, "factual").without(complainant, k)

    def test_group(self, complainant: int, k: int, epsilon: Optional[float] = None,
                   center_kind: CenterKind = "counterfactual") -> Neighborhood:
        ids, dists = self.ranking(complainant, center_kind, "test")
        return _select(ids, dists, k, epsilon, center_kind)


def build_groups(complainant: int, cf: Optional[CfDataset], d: Dataset, attr: str, k: int, ctx: DistanceContext,
                 epsilon: Optional[float] = None, test_center: CenterKind = "counterfactual",
                 search: Optional[NeighborhoodSearch] = None) -> Tuple[Neighborhood, Neighborhood]:
    """
    建立申訴人的 (控制組, 測試組)。控制組以事實 x_c 為中心搜尋 D_c (不含申訴人本身)；
    測試組以 x_c^CF (CST) 或 x_c (ST, `test_center="factual"`) 為中心搜尋 D_t。

    Raises:
        MissingCounterfactualError: 申訴人不屬於受保護群組或沒有反事實紀錄。
    """
    if int(d.protected_column(attr).loc[complainant]) != 1:
        raise MissingCounterfactualError(f"第 {complainant} 列在屬性 '{attr}' 上不屬於受保護群組")
    _check_k(k)
    search = search or NeighborhoodSearch(d=d, attr=attr, ctx=ctx, cf=cf)
    control = search.control_group(complainant, k, epsilon)
    test = search.test_group(complainant, k, epsilon, test_center)
    return control, test


def build_groups_batch(complainants: Iterable[int], search: NeighborhoodSearch, k: int,
                       epsilon: Optional[float] = None, test_center: CenterKind = "counterfactual",
                       n_jobs: int = 1) -> List[Tuple[Neighborhood, Neighborhood]]:
    """多位申訴人的平行查詢 (joblib 執行緒)，輸出順序與輸入順序一致。"""
    def groups(c: int) -> Tuple[Neighborhood, Neighborhood]:
        return search.control_group(c, k, epsilon), search.test_group(c, k, epsilon, test_center)

    complainants = list(complainants)
    if n_jobs == 1:
        return [groups(c) for c in complainants]
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(groups)(c) for c in complainants)
