# services/scm_service.py

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from sklearn.linear_model import LinearRegression

from services.dataset_service import Dataset, intersection_name
from utils.exceptions import CyclicGraphError, LogLinkDomainError, ScmSpecError, SingularFitError

logger = logging.getLogger(__name__)

Link = Literal["identity", "log"]


class NoiseDeclaration(BaseModel):
    """外生雜訊的角色：預設為由殘差推斷 (abducted)；合成情境可宣告生成分佈與參數。"""
    model_config = ConfigDict(frozen=True, extra="allow")

    distribution: Literal["abducted", "normal", "poisson", "chi2", "bernoulli"] = "abducted"
    scale: float = 1.0


class NodeDocument(BaseModel):
    name: str
    parents: List[str] = []
    link: Link = "identity"
    categorical: bool = False
    reference: Optional[str] = None
    noise: Optional[NoiseDeclaration] = None


class ScmDocument(BaseModel):
    name: str = "scm"
    protected: List[str]
    nodes: List[NodeDocument]


@dataclass(frozen=True)
class ScmSpec:
    """
    因果 DAG 與每個節點的結構方程式形式（對父節點線性，identity 或 log 連結）。
    建構時即檢查：父節點皆已宣告、受保護節點為根節點、類別節點為根節點、圖無環。
    """
    name: str
    nodes: Tuple[str, ...]
    parents: Dict[str, Tuple[str, ...]]
    link: Dict[str, str]
    protected: Tuple[str, ...]
    categorical: Dict[str, Optional[str]] = field(default_factory=dict)
    noise: Dict[str, Optional[NoiseDeclaration]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ScmSpecError(f"節點名稱重複: {list(self.nodes)}")
        declared = set(self.nodes)
        for node in self.nodes:
            for parent in self.parents.get(node, ()):
                if parent not in declared:
                    raise ScmSpecError(f"節點 '{node}' 的父節點 '{parent}' 未宣告")
            if self.link.get(node, "identity") not in ("identity", "log"):
                raise ScmSpecError(f"節點 '{node}' 的連結函數不合法: {self.link[node]}")
        for attr in self.protected:
            if attr not in declared:
                raise ScmSpecError(f"受保護屬性 '{attr}' 不是 SCM 的節點")
            if self.parents.get(attr):
                raise ScmSpecError(f"受保護屬性 '{attr}' 不可有父節點")
        for node in self.categorical:
            if self.parents.get(node):
                raise ScmSpecError(f"類別節點 '{node}' 必須是根節點")
        try:
            cycle = nx.find_cycle(self.graph)
        except nx.NetworkXNoCycle:
            return
        nodes_in_cycle = [u for u, _ in cycle]
        raise CyclicGraphError(f"父節點圖存在環: {' -> '.join(nodes_in_cycle + nodes_in_cycle[:1])}", cycle=nodes_in_cycle)

    @property
    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for node in self.nodes:
            g.add_edges_from((parent, node) for parent in self.parents.get(node, ()))
        return g

    @property
    def topo_order(self) -> List[str]:
        position = {node: i for i, node in enumerate(self.nodes)}
        return list(nx.lexicographical_topological_sort(self.graph, key=position.__getitem__))

    @property
    def roots(self) -> List[str]:
        return [n for n in self.nodes if not self.parents.get(n)]

    @property
    def non_roots(self) -> List[str]:
        return [n for n in self.topo_order if self.parents.get(n)]

    def descendants(self, nodes: Sequence[str]) -> Set[str]:
        g = self.graph
        result: Set[str] = set()
        for node in nodes:
            result |= nx.descendants(g, node)
        return result

    def to_document(self) -> dict:
        nodes = []
        for node in self.nodes:
            doc = {"name": node, "parents": list(self.parents.get(node, ())), "link": self.link.get(node, "identity")}
            if node in self.categorical:
                doc["categorical"] = True
                doc["reference"] = self.categorical[node]
            if self.noise.get(node) is not None:
                doc["noise"] = self.noise[node].model_dump()
            nodes.append(doc)
        return {"name": self.name, "protected": list(self.protected), "nodes": nodes}


def parse_scm_spec(text: str) -> ScmSpec:
    """
    解析 JSON 格式的 SCM 規格文件。

    Raises:
        ScmSpecError: 文件格式錯誤、父節點未宣告或受保護節點有父節點。
        CyclicGraphError: 父節點圖存在環。
    """
    try:
        document = ScmDocument.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise ScmSpecError(f"SCM 規格不是合法的 JSON: {e}") from e
    except ValidationError as e:
        raise ScmSpecError(f"SCM 規格驗證失敗: {e}") from e

    return ScmSpec(
        name=document.name,
        nodes=tuple(n.name for n in document.nodes),
        parents={n.name: tuple(n.parents) for n in document.nodes},
        link={n.name: n.link for n in document.nodes},
        protected=tuple(document.protected),
        categorical={n.name: n.reference for n in document.nodes if n.categorical},
        noise={n.name: n.noise for n in document.nodes},
    )


@dataclass(frozen=True)
class Term:
    """設計矩陣的一欄：數值父節點本身，或類別父節點的某個非參考水準。"""
    parent: str
    level: Optional[str] = None

    @property
    def name(self) -> str:
        return self.parent if self.level is None else f"{self.parent}={self.level}"


@dataclass(frozen=True)
class NodeWeights:
    intercept: float
    terms: Tuple[Term, ...]
    coefficients: Tuple[float, ...]
    std_errors: Tuple[float, ...] = ()
    intercept_std_error: float = 0.0
    residual_std: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array((self.intercept,) + tuple(self.coefficients), dtype=float)

    def coefficient(self, term_name: str) -> float:
        for term, coef in zip(self.terms, self.coefficients):
            if term.name == term_name:
                return coef
        raise KeyError(term_name)

    def std_error(self, term_name: str) -> float:
        for term, se in zip(self.terms, self.std_errors):
            if term.name == term_name:
                return se
        raise KeyError(term_name)


def design_matrix(terms: Sequence[Term], values: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    columns = []
    for term in terms:
        column = np.asarray(values[term.parent])
        if term.level is None:
            columns.append(column.astype(float))
        else:
            columns.append((column.astype(str) == term.level).astype(float))
    if not columns:
        return np.zeros((n, 0))
    return np.column_stack(columns)


def linear_predictor(weights: NodeWeights, values: Mapping[str, np.ndarray], n: int,
                     slopes: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
    """intercept + Σ coef·term，`slopes` 可逐列覆寫某一項的係數（依 term 順序累加）。"""
    X = design_matrix(weights.terms, values, n)
    eta = np.full(n, weights.intercept, dtype=float)
    for j, (term, coef) in enumerate(zip(weights.terms, weights.coefficients)):
        if slopes is not None and term.name in slopes:
            eta = eta + np.asarray(slopes[term.name], dtype=float) * X[:, j]
        else:
            eta = eta + coef * X[:, j]
    return eta


@dataclass(frozen=True, eq=False)
class FittedScm:
    """
    已估計權重的 SCM。`interventions` 非空時代表 do-介入後的 M′：被介入節點為常數，
    其入邊權重被捨棄，出邊保留。
    """
    spec: ScmSpec
    weights: Dict[str, NodeWeights]
    interventions: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for node in self.weights:
            if not self.spec.parents.get(node):
                raise ScmSpecError(f"根節點 '{node}' 不應有權重")
        for node in self.spec.non_roots:
            if node not in self.weights and node not in self.interventions:
                raise ScmSpecError(f"非根節點 '{node}' 缺少權重")

    @property
    def topo_order(self) -> List[str]:
        return self.spec.topo_order

    @classmethod
    def from_weights(cls, spec: ScmSpec, weights: Mapping[str, Tuple[float, Mapping[str, float]]]) -> "FittedScm":
        """以已知係數建立模型，例如 {'X2': (10.0, {'X1': 0.3})}；類別父節點以 'parent=level' 命名。"""
        built = {}
        for node, (intercept, coefs) in weights.items():
            parents = spec.parents.get(node, ())
            terms = []
            for name in coefs:
                parent, _, level = name.partition("=")
                if parent not in parents:
                    raise ScmSpecError(f"節點 '{node}' 的係數 '{name}' 不對應任何父節點")
                terms.append(Term(parent, level or None))
            built[node] = NodeWeights(
                intercept=float(intercept),
                terms=tuple(terms),
                coefficients=tuple(float(c) for c in coefs.values()),
            )
        return cls(spec=spec, weights=built)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_document(),
            "topo_order": self.topo_order,
            "interventions": dict(self.interventions),
            "weights": {
                node: {
                    "intercept": w.intercept,
                    "intercept_std_error": w.intercept_std_error,
                    "coefficients": {t.name: c for t, c in zip(w.terms, w.coefficients)},
                    "std_errors": {t.name: s for t, s in zip(w.terms, w.std_errors)},
                    "residual_std": w.residual_std,
                    "link": self.spec.link.get(node, "identity"),
                }
                for node, w in self.weights.items()
            },
        }


def _expand_terms(spec: ScmSpec, node: str, d: Dataset) -> Tuple[Term, ...]:
    terms = []
    for parent in spec.parents[node]:
        if parent not in spec.categorical:
            terms.append(Term(parent))
            continue
        levels = sorted(d.frame[parent].astype(str).unique())
        reference = spec.categorical[parent]
        if reference is None and parent in d.schema.feature_names:
            reference = d.schema.feature(parent).reference
        reference = reference if reference is not None else (levels[0] if levels else None)
        if reference not in levels:
            raise ScmSpecError(f"類別父節點 '{parent}' 的參考水準 '{reference}' 不在資料中")
        terms.extend(Term(parent, level) for level in levels if level != reference)
    return tuple(terms)


def _ordinary_least_squares(node: str, terms: Tuple[Term, ...], X: np.ndarray, y: np.ndarray) -> NodeWeights:
    n, p = len(y), X.shape[1] + 1
    design = np.column_stack([np.ones(n), X])
    if n < p or np.linalg.matrix_rank(design) < p:
        raise SingularFitError(f"節點 '{node}' 的設計矩陣秩不足（樣本數 {n}，參數 {p}），可能有常數父節點")

    model = LinearRegression().fit(X, y)
    residuals = y - model.predict(X)
    dof = n - p
    sigma2 = float(residuals @ residuals) / dof if dof > 0 else 0.0
    se = np.sqrt(np.clip(np.diag(sigma2 * np.linalg.inv(design.T @ design)), 0.0, None))
    return NodeWeights(
        intercept=float(model.intercept_),
        terms=terms,
        coefficients=tuple(float(c) for c in model.coef_),
        std_errors=tuple(float(s) for s in se[1:]),
        intercept_std_error=float(se[0]),
        residual_std=float(np.sqrt(sigma2)),
    )


def node_values(spec: ScmSpec, d: Dataset) -> Dict[str, np.ndarray]:
    missing = [n for n in spec.nodes if n not in d.frame.columns]
    if missing:
        raise ScmSpecError(f"資料集缺少 SCM 節點欄位: {missing}")
    return {n: d.frame[n].to_numpy() for n in spec.nodes}


def link_transform(node: str, link: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if link != "log":
        return values
    if (values <= 0).any():
        raise LogLinkDomainError(f"log 連結節點 '{node}' 含有非正值")
    return np.log(values)


def fit_scm(spec: ScmSpec, d: Dataset) -> FittedScm:
    """
    對每個非根節點以普通最小平方法迴歸 (log 連結則對其自然對數) 於截距與父節點上。

    Raises:
        SingularFitError: 設計矩陣秩不足。
        LogLinkDomainError: log 連結節點含非正值。
    """
    logger.info(f"--- [SCM] 正在以 {len(d)} 筆紀錄估計 '{spec.name}' 的結構方程式 ---")
    values = node_values(spec, d)
    weights = {}
    for node in spec.non_roots:
        terms = _expand_terms(spec, node, d)
        X = design_matrix(terms, values, len(d))
        y = link_transform(node, spec.link.get(node, "identity"), values[node])
        weights[node] = _ordinary_least_squares(node, terms, X, y)
        logger.debug(f"節點 {node}: 截距 {weights[node].intercept:.4f}，係數 {weights[node].coefficients}")
    logger.info(f"--- ✅ [SCM] 已估計 {len(weights)} 條結構方程式。 ---")
    return FittedScm(spec=spec, weights=weights)


def merge_intersectional(spec: ScmSpec, fitted: FittedScm, d: Dataset, attrs: Sequence[str],
                         name: Optional[str] = None) -> Tuple[ScmSpec, FittedScm]:
    """
    將多個受保護根節點合併為單一交集根節點 A*，並以 A* 取代原本的虛擬變數重新估計所有子節點。
    `d` 必須已含有 A* 欄位（見 dataset_service.derive_intersection_attribute）。
    """
    attrs = list(attrs)
    if len(attrs) < 2:
        raise ScmSpecError("交集合併至少需要兩個受保護屬性")
    if fitted.spec.nodes != spec.nodes:
        raise ScmSpecError("已估計模型與 SCM 規格不一致")
    for attr in attrs:
        if attr not in spec.nodes or spec.parents.get(attr):
            raise ScmSpecError(f"'{attr}' 不是 SCM 的根節點，無法合併")
    merged = name or intersection_name(attrs)
    if merged not in d.frame.columns:
        raise ScmSpecError(f"資料集缺少交集欄位 '{merged}'，請先建立交集屬性")

    def replace(names: Sequence[str]) -> Tuple[str, ...]:
        out: List[str] = []
        for n in names:
            n = merged if n in attrs else n
            if n not in out:
                out.append(n)
        return tuple(out)

    nodes = replace(spec.nodes)
    merged_spec = ScmSpec(
        name=f"{spec.name}_{merged}",
        nodes=nodes,
        parents={n: replace(spec.parents.get(n, ())) for n in nodes if n != merged} | {merged: ()},
        link={n: spec.link.get(n, "identity") for n in nodes},
        protected=replace(spec.protected),
        categorical={n: r for n, r in spec.categorical.items() if n in nodes},
        noise={n: spec.noise.get(n) for n in nodes},
    )
    refit = fit_scm(merged_spec, d)
    for child, w in refit.weights.items():
        if Term(merged) in w.terms:
            old = fitted.weights.get(child)
            before = {a: old.coefficient(a) for a in attrs if old is not None and Term(a) in old.terms}
            logger.info(f"--- [SCM] {child}: 原係數 {before} -> {merged} 係數 {w.coefficient(merged):.4f} ---")
    return merged_spec, refit
