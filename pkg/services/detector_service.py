# services/detector_service.py

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import settings
from model.classifiers import Classifier
from services.counterfactual_service import CfDataset, generate_counterfactual_dataset
from services.dataset_service import Dataset, derive_intersection_attribute, intersection_name, partition_search_spaces
from services.scm_service import FittedScm, merge_intersectional
from services.search_service import Neighborhood, NeighborhoodSearch
from services.similarity_service import DistanceContext
from services.stattest_service import (
    TestResult,
    decide,
    decide_positive,
    negative_rate,
    one_sided_ci,
    one_sided_upper,
    two_sided_ci,
)
from utils.exceptions import InvalidParameterError, MissingCounterfactualError

logger = logging.getLogger(__name__)

Method = Literal["cst_without", "cst_with", "st", "cf"]
Mode = Literal["single", "multiple", "intersectional"]
Direction = Literal["negative", "positive"]
METHODS: Tuple[str, ...] = ("cst_without", "cst_with", "st", "cf")


class RunConfig(BaseModel):
    """單次偵測的參數。multiple / intersectional 需要至少兩個受保護屬性；cf 不使用 epsilon。"""
    model_config = ConfigDict(frozen=True)

    method: Method = "cst_without"
    mode: Mode = "single"
    direction: Direction = "negative"
    protected: Tuple[str, ...]
    k: int = Field(15, ge=1)
    tau: float = Field(0.0, ge=-1, le=1)
    alpha: float = Field(0.05, gt=0, le=0.5)
    epsilon: Optional[float] = Field(None, ge=0)
    seed: int = settings.default_seed
    include_centers: bool = False
    n_jobs: int = settings.n_jobs

    @model_validator(mode="after")
    def _check_mode(self) -> "RunConfig":
        if self.mode == "single" and len(self.protected) != 1:
            raise ValueError("single 模式只能指定一個受保護屬性")
        if self.mode != "single" and len(self.protected) < 2:
            raise ValueError(f"{self.mode} 模式至少需要兩個受保護屬性")
        if len(set(self.protected)) != len(self.protected):
            raise ValueError(f"受保護屬性重複: {list(self.protected)}")
        return self

    @classmethod
    def build(cls, **fields) -> "RunConfig":
        try:
            return cls.model_validate(fields)
        except ValidationError as e:
            raise InvalidParameterError(f"執行參數不合法: {e}") from e

    def with_updates(self, **fields) -> "RunConfig":
        return RunConfig.build(**{**self.model_dump(), **fields})

    @property
    def uses_counterfactual(self) -> bool:
        return self.method != "st"


@dataclass(frozen=True)
class AuditSummary:
    method: str
    mode: str
    direction: str
    attribute: str
    k: int
    complainants: int
    detected: int
    detected_pct: float
    significant: int
    significant_pct: float
    avg_delta_p: float
    avg_delta_p_all: float
    saturated: int
    experimental: bool

    def to_row(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "k": self.k,
            "detected": self.detected,
            "detected_pct": round(self.detected_pct, 1),
            "significant": self.significant,
            "significant_pct": round(self.significant_pct, 1),
            "avg_delta_p": self.avg_delta_p,
        }


@dataclass(frozen=True, eq=False)
class AuditReport:
    """
    一次偵測的結果：每位申訴人的 TestResult (依列編號排序) 與彙總。
    百分比以受保護群組 (申訴人) 的人數為分母；平均 Δp 只計入偵測到的案例。
    """
    config: RunConfig
    attribute: str
    results: Tuple[TestResult, ...]
    experimental: bool = False
    diagnostics: Dict[str, object] = field(default_factory=dict)
    per_attribute: Dict[str, "AuditReport"] = field(default_factory=dict)

    @property
    def detected_ids(self) -> List[int]:
        return [r.complainant for r in self.results if r.detected]

    @property
    def significant_ids(self) -> List[int]:
        return [r.complainant for r in self.results if r.significant]

    @property
    def summary(self) -> AuditSummary:
        n = len(self.results)
        detected = [r for r in self.results if r.detected]
        significant = sum(r.significant for r in self.results)
        evaluable = [r.delta_p for r in self.results if r.evaluable]
        return AuditSummary(
            method=self.config.method,
            mode=self.config.mode,
            direction=self.config.direction,
            attribute=self.attribute,
            k=self.config.k,
            complainants=n,
            detected=len(detected),
            detected_pct=100.0 * len(detected) / n if n else 0.0,
            significant=significant,
            significant_pct=100.0 * significant / n if n else 0.0,
            avg_delta_p=float(np.mean([r.delta_p for r in detected])) if detected else 0.0,
            avg_delta_p_all=float(np.mean(evaluable)) if evaluable else 0.0,
            saturated=sum(r.saturated for r in self.results),
            experimental=self.experimental,
        )

    def records(self) -> List[dict]:
        base = {
            "method": self.config.method,
            "mode": self.config.mode,
            "direction": self.config.direction,
            "k": self.config.k,
            "experimental": self.experimental,
        }
        return [{**base, **r.to_record()} for r in self.results]


# --- 單一屬性的逐案檢定 ---

def _centers_included(method: str, include_centers: bool) -> bool:
    return method in ("cst_with", "cf") or (method == "st" and include_centers)


def _not_evaluable(c: int, y_hat: int, y_hat_cf: Optional[int], attr: str, saturated: bool) -> TestResult:
    return TestResult(
        complainant=int(c), p_c=0.0, p_t=0.0, delta_p=0.0, ci_one_sided_lo=None, ci_one_sided_hi=None,
        ci_two_sided=(0.0, 0.0), m=0, detected=False, significant=False, saturated=saturated,
        evaluable=False, y_hat=y_hat, y_hat_cf=y_hat_cf, attribute=attr,
    )


def evaluate_complainant(c: int, control: Neighborhood, test: Neighborhood, decisions: pd.Series,
                         cf: Optional[CfDataset], cfg: RunConfig, attr: str, alpha: float) -> TestResult:
    """依方法與方向計算單一申訴人的 p_c、p_t、Δp、信賴區間與判定。"""
    include = _centers_included(cfg.method, cfg.include_centers)
    y_hat = int(decisions.loc[c])
    y_hat_cf = int(cf.decisions.loc[c]) if cf is not None else None
    saturated = control.saturated or test.saturated
    if include:
        test_center_outcome = y_hat if cfg.method == "st" else y_hat_cf
    elif not len(control) or not len(test):
        return _not_evaluable(c, y_hat, y_hat_cf, attr, saturated)
    else:
        test_center_outcome = None

    p_c = negative_rate(control, decisions, include, y_hat)
    p_t = negative_rate(test, decisions, include, test_center_outcome)
    m = min(len(control), len(test)) + int(include)
    delta_p = p_c - p_t

    lo = hi = None
    if cfg.direction == "negative":
        lo = one_sided_ci(p_c, p_t, m, alpha)
        detected, significant = decide(delta_p, lo, cfg.tau)
    else:
        hi = one_sided_upper(p_c, p_t, m, alpha)
        detected, significant = decide_positive(delta_p, p_c, p_t, m, alpha, cfg.tau)

    if cfg.method == "cf":
        # 反事實公平性：事實與反事實決策翻轉才算偵測到；顯著性沿用 CST w/ 的信賴區間
        flipped = (y_hat == 0 and y_hat_cf == 1) if cfg.direction == "negative" else (y_hat == 1 and y_hat_cf == 0)
        significant = flipped and significant
        detected = flipped

    return TestResult(
        complainant=int(c), p_c=p_c, p_t=p_t, delta_p=delta_p, ci_one_sided_lo=lo, ci_one_sided_hi=hi,
        ci_two_sided=two_sided_ci(p_c, p_t, m, alpha), m=m, detected=detected, significant=significant,
        saturated=saturated, y_hat=y_hat, y_hat_cf=y_hat_cf, attribute=attr,
        control_ids=tuple(int(i) for i in control.members), test_ids=tuple(int(i) for i in test.members),
    )


def _check_counterfactual(d: Dataset, cf: Optional[CfDataset], attr: str, complainants: np.ndarray) -> None:
    if cf is None:
        raise MissingCounterfactualError(f"屬性 '{attr}' 需要反事實資料集")
    if cf.source.schema.decision != d.schema.decision or attr not in cf.intervention:
        raise MissingCounterfactualError(f"反事實資料集的介入 {list(cf.intervention)} 與屬性 '{attr}' 不一致")
    missing = np.setdiff1d(complainants, cf.row_ids)
    if len(missing):
        raise MissingCounterfactualError(f"申訴人 {missing[:5].tolist()} 等 {len(missing)} 位沒有反事實紀錄")


def _run_attribute(d: Dataset, cf: Optional[CfDataset], attr: str, cfg: RunConfig, alpha: float,
                   complainants: Optional[np.ndarray] = None, ctx: Optional[DistanceContext] = None,
                   search: Optional[NeighborhoodSearch] = None) -> List[TestResult]:
    control_space, _ = partition_search_spaces(d, attr)
    complainants = control_space if complainants is None else np.asarray(complainants, dtype=np.int64)
    test_center = "factual" if cfg.method == "st" else "counterfactual"
    if cfg.uses_counterfactual:
        _check_counterfactual(d, cf, attr, complainants)
    if search is None:
        ctx = ctx or DistanceContext.from_dataset(d)
        search = NeighborhoodSearch(d=d, attr=attr, ctx=ctx, cf=cf if cfg.uses_counterfactual else None,
                                    cache=settings.cache_distances)
    epsilon = None if cfg.method == "cf" else cfg.epsilon
    decisions = d.decisions
    cf_used = cf if cfg.uses_counterfactual else None

    def evaluate(c: int) -> TestResult:
        control = search.control_group(c, cfg.k, epsilon)
        test = search.test_group(c, cfg.k, epsilon, test_center)
        return evaluate_complainant(c, control, test, decisions, cf_used, cfg, attr, alpha)

    if cfg.n_jobs == 1:
        results = [evaluate(c) for c in complainants]
    else:
        results = Parallel(n_jobs=cfg.n_jobs, prefer="threads")(delayed(evaluate)(c) for c in complainants)
    saturated = sum(r.saturated for r in results)
    if saturated:
        logger.warning(f"⚠️ [Detector] {saturated} 位申訴人的搜尋空間小於 k={cfg.k}，已使用飽和鄰域並標記。")
    return results


def _log_report(report: AuditReport) -> None:
    s = report.summary
    logger.info(f"--- ✅ [Detector] {s.method} ({s.mode}, {s.direction}, k={s.k}) on '{s.attribute}': "
                f"偵測 {s.detected} ({s.detected_pct:.1f}%)，顯著 {s.significant} ({s.significant_pct:.1f}%) ---")


def run_cst(d: Dataset, cf: CfDataset, cfg: RunConfig, ctx: Optional[DistanceContext] = None,
            search: Optional[NeighborhoodSearch] = None) -> AuditReport:
    """對所有受保護列 (不論其決策結果) 執行 CST w/o 或 CST w/。"""
    if cfg.method not in ("cst_without", "cst_with"):
        raise InvalidParameterError(f"run_cst 不支援方法 '{cfg.method}'")
    attr = cfg.protected[0]
    logger.info(f"--- [Detector] 正在執行 {cfg.method}，屬性 '{attr}'，k={cfg.k} ---")
    results = _run_attribute(d, cf, attr, cfg, cfg.alpha, ctx=ctx, search=search)
    report = AuditReport(config=cfg, attribute=attr, results=tuple(results))
    _log_report(report)
    return report


def run_st(d: Dataset, cfg: RunConfig, ctx: Optional[DistanceContext] = None,
           search: Optional[NeighborhoodSearch] = None) -> AuditReport:
    """情境測試基準：測試組以事實 x_c 為中心，預設不納入搜尋中心。"""
    cfg = cfg if cfg.method == "st" else cfg.with_updates(method="st")
    attr = cfg.protected[0]
    logger.info(f"--- [Detector] 正在執行 st，屬性 '{attr}'，k={cfg.k} ---")
    results = _run_attribute(d, None, attr, cfg, cfg.alpha, ctx=ctx, search=search)
    report = AuditReport(config=cfg, attribute=attr, results=tuple(results))
    _log_report(report)
    return report


def run_cf(d: Dataset, cf: CfDataset, cfg: RunConfig, ctx: Optional[DistanceContext] = None,
           search: Optional[NeighborhoodSearch] = None) -> AuditReport:
    """
    反事實公平性偵測：ŷ=0 且 ŷ^CF=1 (正向為相反) 即偵測到；顯著性取自 CST w/ 鄰域的單側信賴區間。
    同時記錄 CF 偵測到但 CST w/ 沒有偵測到的案例 (診斷用，不中斷)。
    """
    cfg = cfg if cfg.method == "cf" else cfg.with_updates(method="cf")
    if cfg.epsilon is not None:
        logger.warning("⚠️ [Detector] cf 方法不使用 epsilon，已忽略。")
    attr = cfg.protected[0]
    logger.info(f"--- [Detector] 正在執行 cf，屬性 '{attr}' ---")
    results = _run_attribute(d, cf, attr, cfg, cfg.alpha, ctx=ctx, search=search)
    outside = [r.complainant for r in results if r.detected and not _cst_with_detects(r, cfg.tau, cfg.direction)]
    if outside:
        logger.warning(f"⚠️ [Detector] {len(outside)} 個 CF 案例不在 CST w/ 的偵測結果中: {outside[:10]}")
    report = AuditReport(config=cfg, attribute=attr, results=tuple(results),
                         diagnostics={"cf_not_in_cst_with": outside})
    _log_report(report)
    return report


def _cst_with_detects(r: TestResult, tau: float, direction: str) -> bool:
    return r.delta_p > tau if direction == "negative" else r.delta_p < tau


def run_single(d: Dataset, cf: Optional[CfDataset], cfg: RunConfig, ctx: Optional[DistanceContext] = None,
               search: Optional[NeighborhoodSearch] = None) -> AuditReport:
    if cfg.method == "st":
        return run_st(d, cfg, ctx, search)
    if cfg.method == "cf":
        return run_cf(d, cf, cfg, ctx, search)
    return run_cst(d, cf, cfg, ctx, search)


# --- 多重與交集歧視 ---

def _combine_attribute_runs(c: int, per_attr: Sequence[TestResult], direction: str) -> TestResult:
    """
    多重歧視的合併結果：所有屬性都偵測到才算偵測，所有屬性都顯著才算顯著。
    Δp 等數值取最不利的屬性 (負向取最小 Δp，正向取最大)。
    """
    if len(per_attr) == 1:
        return per_attr[0]
    evaluable = [r for r in per_attr if r.evaluable]
    if len(evaluable) < len(per_attr):
        return replace(per_attr[0], detected=False, significant=False, evaluable=False, attribute=None)
    pick = min if direction == "negative" else max
    worst = pick(per_attr, key=lambda r: r.delta_p)
    if direction == "negative":
        bounds = {"ci_one_sided_lo": min(r.ci_one_sided_lo for r in per_attr)}
    else:
        bounds = {"ci_one_sided_hi": max(r.ci_one_sided_hi for r in per_attr)}
    return replace(
        worst,
        complainant=int(c),
        detected=all(r.detected for r in per_attr),
        significant=all(r.significant for r in per_attr),
        saturated=any(r.saturated for r in per_attr),
        attribute="+".join(r.attribute for r in per_attr),
        **bounds,
    )


def run_multiple(d: Dataset, cfs: Mapping[str, CfDataset], cfg: RunConfig,
                 ctx: Optional[DistanceContext] = None,
                 searches: Optional[Mapping[str, NeighborhoodSearch]] = None) -> AuditReport:
    """
    多重歧視：對每個受保護屬性分別在 α/q 水準下執行同一方法，申訴人為同時屬於所有受保護群組者。
    """
    attrs = list(cfg.protected)
    q = len(attrs)
    alpha = cfg.alpha / q
    if cfg.uses_counterfactual:
        missing = [a for a in attrs if a not in cfs]
        if missing:
            raise MissingCounterfactualError(f"缺少下列屬性的反事實資料集: {missing}")
    mask = np.logical_and.reduce([d.protected_column(a).to_numpy() == 1 for a in attrs])
    complainants = d.row_ids[mask]
    ctx = ctx or DistanceContext.from_dataset(d)
    logger.info(f"--- [Detector] 正在執行多重歧視 {cfg.method}，屬性 {attrs}，α/q = {alpha:.4f}，"
                f"申訴人 {len(complainants)} 位 ---")

    per_attribute: Dict[str, AuditReport] = {}
    for attr in attrs:
        attr_cfg = cfg.with_updates(mode="single", protected=(attr,), alpha=alpha)
        results = _run_attribute(d, cfs.get(attr), attr, attr_cfg, alpha, complainants=complainants, ctx=ctx,
                                 search=(searches or {}).get(attr))
        per_attribute[attr] = AuditReport(config=attr_cfg, attribute=attr, results=tuple(results))

    combined = [
        _combine_attribute_runs(c, [per_attribute[a].results[i] for a in attrs], cfg.direction)
        for i, c in enumerate(complainants)
    ]
    report = AuditReport(config=cfg, attribute="+".join(attrs), results=tuple(combined),
                         experimental=cfg.direction == "positive", per_attribute=per_attribute)
    _log_report(report)
    return report


@dataclass(frozen=True, eq=False)
class IntersectionalInputs:
    dataset: Dataset
    scm: FittedScm
    counterfactual: CfDataset
    attribute: str


def prepare_intersectional(d: Dataset, scm: FittedScm, attrs: Sequence[str], clf: Classifier) -> IntersectionalInputs:
    """建立交集屬性 A*、合併並重新估計 SCM，再以 do(A*:=0) 產生反事實資料集。"""
    name = intersection_name(attrs)
    d_star = derive_intersection_attribute(d, attrs, name)
    _, refit = merge_intersectional(scm.spec, scm, d_star, attrs, name)
    cf_star = generate_counterfactual_dataset(refit, d_star, {name: 0}, clf)
    return IntersectionalInputs(dataset=d_star, scm=refit, counterfactual=cf_star, attribute=name)


def run_intersectional(d: Dataset, cfg: RunConfig, scm: FittedScm, clf: Classifier,
                       prepared: Optional[IntersectionalInputs] = None,
                       search: Optional[NeighborhoodSearch] = None) -> AuditReport:
    """交集歧視：把 A* 當成單一受保護屬性執行一般的單屬性流程。"""
    prepared = prepared or prepare_intersectional(d, scm, cfg.protected, clf)
    single_cfg = cfg.with_updates(mode="single", protected=(prepared.attribute,))
    report = run_single(prepared.dataset, prepared.counterfactual, single_cfg, search=search)
    return AuditReport(
        config=cfg, attribute=prepared.attribute, results=report.results,
        experimental=cfg.direction == "positive", diagnostics=report.diagnostics,
    )


def run_method(d: Dataset, cfg: RunConfig, cfs: Optional[Mapping[str, CfDataset]] = None,
               scm: Optional[FittedScm] = None, clf: Optional[Classifier] = None,
               prepared: Optional[IntersectionalInputs] = None,
               searches: Optional[Mapping[str, NeighborhoodSearch]] = None) -> AuditReport:
    """依 mode 分派到單一、多重或交集偵測。`searches` 依屬性名稱提供可共用的搜尋器。"""
    cfs = cfs or {}
    searches = searches or {}
    if cfg.mode == "single":
        return run_single(d, cfs.get(cfg.protected[0]), cfg, search=searches.get(cfg.protected[0]))
    if cfg.mode == "multiple":
        return run_multiple(d, cfs, cfg, searches=searches)
    if prepared is None and (scm is None or clf is None):
        raise InvalidParameterError("交集偵測需要已估計的 SCM 與分類器")
    name = prepared.attribute if prepared is not None else intersection_name(cfg.protected)
    return run_intersectional(d, cfg, scm, clf, prepared, search=searches.get(name))


# --- 偵測案例的群組輪廓 ---

def group_profiles(report: AuditReport, d: Dataset, features: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    偵測到的案例中，控制組與測試組的平均負向決策數、負向比例，以及各連續特徵的平均值與標準差。
    """
    features = list(features or d.schema.numeric_features)
    detected = [r for r in report.results if r.detected and r.evaluable]
    rows = []
    for group, ids_of in (("control", lambda r: r.control_ids), ("test", lambda r: r.test_ids)):
        negatives, shares, members = [], [], []
        for r in detected:
            ids = list(ids_of(r))
            outcomes = d.decisions.loc[ids].to_numpy()
            negatives.append(int((outcomes == 0).sum()))
            shares.append(float((outcomes == 0).mean()) if len(ids) else 0.0)
            members.extend(ids)
        row = {
            "method": report.config.method,
            "group": group,
            "cases": len(detected),
            "avg_negatives": float(np.mean(negatives)) if detected else 0.0,
            "negative_share": float(np.mean(shares)) if detected else 0.0,
        }
        values = d.frame.loc[members, features] if members else pd.DataFrame(columns=features)
        for f in features:
            row[f"{f}_mean"] = float(values[f].mean()) if members else 0.0
            row[f"{f}_std"] = float(values[f].std(ddof=0)) if members else 0.0
        rows.append(row)
    return pd.DataFrame(rows)
