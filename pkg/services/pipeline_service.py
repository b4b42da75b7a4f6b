# services/pipeline_service.py

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from config import settings
from data.data_loader import load_builtin_scm_spec, load_manifest_document, load_schema, load_scm_spec
from model.classifiers import Classifier, loan_classifier, school_classifier
from model.synthetic_generator import (
    LoanScenarioParams,
    SchoolScenarioParams,
    generate_loan,
    generate_school_scenario,
)
from services.counterfactual_service import CfDataset, NoiseTable, generate_counterfactual_dataset
from services.dataset_service import Dataset, Schema, load_dataset
from services.detector_service import (
    METHODS,
    AuditReport,
    Direction,
    IntersectionalInputs,
    Method,
    Mode,
    RunConfig,
    group_profiles,
    prepare_intersectional,
    run_method,
)
from services.scm_service import FittedScm, ScmSpec, fit_scm
from services.search_service import NeighborhoodSearch
from services.similarity_service import DistanceContext
from utils.exceptions import InvalidParameterError, ManifestError

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["method", "mode", "k", "detected", "detected_pct", "significant", "significant_pct", "avg_delta_p"]
SWEEP_COLUMNS = ["method", "k", "detected", "significant", "avg_delta_p"]


class DatasetSource(BaseModel):
    """資料來源：既有的 CSV (`path`) 或內建情境生成器 (`generator`)，兩者擇一。"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: Optional[str] = None
    delimiter: str = ","
    generator: Optional[Literal["loan", "law_school"]] = None
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _one_source(self) -> "DatasetSource":
        if (self.path is None) == (self.generator is None):
            raise ValueError("dataset 必須恰好指定 path 或 generator 其中之一")
        return self


class KRange(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: int = Field(1, ge=1)
    stop: int = Field(500, ge=1)
    step: int = Field(10, ge=1)

    def values(self) -> List[int]:
        return list(range(self.start, self.stop + 1, self.step))


class RunManifest(BaseModel):
    """
    一份宣告式的執行清單，驅動 產生/載入 → 估計 SCM → 反事實 → 偵測 → 報表 的整個流程。
    `counterfactuals="ground_truth"` 只適用於內建生成器，改用儲存的外生抽樣與真實 SCM。
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    name: str = "audit"
    dataset: DatasetSource
    dataset_schema: Optional[Schema] = Field(None, alias="schema")
    schema_path: Optional[str] = None
    scm_spec_path: Optional[str] = None
    classifier: Optional[Classifier] = None
    counterfactuals: Literal["abducted", "ground_truth"] = "abducted"
    methods: Tuple[Method, ...] = METHODS
    mode: Mode = "single"
    direction: Direction = "negative"
    protected: Tuple[str, ...]
    k: Tuple[int, ...] = (15, 30, 50, 100, 250)
    alpha: float = Field(0.05, gt=0, le=0.5)
    tau: float = Field(0.0, ge=-1, le=1)
    epsilon: Optional[float] = Field(None, ge=0)
    include_centers: bool = False
    seed: int = settings.default_seed
    output_dir: str = settings.output_dir
    sweep: KRange = Field(default_factory=KRange)

    @field_validator("k")
    @classmethod
    def _check_k(cls, k: Tuple[int, ...]) -> Tuple[int, ...]:
        if not k or any(v < 1 for v in k):
            raise ValueError("k 清單不可為空且每個值都必須 ≥ 1")
        return k

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, methods: Tuple[str, ...]) -> Tuple[str, ...]:
        if not methods:
            raise ValueError("methods 不可為空")
        return methods

    @model_validator(mode="after")
    def _check_sources(self) -> "RunManifest":
        if self.dataset.generator is None:
            if self.dataset_schema is None and self.schema_path is None:
                raise ValueError("使用 CSV 資料時必須提供 schema 或 schema_path")
            if self.classifier is None:
                raise ValueError("使用 CSV 資料時必須提供 classifier")
            if self.counterfactuals == "ground_truth":
                raise ValueError("ground_truth 反事實只適用於內建生成器")
        needs_scm = any(m != "st" for m in self.methods) or self.mode == "intersectional"
        if needs_scm and self.dataset.generator is None and self.scm_spec_path is None:
            raise ValueError("反事實方法需要 scm_spec_path")
        # 以第一個組合驗證屬性數量與模式是否相符
        try:
            self.run_config(self.methods[0], self.k[0])
        except InvalidParameterError as e:
            raise ValueError(str(e)) from e
        return self

    def run_config(self, method: str, k: int) -> RunConfig:
        return RunConfig.build(
            method=method, mode=self.mode, direction=self.direction, protected=self.protected, k=k,
            tau=self.tau, alpha=self.alpha, epsilon=self.epsilon, seed=self.seed,
            include_centers=self.include_centers, n_jobs=1,
        )

    def parameter_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json", by_alias=True, exclude={"output_dir"}),
                               sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _resolve(path: Optional[str], base_dir: str) -> Optional[str]:
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def parse_manifest(document: dict, base_dir: str = config.BASE_DIR, **overrides) -> RunManifest:
    """驗證執行清單；`overrides` 覆寫清單欄位 (值為 None 者略過)，相對路徑以 `base_dir` 為基準。"""
    merged = {**document, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        manifest = RunManifest.model_validate(merged)
    except ValidationError as e:
        raise ManifestError(f"執行清單驗證失敗: {e}") from e
    dataset = manifest.dataset.model_copy(update={"path": _resolve(manifest.dataset.path, base_dir)})
    # 命令列覆寫的輸出目錄以目前工作目錄為準
    output_dir = manifest.output_dir
    if overrides.get("output_dir") is None and "output_dir" in document:
        output_dir = _resolve(output_dir, base_dir)
    return manifest.model_copy(update={
        "dataset": dataset,
        "output_dir": output_dir,
        "schema_path": _resolve(manifest.schema_path, base_dir),
        "scm_spec_path": _resolve(manifest.scm_spec_path, base_dir),
    })


def load_manifest(path: str, **overrides) -> RunManifest:
    document = load_manifest_document(path)
    return parse_manifest(document, base_dir=os.path.dirname(os.path.abspath(path)), **overrides)


@dataclass
class AuditInputs:
    dataset: Dataset
    classifier: Classifier
    scm: Optional[FittedScm] = None
    noise: Optional[NoiseTable] = None
    counterfactuals: Dict[str, CfDataset] = field(default_factory=dict)
    intersectional: Optional[IntersectionalInputs] = None


def _generate(manifest: RunManifest) -> Tuple[Dataset, NoiseTable, FittedScm, Classifier]:
    params = {**manifest.dataset.params, "seed": manifest.seed}
    if manifest.dataset.generator == "loan":
        p = LoanScenarioParams.build(**params)
        d, noise, truth = generate_loan(p)
        return d, noise, truth, manifest.classifier or loan_classifier(p.threshold)
    p = SchoolScenarioParams.build(**params)
    d, noise, truth = generate_school_scenario(p)
    return d, noise, truth, manifest.classifier or school_classifier(p.cutoff)


def _scm_spec(manifest: RunManifest) -> ScmSpec:
    if manifest.scm_spec_path is not None:
        return load_scm_spec(manifest.scm_spec_path)
    return load_builtin_scm_spec(manifest.dataset.generator)


def prepare_inputs(manifest: RunManifest) -> AuditInputs:
    """依執行清單準備資料集、分類器、SCM 與每個受保護屬性的反事實資料集。"""
    noise = truth = None
    if manifest.dataset.generator is not None:
        d, noise, truth, clf = _generate(manifest)
    else:
        schema = manifest.dataset_schema or load_schema(manifest.schema_path)
        d = load_dataset(manifest.dataset.path, schema, manifest.dataset.delimiter)
        clf = manifest.classifier

    inputs = AuditInputs(dataset=d, classifier=clf, noise=noise)
    needs_cf = any(m != "st" for m in manifest.methods)
    if not needs_cf and manifest.mode != "intersectional":
        return inputs

    if manifest.counterfactuals == "ground_truth":
        inputs.scm = truth
    else:
        inputs.scm = fit_scm(_scm_spec(manifest), d)

    if manifest.mode == "intersectional":
        inputs.intersectional = prepare_intersectional(d, inputs.scm, manifest.protected, clf)
    elif needs_cf:
        stored = noise if manifest.counterfactuals == "ground_truth" else None
        for attr in manifest.protected:
            inputs.counterfactuals[attr] = generate_counterfactual_dataset(inputs.scm, d, {attr: 0}, clf, noise=stored)
    return inputs


def _build_searches(inputs: AuditInputs, manifest: RunManifest, cache: bool) -> Dict[str, NeighborhoodSearch]:
    if inputs.intersectional is not None:
        prepared = inputs.intersectional
        ctx = DistanceContext.from_dataset(prepared.dataset)
        return {prepared.attribute: NeighborhoodSearch(prepared.dataset, prepared.attribute, ctx,
                                                       prepared.counterfactual, cache)}
    ctx = DistanceContext.from_dataset(inputs.dataset)
    return {
        attr: NeighborhoodSearch(inputs.dataset, attr, ctx, inputs.counterfactuals.get(attr), cache)
        for attr in manifest.protected
    }


def run_cells(inputs: AuditInputs, manifest: RunManifest, ks: Sequence[int],
              cache: bool = False) -> List[AuditReport]:
    """以 joblib 執行緒平行執行所有 (method, k) 組合，輸出依 (method, k) 排序。"""
    searches = _build_searches(inputs, manifest, cache)
    cells = [(method, k) for method in manifest.methods for k in ks]

    def run(method: str, k: int) -> AuditReport:
        return run_method(inputs.dataset, manifest.run_config(method, k), inputs.counterfactuals, inputs.scm,
                          inputs.classifier, inputs.intersectional, searches)

    if settings.n_jobs == 1:
        return [run(method, k) for method, k in cells]
    return Parallel(n_jobs=settings.n_jobs, prefer="threads")(delayed(run)(method, k) for method, k in cells)


# --- 報表輸出 ---

def _report_path(output_dir: str, method: str, k: int) -> str:
    return os.path.join(output_dir, "reports", f"{method}_k{k}.jsonl")


def write_jsonl(records: Iterable[dict], path: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_jsonl(path: str) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def summarize_records(records: Sequence[dict], method: Optional[str] = None, mode: Optional[str] = None,
                      k: Optional[int] = None) -> dict:
    """
    從 JSONL 紀錄重新計算一列彙總 (偵測數、顯著數、百分比與偵測案例的平均 Δp)。
    沒有申訴人時回傳全為 0 的一列，此時 method、mode、k 必須由呼叫端提供。
    """
    if not records and None in (method, mode, k):
        raise ManifestError("沒有任何紀錄，且未提供 method、mode、k，無法彙總")
    n = len(records)
    detected = [r for r in records if r["detected"]]
    significant = sum(bool(r["significant"]) for r in records)
    first = records[0] if records else {"method": method, "mode": mode, "k": k}
    return {
        "method": first["method"],
        "mode": first["mode"],
        "k": int(first["k"]),
        "detected": len(detected),
        "detected_pct": round(100.0 * len(detected) / n, 1) if n else 0.0,
        "significant": significant,
        "significant_pct": round(100.0 * significant / n, 1) if n else 0.0,
        "avg_delta_p": float(np.mean([r["delta_p"] for r in detected])) if detected else 0.0,
    }


def wide_table(summary: pd.DataFrame) -> pd.DataFrame:
    """方法 × k 的表格：每個方法兩列，偵測數 "288 (16.8%)" 與顯著數 "272* (15.9%)"。"""
    ks = sorted(summary["k"].unique())
    rows = []
    for method in dict.fromkeys(summary["method"]):
        part = summary[summary["method"] == method].set_index("k")
        detected = {"method": method, "measure": "detected"}
        significant = {"method": method, "measure": "significant"}
        for k in ks:
            if k not in part.index:
                continue
            row = part.loc[k]
            detected[f"k={k}"] = f"{int(row['detected'])} ({row['detected_pct']:.1f}%)"
            significant[f"k={k}"] = f"{int(row['significant'])}* ({row['significant_pct']:.1f}%)"
        rows.extend([detected, significant])
    return pd.DataFrame(rows, columns=["method", "measure"] + [f"k={k}" for k in ks])


def _write_summaries(rows: List[dict], output_dir: str) -> pd.DataFrame:
    order = {m: i for i, m in enumerate(METHODS)}
    rows = sorted(rows, key=lambda r: (order.get(r["method"], len(order)), r["k"]))
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    summary.to_csv(os.path.join(output_dir, "summary.csv"), index=False, encoding="utf-8", lineterminator="\n")
    wide_table(summary).to_csv(os.path.join(output_dir, "summary_table.csv"), index=False, encoding="utf-8",
                               lineterminator="\n")
    return summary


def write_provenance(manifest: RunManifest, output_dir: str, command: str) -> None:
    provenance = {
        "command": command,
        "name": manifest.name,
        "seed": manifest.seed,
        "parameter_hash": manifest.parameter_hash(),
        "artifact_version": config.ARTIFACT_VERSION,
        "methods": list(manifest.methods),
        "mode": manifest.mode,
        "direction": manifest.direction,
        "protected": list(manifest.protected),
    }
    with open(os.path.join(output_dir, "provenance.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(provenance, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def _profiles(reports: Sequence[AuditReport], inputs: AuditInputs) -> pd.DataFrame:
    d = inputs.intersectional.dataset if inputs.intersectional is not None else inputs.dataset
    frames = []
    for report in reports:
        if report.config.mode == "multiple":
            continue
        profile = group_profiles(report, d)
        profile.insert(1, "k", report.config.k)
        frames.append(profile)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def run_audit(manifest: RunManifest) -> pd.DataFrame:
    """
    執行完整稽核：每個 (method, k) 寫出一份 JSONL，並彙總成 summary.csv、summary_table.csv、
    profiles.csv 與 provenance.json。回傳彙總表。
    """
    output_dir = manifest.output_dir
    os.makedirs(output_dir, exist_ok=True)
    logger.info(f"--- [Pipeline] 開始稽核 '{manifest.name}'：方法 {list(manifest.methods)}，k={list(manifest.k)} ---")
    inputs = prepare_inputs(manifest)
    reports = run_cells(inputs, manifest, manifest.k, cache=settings.cache_distances)

    rows = []
    for report in reports:
        records = report.records()
        write_jsonl(records, _report_path(output_dir, report.config.method, report.config.k))
        cfg = report.config
        rows.append(summarize_records(records, cfg.method, cfg.mode, cfg.k))
        for attr, sub in report.per_attribute.items():
            s = sub.summary
            logger.info(f"--- [Pipeline] {report.config.method} k={report.config.k} 屬性 {attr} (α/q): "
                        f"偵測 {s.detected}，顯著 {s.significant} ---")
        if report.diagnostics.get("cf_not_in_cst_with"):
            logger.warning(f"⚠️ [Pipeline] k={report.config.k} 有 CF 案例不在 CST w/ 結果中。")
    summary = _write_summaries(rows, output_dir)
    profiles = _profiles(reports, inputs)
    if not profiles.empty:
        profiles.to_csv(os.path.join(output_dir, "profiles.csv"), index=False, encoding="utf-8", lineterminator="\n")
    write_provenance(manifest, output_dir, "audit")
    logger.info(f"--- ✅ [Pipeline] 稽核完成，輸出位於 {output_dir} ---")
    return summary


def default_sweep_ks() -> List[int]:
    return [1, 15, 30] + list(range(50, 501, 10))


def run_sweep(manifest: RunManifest, k_range: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """對一系列 k 執行所有方法，寫出長格式的 sweep.csv (method, k, detected, significant, avg_delta_p)。"""
    ks = list(k_range) if k_range is not None else manifest.sweep.values()
    if not ks or any(k < 1 for k in ks):
        raise ManifestError("k 掃描範圍不可為空且每個值都必須 ≥ 1")
    output_dir = manifest.output_dir
    os.makedirs(output_dir, exist_ok=True)
    logger.info(f"--- [Pipeline] 開始 k 掃描：{len(ks)} 個 k 值 ({ks[0]}..{ks[-1]}) ---")
    inputs = prepare_inputs(manifest)
    reports = run_cells(inputs, manifest, ks, cache=settings.cache_distances)
    rows = []
    for report in reports:
        s = report.summary
        rows.append({"method": s.method, "k": s.k, "detected": s.detected, "significant": s.significant,
                     "avg_delta_p": s.avg_delta_p})
    sweep = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    sweep.to_csv(os.path.join(output_dir, "sweep.csv"), index=False, encoding="utf-8", lineterminator="\n")
    write_provenance(manifest, output_dir, "sweep")
    logger.info(f"--- ✅ [Pipeline] k 掃描完成，共 {len(sweep)} 列 ---")
    return sweep


_REPORT_NAME = re.compile(r"^(?P<method>[a-z_]+)_k(?P<k>\d+)\.jsonl$")


def _recorded_mode(output_dir: str) -> str:
    path = os.path.join(output_dir, "provenance.json")
    if not os.path.exists(path):
        return "single"
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f).get("mode", "single")


def report(output_dir: str) -> pd.DataFrame:
    """由 reports/*.jsonl 重新計算 summary.csv 與 summary_table.csv。"""
    reports_dir = os.path.join(output_dir, "reports")
    if not os.path.isdir(reports_dir):
        raise ManifestError(f"找不到報告目錄: {reports_dir}")
    mode = _recorded_mode(output_dir)
    rows = []
    for name in sorted(os.listdir(reports_dir)):
        match = _REPORT_NAME.match(name)
        if match is None:
            continue
        records = read_jsonl(os.path.join(reports_dir, name))
        rows.append(summarize_records(records, match.group("method"), mode, int(match.group("k"))))
    if not rows:
        raise ManifestError(f"{reports_dir} 中沒有任何 JSONL 報告")
    summary = _write_summaries(rows, output_dir)
    logger.info(f"--- ✅ [Pipeline] 已由 {len(rows)} 份 JSONL 重新產生彙總表 ---")
    return summary
