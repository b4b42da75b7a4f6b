# data/data_loader.py

import json
import logging
from typing import Type, TypeVar

import config
from services.dataset_service import Schema
from services.scm_service import ScmSpec, parse_scm_spec
from utils.exceptions import AuditError, ManifestError, ScmSpecError, SchemaValidationError

logger = logging.getLogger(__name__)

E = TypeVar("E", bound=AuditError)


def _load_json_file(path: str, data_name: str, error: Type[E] = ManifestError) -> dict:
    """一個健壯的 JSON 載入函式，失敗時轉成對應的自訂例外。"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"--- ❌ [DataLoader] 載入 {data_name} 檔案 {path} 失敗: {e} ---")
        raise error(f"載入 {data_name} 檔案失敗: {e}") from e
    logger.info(f"--- ✅ [DataLoader] {data_name} 已載入: {path} ---")
    return data


def load_schema(path: str) -> Schema:
    return Schema.parse(_load_json_file(path, "資料集 schema", SchemaValidationError))


def load_scm_spec(path: str) -> ScmSpec:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except FileNotFoundError as e:
        raise ScmSpecError(f"找不到 SCM 規格檔案: {path}") from e
    spec = parse_scm_spec(text)
    logger.info(f"--- ✅ [DataLoader] SCM 規格 '{spec.name}' 已載入，共 {len(spec.nodes)} 個節點。 ---")
    return spec


def load_manifest_document(path: str) -> dict:
    return _load_json_file(path, "執行清單", ManifestError)


def load_manifest_json_schema() -> dict:
    return _load_json_file(config.MANIFEST_SCHEMA_PATH, "執行清單格式說明", ManifestError)


def load_builtin_schema(scenario: str) -> Schema:
    paths = {"loan": config.LOAN_SCHEMA_PATH, "law_school": config.SCHOOL_SCHEMA_PATH}
    if scenario not in paths:
        raise SchemaValidationError(f"未知的內建情境 '{scenario}'，可用的有 {sorted(paths)}")
    return load_schema(paths[scenario])


def load_builtin_scm_spec(scenario: str) -> ScmSpec:
    paths = {"loan": config.LOAN_SCM_SPEC_PATH, "law_school": config.SCHOOL_SCM_SPEC_PATH}
    if scenario not in paths:
        raise ScmSpecError(f"未知的內建情境 '{scenario}'，可用的有 {sorted(paths)}")
    return load_scm_spec(paths[scenario])
