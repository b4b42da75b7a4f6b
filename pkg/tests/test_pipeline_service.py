# tests/test_pipeline_service.py

import json
import os

import pandas as pd
import pytest

import config
from data.data_loader import load_manifest_json_schema
from model.synthetic_generator import LoanScenarioParams, generate_loan
from services.pipeline_service import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    RunManifest,
    default_sweep_ks,
    load_manifest,
    parse_manifest,
    read_jsonl,
    report,
    run_audit,
    run_sweep,
    summarize_records,
    wide_table,
)
from utils.exceptions import ManifestError

METHOD_ORDER = ["cst_without", "cst_with", "st", "cf"]


def _loan_document(output_dir, **fields) -> dict:
    return {
        "name": "loan_test",
        "dataset": {"generator": "loan", "params": {"n": 300}},
        "counterfactuals": "ground_truth",
        "protected": ["Gender"],
        "k": [5, 15],
        "seed": 3,
        "output_dir": str(output_dir),
        **fields,
    }


def _read_bytes(directory, *names) -> dict:
    return {name: open(os.path.join(directory, name), "rb").read() for name in names}


@pytest.fixture(scope="module")
def loan_audit(tmp_path_factory):
    out = tmp_path_factory.mktemp("loan_audit")
    manifest = parse_manifest(_loan_document(out))
    summary = run_audit(manifest)
    return manifest, summary, str(out)


def test_audit_writes_every_artifact(loan_audit):
    _, summary, out = loan_audit
    for name in ("summary.csv", "summary_table.csv", "profiles.csv", "provenance.json"):
        assert os.path.exists(os.path.join(out, name))
    for method in METHOD_ORDER:
        for k in (5, 15):
            assert os.path.exists(os.path.join(out, "reports", f"{method}_k{k}.jsonl"))
    assert list(summary.columns) == SUMMARY_COLUMNS
    assert list(zip(summary["method"], summary["k"])) == [(m, k) for m in METHOD_ORDER for k in (5, 15)]


def test_jsonl_records_match_summary(loan_audit):
    _, summary, out = loan_audit
    records = read_jsonl(os.path.join(out, "reports", "cst_without_k15.jsonl"))
    row = summary[(summary["method"] == "cst_without") & (summary["k"] == 15)].iloc[0]
    assert len(records) > 0
    assert sum(r["detected"] for r in records) == row["detected"]
    assert sum(r["significant"] for r in records) == row["significant"]
    assert {"complainant", "p_c", "p_t", "delta_p", "ci_two_sided", "m", "method", "k"} <= set(records[0])
    assert [r["complainant"] for r in records] == sorted(r["complainant"] for r in records)


def test_cf_counts_do_not_depend_on_k(loan_audit):
    _, summary, _ = loan_audit
    assert summary[summary["method"] == "cf"]["detected"].nunique() == 1


def test_rerun_is_byte_identical(loan_audit, tmp_path):
    manifest, _, out = loan_audit
    run_audit(manifest.model_copy(update={"output_dir": str(tmp_path)}))
    names = ("summary.csv", "summary_table.csv", "profiles.csv", os.path.join("reports", "st_k15.jsonl"))
    assert _read_bytes(out, *names) == _read_bytes(str(tmp_path), *names)
    first = json.load(open(os.path.join(out, "provenance.json"), encoding="utf-8"))
    second = json.load(open(os.path.join(str(tmp_path), "provenance.json"), encoding="utf-8"))
    assert first == second
    assert first["parameter_hash"] == manifest.parameter_hash()
    assert first["artifact_version"] == config.ARTIFACT_VERSION


def test_report_regenerates_summary(loan_audit):
    _, summary, out = loan_audit
    regenerated = report(out)
    pd.testing.assert_frame_equal(regenerated.reset_index(drop=True), summary.reset_index(drop=True))


def test_report_requires_jsonl(tmp_path):
    with pytest.raises(ManifestError):
        report(str(tmp_path))


def test_wide_table_format():
    summary = pd.DataFrame([
        {"method": "cst_without", "mode": "single", "k": 15, "detected": 288, "detected_pct": 16.8,
         "significant": 272, "significant_pct": 15.9, "avg_delta_p": 0.4},
    ], columns=SUMMARY_COLUMNS)
    table = wide_table(summary)
    assert table["k=15"].tolist() == ["288 (16.8%)", "272* (15.9%)"]
    assert table["measure"].tolist() == ["detected", "significant"]


def test_sweep_writes_long_table(tmp_path):
    manifest = parse_manifest(_loan_document(tmp_path, methods=["cst_without", "cf"]))
    sweep = run_sweep(manifest, [1, 10, 20])
    assert list(sweep.columns) == SWEEP_COLUMNS
    assert len(sweep) == 6
    written = pd.read_csv(tmp_path / "sweep.csv")
    assert written["k"].tolist() == [1, 10, 20, 1, 10, 20]


def test_default_sweep_grid():
    ks = default_sweep_ks()
    assert ks[:4] == [1, 15, 30, 50]
    assert ks[-1] == 500


def test_csv_source_with_abducted_counterfactuals(tmp_path):
    d, _, _ = generate_loan(LoanScenarioParams.build(n=250, seed=4))
    d.to_csv(str(tmp_path / "loan.csv"))
    document = {
        "dataset": {"path": "loan.csv"},
        "schema_path": config.LOAN_SCHEMA_PATH,
        "scm_spec_path": config.LOAN_SCM_SPEC_PATH,
        "classifier": {"kind": "loan_linear_threshold", "weights": {"AnnualSalary": 1, "AccountBalance": 5},
                       "threshold": 225000},
        "methods": ["cst_with", "cf"],
        "protected": ["Gender"],
        "k": [10],
        "output_dir": "out",
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    manifest = load_manifest(str(path))
    assert manifest.dataset.path == str(tmp_path / "loan.csv")
    assert manifest.output_dir == str(tmp_path / "out")
    summary = run_audit(manifest)
    assert summary["method"].tolist() == ["cst_with", "cf"]


def test_school_multiple_and_intersectional(tmp_path):
    base = {
        "dataset": {"generator": "law_school", "params": {"n": 1500}},
        "methods": ["cst_without", "st"],
        "protected": ["Race", "Gender"],
        "k": [10],
        "seed": 5,
    }
    multiple = run_audit(parse_manifest({**base, "mode": "multiple", "output_dir": str(tmp_path / "m")}))
    intersectional = run_audit(parse_manifest({**base, "mode": "intersectional", "output_dir": str(tmp_path / "i")}))
    assert multiple["mode"].unique().tolist() == ["multiple"]
    assert intersectional["mode"].unique().tolist() == ["intersectional"]
    records = read_jsonl(str(tmp_path / "i" / "reports" / "cst_without_k10.jsonl"))
    assert {r["attribute"] for r in records} == {"Race_x_Gender"}


@pytest.mark.parametrize("fields", [
    {"counterfactuals": "ground_truth", "dataset": {"path": "x.csv"}, "schema_path": "s.json",
     "classifier": {"kind": "loan_linear_threshold", "weights": {"X": 1}, "threshold": 0}},
    {"dataset": {"path": "x.csv"}, "schema_path": "s.json", "counterfactuals": "abducted"},
    {"protected": ["Gender", "Race"]},
    {"k": []},
    {"alpha": 0.7},
    {"unknown_field": 1},
    {"dataset": {"generator": "loan", "path": "x.csv"}},
])
def test_invalid_manifests(tmp_path, fields):
    with pytest.raises(ManifestError):
        parse_manifest(_loan_document(tmp_path, **fields))


def test_overrides_replace_manifest_fields(tmp_path):
    manifest = parse_manifest(_loan_document(tmp_path), k=(7,), alpha=None, methods=("st",), output_dir="elsewhere")
    assert manifest.k == (7,)
    assert manifest.alpha == 0.05
    assert manifest.methods == ("st",)
    assert manifest.output_dir == "elsewhere"


def test_parameter_hash_tracks_parameters_only(tmp_path):
    first = parse_manifest(_loan_document(tmp_path))
    moved = parse_manifest(_loan_document(tmp_path / "other"))
    changed = parse_manifest(_loan_document(tmp_path, alpha=0.01))
    assert first.parameter_hash() == moved.parameter_hash()
    assert first.parameter_hash() != changed.parameter_hash()


def test_builtin_manifests_parse():
    for name in ("loan.json", "law_school_multiple.json", "law_school_intersectional.json", "law_school_race.json"):
        manifest = load_manifest(os.path.join(config.MANIFEST_DIR, name))
        assert os.path.isabs(manifest.output_dir)
    assert load_manifest(config.LOAN_MANIFEST_PATH).k == (15, 30, 50, 100, 250)


def test_manifest_json_schema_lists_every_field():
    documented = set(load_manifest_json_schema()["properties"])
    fields = {info.alias or name for name, info in RunManifest.model_fields.items()}
    assert documented == fields


def test_summarize_records_without_complainants():
    row = summarize_records([], "st", "multiple", 15)
    assert row == {"method": "st", "mode": "multiple", "k": 15, "detected": 0, "detected_pct": 0.0,
                   "significant": 0, "significant_pct": 0.0, "avg_delta_p": 0.0}
    with pytest.raises(ManifestError):
        summarize_records([])


def test_audit_with_empty_intersection_writes_zero_rows(tmp_path):
    # 非白人女性的聯合機率近乎 0，多重模式沒有任何申訴人
    params = {"n": 1000, "p_nonwhite": 0.02, "p_female": 0.02, "p_nonwhite_female": 1e-9}
    manifest = parse_manifest({
        "dataset": {"generator": "law_school", "params": params},
        "methods": ["st"],
        "mode": "multiple",
        "protected": ["Race", "Gender"],
        "k": [5, 15],
        "seed": 2,
        "output_dir": str(tmp_path),
    })
    summary = run_audit(manifest)
    assert summary["k"].tolist() == [5, 15]
    assert (summary["detected"] == 0).all()
    assert (summary["detected_pct"] == 0.0).all()
    assert (summary["avg_delta_p"] == 0.0).all()
    assert read_jsonl(str(tmp_path / "reports" / "st_k5.jsonl")) == []
    regenerated = report(str(tmp_path))
    pd.testing.assert_frame_equal(regenerated.reset_index(drop=True), summary.reset_index(drop=True))
