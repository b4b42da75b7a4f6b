# tests/test_replication.py
# 以完整規模的內建情境重現各方法的偵測數與相對關係，執行時間較長：pytest -m slow

import os

import pytest

import config
from services.pipeline_service import load_manifest, read_jsonl, run_audit

pytestmark = pytest.mark.slow

KS = (15, 30, 50, 100, 250)

# 貸款情境在 k=15 的參考偵測數；CST w/o 的差異見 DESIGN.md
REFERENCE_K15 = {"cst_with": 420, "st": 55, "cf": 376}
CST_WITHOUT_K15 = 288


@pytest.fixture(scope="module")
def loan_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("loan_replication"))
    summary = run_audit(load_manifest(config.LOAN_MANIFEST_PATH, output_dir=out))
    return summary.set_index(["method", "k"]), out


@pytest.fixture(scope="module")
def loan_positive(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("loan_positive"))
    summary = run_audit(load_manifest(config.LOAN_MANIFEST_PATH, direction="positive", output_dir=out))
    return summary.set_index(["method", "k"])


def _detected_ids(out: str, method: str, k: int) -> set:
    records = read_jsonl(os.path.join(out, "reports", f"{method}_k{k}.jsonl"))
    return {r["complainant"] for r in records if r["detected"]}


def test_reference_counts_at_k15(loan_run):
    summary, _ = loan_run
    for method, reference in REFERENCE_K15.items():
        detected = summary.loc[(method, 15), "detected"]
        assert 0.85 * reference <= detected <= 1.15 * reference, method
    assert summary.loc[("cst_without", 15), "detected"] >= 0.85 * CST_WITHOUT_K15


def test_cst_finds_more_than_situation_testing(loan_run):
    summary, _ = loan_run
    for k in KS:
        assert summary.loc[("cst_without", k), "detected"] > summary.loc[("st", k), "detected"]


def test_situation_testing_cases_are_cst_cases(loan_run):
    _, out = loan_run
    assert _detected_ids(out, "st", 15) <= _detected_ids(out, "cst_without", 15)


def test_centers_never_reduce_detection(loan_run):
    summary, _ = loan_run
    for k in KS:
        assert summary.loc[("cst_with", k), "detected"] >= summary.loc[("cst_without", k), "detected"]
        with_sig = summary.loc[("cst_with", k), "significant"]
        without_sig = summary.loc[("cst_without", k), "significant"]
        assert abs(with_sig - without_sig) <= 0.02 * without_sig


def test_counterfactual_fairness_is_constant_in_k(loan_run):
    summary, _ = loan_run
    assert {summary.loc[("cf", k), "detected"] for k in KS} == {summary.loc[("cf", 15), "detected"]}


def test_counterfactual_cases_are_cst_with_cases(loan_run):
    _, out = loan_run
    for k in KS:
        assert _detected_ids(out, "cf", k) <= _detected_ids(out, "cst_with", k)


def test_significant_never_exceeds_detected(loan_run):
    summary, _ = loan_run
    assert (summary["significant"] <= summary["detected"]).all()


def test_positive_direction_only_situation_testing_detects(loan_positive):
    for k in KS:
        for method in ("cst_without", "cst_with", "cf"):
            assert loan_positive.loc[(method, k), "detected"] == 0, (method, k)
        assert loan_positive.loc[("st", k), "detected"] > 0


def test_intersectional_finds_more_than_multiple(tmp_path_factory):
    counts = {}
    for mode in ("multiple", "intersectional"):
        out = str(tmp_path_factory.mktemp(f"school_{mode}"))
        path = os.path.join(config.MANIFEST_DIR, f"law_school_{mode}.json")
        summary = run_audit(load_manifest(path, methods=("cst_without",), output_dir=out))
        counts[mode] = dict(zip(summary["k"], summary["detected"]))
    for k in KS:
        assert counts["intersectional"][k] > counts["multiple"][k], k
