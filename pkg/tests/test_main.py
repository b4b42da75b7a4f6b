# tests/test_main.py

import json

import pandas as pd
import pytest

import config
from app.main import build_parser, main


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("generated")
    assert main(["generate", "--scenario", "loan", "--n", "200", "--seed", "9", "--out", str(out)]) == 0
    return out


def test_generate_writes_dataset_noise_and_truth(generated):
    frame = pd.read_csv(generated / "dataset.csv")
    assert len(frame) == 200
    assert {"AnnualSalary", "AccountBalance", "Gender"} <= set(frame.columns)
    assert (generated / "noise.csv").exists()
    truth = json.loads((generated / "ground_truth_scm.json").read_text(encoding="utf-8"))
    assert truth


def test_fit_scm_and_cfgen(generated, tmp_path):
    common = ["--data", str(generated / "dataset.csv"), "--schema", config.LOAN_SCHEMA_PATH,
              "--scm", config.LOAN_SCM_SPEC_PATH, "--out", str(tmp_path)]
    assert main(["fit-scm", *common]) == 0
    assert (tmp_path / "fitted_scm.json").exists()
    assert main(["cfgen", *common, "--attr", "Gender", "--classifier", "loan"]) == 0
    cf = pd.read_csv(tmp_path / "counterfactual.csv")
    factual = pd.read_csv(generated / "dataset.csv")
    assert len(cf) == int((factual["Gender"] == "female").sum())


def test_audit_with_overrides(generated, tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({
        "dataset": {"path": str(generated / "dataset.csv")},
        "schema_path": config.LOAN_SCHEMA_PATH,
        "scm_spec_path": config.LOAN_SCM_SPEC_PATH,
        "classifier": {"kind": "loan_linear_threshold", "weights": {"AnnualSalary": 1, "AccountBalance": 5},
                       "threshold": 225000},
        "protected": ["Gender"],
    }), encoding="utf-8")
    out = tmp_path / "out"
    code = main(["audit", "--manifest", str(manifest), "--k", "5", "--method", "cst_without", "st",
                 "--alpha", "0.1", "--out", str(out)])
    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    assert summary["method"].tolist() == ["cst_without", "st"]
    assert summary["k"].tolist() == [5, 5]
    assert main(["report", "--out", str(out)]) == 0


def test_invalid_manifest_writes_error_record(tmp_path, capsys):
    manifest = tmp_path / "bad.json"
    manifest.write_text(json.dumps({"dataset": {"generator": "loan"}, "protected": []}), encoding="utf-8")
    out = tmp_path / "out"
    assert main(["audit", "--manifest", str(manifest), "--out", str(out)]) == 1
    record = json.loads((out / "error.json").read_text(encoding="utf-8"))
    assert record["error"] == "ManifestError"
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ManifestError"


def test_unreadable_dataset_reports_load_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("AnnualSalary,AccountBalance,Gender,LoanApproval\n1,2,female,1\n3,x,male,0\n", encoding="utf-8")
    code = main(["fit-scm", "--data", str(bad), "--schema", config.LOAN_SCHEMA_PATH,
                 "--scm", config.LOAN_SCM_SPEC_PATH, "--out", str(tmp_path)])
    assert code == 1
    record = json.loads((tmp_path / "error.json").read_text(encoding="utf-8"))
    assert record["error"] == "DataLoadError"


def test_parser_rejects_unknown_method():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["audit", "--manifest", "m.json", "--method", "oracle"])
