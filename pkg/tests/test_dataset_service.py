# tests/test_dataset_service.py

import numpy as np
import pandas as pd
import pytest

from services.dataset_service import (
    Dataset,
    FeatureSpec,
    ProtectedSpec,
    Schema,
    demographic_parity,
    derive_intersection_attribute,
    joint_acceptance_shares,
    load_dataset,
    negative_rate_gap,
    partition_search_spaces,
)
from utils.exceptions import DataLoadError, SchemaValidationError, UndefinedRateError, UnknownAttributeError

LOAN_HEADER = "AnnualSalary,AccountBalance,Gender,LoanApproval\n"


def _write(tmp_path, text: str, name: str = "loan.csv") -> str:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_dataset_codes_protected_labels(tmp_path, loan_schema):
    path = _write(tmp_path, LOAN_HEADER + "35000,7048,female,0\n100000,30000,male,1\n60000,9000,female,1\n")
    d = load_dataset(path, loan_schema)

    assert len(d) == 3
    assert d.row_ids.tolist() == [0, 1, 2]
    assert d.frame["Gender"].tolist() == [1, 0, 1]
    assert d.decisions.tolist() == [0, 1, 1]
    assert d.normalization_stats["AnnualSalary"] == (35000.0, 100000.0)
    assert d.normalization_stats["AccountBalance"] == (7048.0, 30000.0)
    record = d.record(0)
    assert record.x == (35000.0, 7048.0)
    assert record.a == {"Gender": 1}
    assert record.y_hat == 0


def test_load_dataset_empty_file_with_header(tmp_path, loan_schema):
    d = load_dataset(_write(tmp_path, LOAN_HEADER), loan_schema)
    assert len(d) == 0
    assert d.normalization_stats == {}


def test_load_dataset_rejects_unknown_protected_label(tmp_path, loan_schema):
    path = _write(tmp_path, LOAN_HEADER + "35000,7048,female,0\n40000,8000,2,1\n")
    with pytest.raises(DataLoadError) as e:
        load_dataset(path, loan_schema)
    assert e.value.row == 1
    assert e.value.column == "Gender"


def test_load_dataset_rejects_unparsable_cell(tmp_path, loan_schema):
    path = _write(tmp_path, LOAN_HEADER + "35000,abc,female,0\n")
    with pytest.raises(DataLoadError) as e:
        load_dataset(path, loan_schema)
    assert (e.value.row, e.value.column) == (0, "AccountBalance")


def test_load_dataset_rejects_non_binary_decision(tmp_path, loan_schema):
    path = _write(tmp_path, LOAN_HEADER + "35000,7048,female,2\n")
    with pytest.raises(DataLoadError) as e:
        load_dataset(path, loan_schema)
    assert e.value.column == "LoanApproval"


def test_load_dataset_reports_missing_column(tmp_path, loan_schema):
    path = _write(tmp_path, "AnnualSalary,Gender,LoanApproval\n35000,female,0\n")
    with pytest.raises(DataLoadError) as e:
        load_dataset(path, loan_schema)
    assert e.value.column == "AccountBalance"


def test_load_dataset_missing_file(tmp_path, loan_schema):
    with pytest.raises(DataLoadError):
        load_dataset(str(tmp_path / "nope.csv"), loan_schema)


def test_to_csv_writes_source_labels(tmp_path, loan_schema):
    path = _write(tmp_path, LOAN_HEADER + "35000,7048,female,0\n100000,30000,male,1\n")
    d = load_dataset(path, loan_schema)
    out = tmp_path / "out.csv"
    d.to_csv(str(out))
    reloaded = load_dataset(str(out), loan_schema)
    pd.testing.assert_frame_equal(reloaded.frame, d.frame)
    assert "female" in out.read_text(encoding="utf-8")


def test_schema_rejects_duplicate_names():
    with pytest.raises(SchemaValidationError):
        Schema.parse({"features": [{"name": "X"}], "protected": [{"name": "X"}], "decision": "Y"})


def test_schema_rejects_identical_labels():
    with pytest.raises(SchemaValidationError):
        Schema.parse({
            "features": [{"name": "X"}],
            "protected": [{"name": "A", "protected_value": "f", "non_protected_value": "f"}],
            "decision": "Y",
        })


def test_partition_on_four_row_toy(toy_schema):
    frame = pd.DataFrame({"X1": [1, 2, 3, 4], "X2": [1, 1, 1, 1], "A": [1, 0, 1, 0], "Y": [0, 0, 0, 0]})
    d = Dataset.from_frame(toy_schema, frame)
    control, test = partition_search_spaces(d, "A")
    assert control.tolist() == [0, 2]
    assert test.tolist() == [1, 3]


def test_partition_is_disjoint_and_covers_rows(make_toy):
    for seed in range(20):
        d = make_toy(50, seed)
        control, test = partition_search_spaces(d, "A")
        assert not set(control) & set(test)
        assert sorted(set(control) | set(test)) == d.row_ids.tolist()


def test_partition_all_protected_leaves_empty_test_space(toy_schema):
    frame = pd.DataFrame({"X1": [1, 2], "X2": [1, 2], "A": [1, 1], "Y": [0, 1]})
    _, test = partition_search_spaces(Dataset.from_frame(toy_schema, frame), "A")
    assert len(test) == 0


def test_partition_unknown_attribute(toy_dataset):
    with pytest.raises(UnknownAttributeError):
        partition_search_spaces(toy_dataset, "Race")


def _two_attribute_dataset(race, gender) -> Dataset:
    schema = Schema(
        features=(FeatureSpec(name="X"),),
        protected=(ProtectedSpec(name="R"), ProtectedSpec(name="G")),
        decision="Y",
    )
    n = len(race)
    frame = pd.DataFrame({"X": np.arange(n, dtype=float), "R": race, "G": gender, "Y": [0] * n})
    return Dataset.from_frame(schema, frame)


def test_intersection_is_conjunction():
    d = _two_attribute_dataset([1, 1, 0, 0], [1, 0, 1, 0])
    d_star = derive_intersection_attribute(d, ["R", "G"])
    assert d_star.frame["R_x_G"].tolist() == [1, 0, 0, 0]
    assert d_star.schema.protected_names == ["R", "G", "R_x_G"]
    pd.testing.assert_frame_equal(d_star.frame[d.schema.columns], d.frame)


def test_intersection_may_be_empty():
    d = _two_attribute_dataset([1, 0, 0], [0, 1, 0])
    assert derive_intersection_attribute(d, ["R", "G"], "RG").frame["RG"].sum() == 0


def test_intersection_rejects_duplicates():
    d = _two_attribute_dataset([1, 0], [1, 0])
    with pytest.raises(SchemaValidationError):
        derive_intersection_attribute(d, ["R", "R"])


def test_demographic_parity_direct_count(toy_schema):
    frame = pd.DataFrame({"X1": [1, 2, 3, 4], "X2": [1, 2, 3, 4], "A": [1, 1, 0, 0], "Y": [1, 0, 0, 0]})
    d = Dataset.from_frame(toy_schema, frame)
    assert demographic_parity(d, "A") == (0.5, 0.0)
    assert negative_rate_gap(d, "A") == pytest.approx(-0.5)


def test_demographic_parity_constant_outcome(toy_schema):
    frame = pd.DataFrame({"X1": [1, 2, 3], "X2": [1, 2, 3], "A": [1, 0, 1], "Y": [1, 1, 1]})
    assert demographic_parity(Dataset.from_frame(toy_schema, frame), "A") == (1.0, 1.0)


def test_demographic_parity_undefined_for_empty_group(toy_schema):
    frame = pd.DataFrame({"X1": [1, 2], "X2": [1, 2], "A": [1, 1], "Y": [1, 0]})
    with pytest.raises(UndefinedRateError):
        demographic_parity(Dataset.from_frame(toy_schema, frame), "A")


def test_joint_shares_sum_to_overall_acceptance(make_toy):
    d = make_toy(200, 3)
    protected, non_protected = joint_acceptance_shares(d, "A")
    assert protected + non_protected == pytest.approx(d.decisions.mean())
