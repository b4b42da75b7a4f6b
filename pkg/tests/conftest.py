# tests/conftest.py

import numpy as np
import pandas as pd
import pytest

from data.data_loader import load_builtin_schema
from model.synthetic_generator import LoanScenarioParams, SchoolScenarioParams, generate_loan, generate_school_scenario
from services.dataset_service import Dataset, FeatureSpec, ProtectedSpec, Schema


@pytest.fixture
def loan_schema() -> Schema:
    return load_builtin_schema("loan")


@pytest.fixture
def toy_schema() -> Schema:
    return Schema(
        features=(FeatureSpec(name="X1"), FeatureSpec(name="X2")),
        protected=(ProtectedSpec(name="A"),),
        decision="Y",
    )


@pytest.fixture
def toy_dataset(toy_schema) -> Dataset:
    """八筆資料：A=1 的列 0..3 分數偏低，A=0 的列 4..7 分數偏高。"""
    frame = pd.DataFrame({
        "X1": [1.0, 2.0, 3.0, 4.0, 1.5, 2.5, 3.5, 4.5],
        "X2": [10.0, 20.0, 30.0, 40.0, 15.0, 25.0, 35.0, 45.0],
        "A": [1, 1, 1, 1, 0, 0, 0, 0],
        "Y": [0, 0, 1, 0, 1, 1, 0, 1],
    })
    return Dataset.from_frame(toy_schema, frame)


@pytest.fixture
def make_toy(toy_schema):
    """依 seed 產生隨機的兩特徵資料集。"""
    def make(n: int, seed: int, p_protected: float = 0.4) -> Dataset:
        rng = np.random.default_rng(seed)
        frame = pd.DataFrame({
            "X1": rng.normal(0.0, 1.0, n),
            "X2": rng.normal(5.0, 2.0, n),
            "A": rng.binomial(1, p_protected, n),
            "Y": rng.binomial(1, 0.5, n),
        })
        return Dataset.from_frame(toy_schema, frame)

    return make


@pytest.fixture(scope="session")
def small_loan():
    """小規模貸款情境 (n=600)，回傳 (資料集, 雜訊表, 真實 SCM)。"""
    return generate_loan(LoanScenarioParams.build(n=600, seed=7))


@pytest.fixture(scope="session")
def small_school():
    """小規模法學院替代資料 (n=2000)，回傳 (資料集, 雜訊表, 真實 SCM)。"""
    return generate_school_scenario(SchoolScenarioParams.build(n=2000, seed=11))
