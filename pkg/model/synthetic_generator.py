# model/synthetic_generator.py

import logging
from typing import Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import config
from data.data_loader import load_builtin_schema, load_builtin_scm_spec
from model.classifiers import Classifier, loan_classifier, school_classifier
from services.counterfactual_service import NoiseTable, predict
from services.dataset_service import Dataset
from services.scm_service import FittedScm
from utils.exceptions import InvalidParameterError

logger = logging.getLogger(__name__)

GeneratedScenario = Tuple[Dataset, NoiseTable, FittedScm]


def _validated(model: type, overrides: Mapping):
    try:
        return model.model_validate(dict(overrides))
    except ValidationError as e:
        raise InvalidParameterError(f"情境參數不合法: {e}") from e


class LoanScenarioParams(BaseModel):
    """
    貸款情境的資料生成參數：
    AnnualSalary ← salary_penalty·Poi(10)·A + U1，U1 = 10000·Poi(10)；
    AccountBalance ← 0.3·AnnualSalary + balance_penalty·χ²(4)·A + U2，U2 = 2500·N(0, 1)。
    """
    model_config = ConfigDict(frozen=True)

    n: int = Field(5000, ge=1)
    p_protected: float = Field(0.343, gt=0, lt=1)
    salary_penalty: float = -1500.0
    salary_penalty_rate: float = Field(10.0, gt=0)
    balance_penalty: float = -300.0
    balance_penalty_df: int = Field(4, ge=1)
    balance_salary_weight: float = 0.3
    u1_multiplier: float = Field(10000.0, gt=0)
    u1_rate: float = Field(10.0, gt=0)
    u2_scale: float = Field(2500.0, gt=0)
    threshold: float = 225000.0
    seed: int = config.settings.default_seed

    @classmethod
    def build(cls, **overrides) -> "LoanScenarioParams":
        return _validated(cls, overrides)


class SchoolScenarioParams(BaseModel):
    """
    法學院情境的替代資料 (非真實調查資料)：
    UGPA ← b_U + β1·R + λ1·G + U1，U1 ~ N(0, ugpa_noise_scale²)；
    LSAT ← exp{b_L + β2·R + λ2·G + U2}，U2 = lsat_noise_scale·(Poi(rate) − rate)。
    `target_acceptance` 設定時以二分法調整 b_L，使分類器的整體接受率接近目標值。
    """
    model_config = ConfigDict(frozen=True)

    n: int = Field(21790, ge=1)
    p_nonwhite: float = Field(0.161, gt=0, lt=1)
    p_female: float = Field(0.438, gt=0, lt=1)
    p_nonwhite_female: Optional[float] = Field(0.084, gt=0, lt=1)
    ugpa_intercept: float = 3.2
    ugpa_race: float = -0.35
    ugpa_gender: float = -0.02
    ugpa_noise_scale: float = Field(0.35, gt=0)
    lsat_intercept: float = 3.55
    lsat_race: float = -0.17
    lsat_gender: float = -0.04
    lsat_noise_scale: float = Field(0.025, gt=0)
    lsat_noise_rate: float = Field(20.0, gt=0)
    cutoff: float = 20.8
    target_acceptance: Optional[float] = Field(0.023, gt=0, lt=1)
    seed: int = config.settings.default_seed

    @model_validator(mode="after")
    def _check_joint(self) -> "SchoolScenarioParams":
        joint = self.p_nonwhite_female
        if joint is not None and not (joint <= min(self.p_nonwhite, self.p_female)
                                      and self.p_nonwhite + self.p_female - joint < 1):
            raise ValueError("p_nonwhite_female 與兩個邊際機率不相容")
        return self

    @classmethod
    def build(cls, **overrides) -> "SchoolScenarioParams":
        return _validated(cls, overrides)


def _assemble(truth: FittedScm, noise: NoiseTable, clf: Classifier, scenario: str) -> Dataset:
    schema = load_builtin_schema(scenario)
    values = predict(truth, noise, noise.row_ids)
    frame = values[schema.feature_names + schema.protected_names].copy()
    frame[schema.decision] = clf.predict(frame[schema.feature_names])
    return Dataset.from_frame(schema, frame.reset_index(drop=True))


def generate_loan(params: Optional[LoanScenarioParams] = None) -> GeneratedScenario:
    """
    產生貸款情境資料，並回傳 (資料集, 儲存所有外生抽樣的雜訊表, 真實 SCM)。
    抽樣順序固定為 A、Poi(10) 乘數、χ² 乘數、U1、U2，確保同一 seed 產生相同的資料。
    """
    p = params or LoanScenarioParams()
    logger.info(f"--- [Generator] 正在產生貸款情境資料 (n={p.n}, seed={p.seed}) ---")
    rng = np.random.default_rng(p.seed)
    a = rng.binomial(1, p.p_protected, size=p.n)
    salary_multiplier = rng.poisson(p.salary_penalty_rate, size=p.n)
    # χ²(df) 以 df 個標準常態平方和抽樣
    balance_multiplier = (rng.standard_normal((p.n, p.balance_penalty_df)) ** 2).sum(axis=1)
    u1 = p.u1_multiplier * rng.poisson(p.u1_rate, size=p.n)
    u2 = p.u2_scale * rng.standard_normal(p.n)

    spec = load_builtin_scm_spec("loan")
    truth = FittedScm.from_weights(spec, {
        "AnnualSalary": (0.0, {"Gender": p.salary_penalty * p.salary_penalty_rate}),
        "AccountBalance": (0.0, {"AnnualSalary": p.balance_salary_weight,
                                 "Gender": p.balance_penalty * p.balance_penalty_df}),
    })
    index = pd.RangeIndex(p.n, name="row_id")
    noise = NoiseTable(
        residuals=pd.DataFrame({"AnnualSalary": u1.astype(float), "AccountBalance": u2}, index=index),
        roots=pd.DataFrame({"Gender": a}, index=index),
        slopes={
            "AnnualSalary": pd.DataFrame({"Gender": p.salary_penalty * salary_multiplier}, index=index),
            "AccountBalance": pd.DataFrame({"Gender": p.balance_penalty * balance_multiplier}, index=index),
        },
        draws=pd.DataFrame({
            "A": a,
            "salary_poisson": salary_multiplier,
            "balance_chi2": balance_multiplier,
            "U1": u1,
            "U2": u2,
        }, index=index),
    )
    d = _assemble(truth, noise, loan_classifier(p.threshold), "loan")
    logger.info(f"--- ✅ [Generator] 貸款情境：受保護比例 {d.frame['Gender'].mean():.2%}，"
                f"整體接受率 {d.decisions.mean():.2%} ---")
    return d, noise, truth


def _school_roots(p: SchoolScenarioParams, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    race = rng.binomial(1, p.p_nonwhite, size=p.n)
    if p.p_nonwhite_female is None:
        return race, rng.binomial(1, p.p_female, size=p.n)
    p_female_given_nonwhite = p.p_nonwhite_female / p.p_nonwhite
    p_female_given_white = (p.p_female - p.p_nonwhite_female) / (1 - p.p_nonwhite)
    u = rng.random(p.n)
    gender = np.where(race == 1, u < p_female_given_nonwhite, u < p_female_given_white).astype(np.int64)
    return race, gender


def _calibrate_lsat_intercept(p: SchoolScenarioParams, race: np.ndarray, gender: np.ndarray,
                              ugpa: np.ndarray, u2: np.ndarray, clf: Classifier) -> float:
    """在儲存的抽樣上二分搜尋 b_L，使接受率最接近 target_acceptance (接受率對 b_L 單調遞增)。"""
    shift = p.lsat_race * race + p.lsat_gender * gender + u2

    def acceptance(intercept: float) -> float:
        lsat = np.exp(intercept + shift)
        return float(clf.predict(pd.DataFrame({"UGPA": ugpa, "LSAT": lsat})).mean())

    low, high = 0.0, 6.0
    for _ in range(60):
        mid = (low + high) / 2
        if acceptance(mid) < p.target_acceptance:
            low = mid
        else:
            high = mid
    logger.info(f"--- [Generator] LSAT 截距校準為 {high:.4f}，接受率 {acceptance(high):.2%} ---")
    return high


def generate_school_scenario(params: Optional[SchoolScenarioParams] = None) -> GeneratedScenario:
    """產生法學院替代資料，回傳 (資料集, 雜訊表, 真實 SCM)。"""
    p = params or SchoolScenarioParams()
    logger.info(f"--- [Generator] 正在產生法學院替代資料 (n={p.n}, seed={p.seed}) ---")
    rng = np.random.default_rng(p.seed)
    race, gender = _school_roots(p, rng)
    u1 = p.ugpa_noise_scale * rng.standard_normal(p.n)
    lsat_poisson = rng.poisson(p.lsat_noise_rate, size=p.n)
    u2 = p.lsat_noise_scale * (lsat_poisson - p.lsat_noise_rate)

    clf = school_classifier(p.cutoff)
    ugpa = p.ugpa_intercept + p.ugpa_race * race + p.ugpa_gender * gender + u1
    lsat_intercept = p.lsat_intercept
    if p.target_acceptance is not None:
        lsat_intercept = _calibrate_lsat_intercept(p, race, gender, ugpa, u2, clf)

    spec = load_builtin_scm_spec("law_school")
    truth = FittedScm.from_weights(spec, {
        "UGPA": (p.ugpa_intercept, {"Race": p.ugpa_race, "Gender": p.ugpa_gender}),
        "LSAT": (lsat_intercept, {"Race": p.lsat_race, "Gender": p.lsat_gender}),
    })
    index = pd.RangeIndex(p.n, name="row_id")
    noise = NoiseTable(
        residuals=pd.DataFrame({"UGPA": u1, "LSAT": u2}, index=index),
        roots=pd.DataFrame({"Race": race, "Gender": gender}, index=index),
        draws=pd.DataFrame({"R": race, "G": gender, "U1": u1, "lsat_poisson": lsat_poisson, "U2": u2}, index=index),
    )
    d = _assemble(truth, noise, clf, "law_school")
    logger.info(f"--- ✅ [Generator] 法學院替代資料：非白人 {d.frame['Race'].mean():.2%}，"
                f"女性 {d.frame['Gender'].mean():.2%}，接受率 {d.decisions.mean():.2%} ---")
    return d, noise, truth


def generate_school_standin(n: int = 21790, coefficients: Optional[Mapping[str, float]] = None,
                            seed: Optional[int] = None, **overrides) -> Dataset:
    """
    只回傳資料集的便利版本。`coefficients` 可覆寫 ugpa_intercept、ugpa_race、ugpa_gender、
    lsat_intercept、lsat_race、lsat_gender 等係數。
    """
    fields = {"n": n, **dict(coefficients or {}), **overrides}
    if seed is not None:
        fields["seed"] = seed
    d, _, _ = generate_school_scenario(SchoolScenarioParams.build(**fields))
    return d


def regenerate_rows(truth: FittedScm, noise: NoiseTable, row_ids) -> pd.DataFrame:
    """由儲存的外生抽樣重新計算指定列的節點值。"""
    return predict(truth, noise, row_ids)
