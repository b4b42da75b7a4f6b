# services/stattest_service.py

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from services.search_service import Neighborhood
from utils.exceptions import InvalidParameterError, UndefinedRateError


@dataclass(frozen=True)
class TestResult:
    """
    單一申訴人的檢定結果。負向歧視報告單側下界 `ci_one_sided_lo`，
    正向歧視報告單側上界 `ci_one_sided_hi`；另一端為無窮，以 None 表示。
    """
    __test__ = False

    complainant: int
    p_c: float
    p_t: float
    delta_p: float
    ci_one_sided_lo: Optional[float]
    ci_one_sided_hi: Optional[float]
    ci_two_sided: Tuple[float, float]
    m: int
    detected: bool
    significant: bool
    saturated: bool = False
    evaluable: bool = True
    y_hat: Optional[int] = None
    y_hat_cf: Optional[int] = None
    attribute: Optional[str] = None
    control_ids: Tuple[int, ...] = field(default=(), repr=False)
    test_ids: Tuple[int, ...] = field(default=(), repr=False)

    def to_record(self) -> dict:
        record = asdict(self)
        record.pop("control_ids")
        record.pop("test_ids")
        record["ci_two_sided"] = list(self.ci_two_sided)
        return record


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha <= 0.5:
        raise InvalidParameterError(f"alpha 必須落在 (0, 0.5]，收到 {alpha}")


def _check_tau(tau: float) -> None:
    if not -1 <= tau <= 1:
        raise InvalidParameterError(f"tau 必須落在 [-1, 1]，收到 {tau}")


def z_quantile(alpha: float) -> float:
    """標準常態的上 α 分位數 z_α。"""
    _check_alpha(alpha)
    return float(norm.ppf(1.0 - alpha))


def negative_rate(group: Neighborhood, decisions: pd.Series, include_center: bool = False,
                  center_outcome: Optional[int] = None) -> float:
    """
    群組中負向決策 (ŷ=0) 的比例；`include_center` 時把搜尋中心的結果也算進分子與分母 (k+1)。
    分母為實際成員數，搜尋空間不足 k 時亦然。
    """
    negatives = int((decisions.loc[group.members].to_numpy() == 0).sum()) if len(group) else 0
    size = len(group)
    if include_center:
        if center_outcome is None:
            raise InvalidParameterError("納入搜尋中心時必須提供中心的決策結果")
        negatives += int(center_outcome == 0)
        size += 1
    if size == 0:
        raise UndefinedRateError("群組為空，負向決策比例無定義")
    return negatives / size


def half_width(p_c: float, p_t: float, m: int, alpha: float) -> float:
    """w_α = z_α · sqrt((p_c(1−p_c) + p_t(1−p_t)) / m)。"""
    if m < 1:
        raise InvalidParameterError(f"群組大小 m 必須 ≥ 1，收到 {m}")
    variance = (p_c * (1 - p_c) + p_t * (1 - p_t)) / m
    return z_quantile(alpha) * math.sqrt(max(variance, 0.0))


def one_sided_ci(p_c: float, p_t: float, m: int, alpha: float) -> float:
    """單側信賴區間 [Δp − w_α, +∞) 的下界。"""
    return (p_c - p_t) - half_width(p_c, p_t, m, alpha)


def one_sided_upper(p_c: float, p_t: float, m: int, alpha: float) -> float:
    """正向歧視所用的單側信賴區間 (−∞, Δp + w_α] 的上界。"""
    return (p_c - p_t) + half_width(p_c, p_t, m, alpha)


def two_sided_ci(p_c: float, p_t: float, m: int, alpha: float) -> Tuple[float, float]:
    """[Δp − w_{α/2}, Δp + w_{α/2}]，兩端截在 [−1, 1]。"""
    delta_p = p_c - p_t
    width = half_width(p_c, p_t, m, alpha / 2)
    return float(np.clip(delta_p - width, -1.0, 1.0)), float(np.clip(delta_p + width, -1.0, 1.0))


def decide(delta_p: float, ci_lo: float, tau: float) -> Tuple[bool, bool]:
    """回傳 (detected, significant)：Δp > τ 即偵測到，且下界 > τ 才算顯著。"""
    _check_tau(tau)
    detected = delta_p > tau
    return detected, detected and ci_lo > tau


def decide_positive(delta_p: float, p_c: float, p_t: float, m: int, alpha: float, tau: float) -> Tuple[bool, bool]:
    """正向歧視：Δp < τ 即偵測到，且上界 Δp + w_α < τ 才算顯著。"""
    _check_tau(tau)
    detected = delta_p < tau
    return detected, detected and one_sided_upper(p_c, p_t, m, alpha) < tau
