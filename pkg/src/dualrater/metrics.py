"""Comparison metrics for annotation policies.

The analytic workhorse is the budget-free error ratio: each policy's
cost-weighted error constant, divided pairwise.  Simulation output is
summarized as MSE-versus-budget curves from which effective budgets
(what the all-strong baseline would need to match a policy's error) and
cost savings are interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .policies import Policy, PolicyParams, policy_objective

__all__ = [
    "CurvePoint",
    "BudgetCurve",
    "EffectiveBudget",
    "error_ratio",
    "mse_over_trials",
    "bootstrap_ci",
    "effective_budget",
    "cost_savings",
]


@dataclass(frozen=True)
class CurvePoint:
    budget: float
    mse: float
    ci_low: float
    ci_high: float

    def __post_init__(self) -> None:
        if self.mse < 0:
            raise ValueError("mse must be nonnegative")
        if not (self.ci_low <= self.mse <= self.ci_high):
            raise ValueError("confidence interval must bracket the mse")


@dataclass
class BudgetCurve:
    """Per-policy MSE as a function of budget, with bootstrap bands."""

    policy: str
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self) -> None:
        budgets = [p.budget for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError("budgets must be strictly increasing")

    @property
    def budgets(self) -> np.ndarray:
        return np.array([p.budget for p in self.points])

    @property
    def mses(self) -> np.ndarray:
        return np.array([p.mse for p in self.points])


class EffectiveBudget(NamedTuple):
    budget: float
    saturated: bool


def _policy_j(params: PolicyParams, policy: Policy) -> float:
    # the all-strong baseline never queries the weak rater, so its
    # error constant drops the c_g term: c_h * Var(H)
    if policy.kind == "base":
        return params.costs.c_h * params.var_h
    return policy_objective(params, policy)


def error_ratio(policy1: Policy, policy2: Policy, params: PolicyParams) -> float:
    """Budget-free ratio of two policies' cost-weighted error constants."""
    num = _policy_j(params, policy1)
    den = _policy_j(params, policy2)
    if den == 0:
        raise ValueError("denominator policy has zero error constant")
    return num / den


def mse_over_trials(estimates: Sequence[float], theta_star: float) -> float:
    """Mean squared deviation of trial estimates from the target."""
    estimates = np.asarray(estimates, dtype=float)
    if len(estimates) == 0:
        raise ValueError("need at least one estimate")
    return float(np.mean((estimates - theta_star) ** 2))


def bootstrap_ci(
    estimates: Sequence[float],
    theta_star: float,
    level: float = 0.95,
    resamples: int = 2000,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the MSE statistic.

    Trials are the resampling unit; each resample recomputes the mean
    squared deviation from ``theta_star``.
    """
    estimates = np.asarray(estimates, dtype=float)
    n = len(estimates)
    if n < 2:
        raise ValueError("bootstrap needs at least two estimates")
    if rng is None:
        rng = np.random.default_rng()
    sq = (estimates - theta_star) ** 2
    idx = rng.integers(0, n, size=(resamples, n))
    stats = sq[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _pava_nonincreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators fit of a nonincreasing sequence."""
    values = list(-np.asarray(y, dtype=float))
    weights = [1.0] * len(values)
    counts = [1] * len(values)
    i = 0
    while i < len(values) - 1:
        if values[i] > values[i + 1]:
            merged = (values[i] * weights[i] + values[i + 1] * weights[i + 1]) / (
                weights[i] + weights[i + 1]
            )
            values[i] = merged
            weights[i] += weights[i + 1]
            counts[i] += counts[i + 1]
            del values[i + 1], weights[i + 1], counts[i + 1]
            if i > 0:
                i -= 1
        else:
            i += 1
    out = np.concatenate([np.full(c, v) for v, c in zip(values, counts)])
    return -out


def effective_budget(curve: BudgetCurve, mse_target: float) -> EffectiveBudget:
    """Budget at which the curve reaches ``mse_target``.

    Monte Carlo wiggle is removed with an isotonic (nonincreasing) fit,
    then the inverse is read off by linear interpolation in log-budget /
    log-MSE.  Targets outside the curve's range return the nearest
    endpoint with the saturation flag set.
    """
    if not curve.points:
        raise ValueError("empty curve")
    tiny = 1e-300
    log_b = np.log(curve.budgets)
    fit = _pava_nonincreasing(np.log(np.maximum(curve.mses, tiny)))
    target = math.log(max(mse_target, tiny))
    if target >= fit[0]:
        return EffectiveBudget(float(curve.budgets[0]), saturated=target > fit[0])
    if target <= fit[-1]:
        return EffectiveBudget(float(curve.budgets[-1]), saturated=target < fit[-1])
    # first index where the fitted value drops to or below the target
    i = int(np.argmax(fit <= target))
    if fit[i] == target:
        # land exactly on a knot; ties resolve to the cheapest budget
        i = int(np.argmax(fit == target))
        return EffectiveBudget(float(curve.budgets[i]), saturated=False)
    frac = (fit[i - 1] - target) / (fit[i - 1] - fit[i])
    log_budget = log_b[i - 1] + frac * (log_b[i] - log_b[i - 1])
    return EffectiveBudget(float(math.exp(log_budget)), saturated=False)


def cost_savings(curve_pi: BudgetCurve, curve_base: BudgetCurve, mse_target: float) -> float:
    """Budget the baseline needs beyond the policy to reach the target error."""
    return effective_budget(curve_base, mse_target).budget - effective_budget(
        curve_pi, mse_target
    ).budget
