"""Sequential unbiased mean estimation with a weak and a strong rater.

Every step observes a cheap weak rating ``g`` and decides, with
probability ``pi(x)``, whether to also buy the expensive strong rating
``h``.  The per-step increment ``g + (h - g) * xi / pi(x)`` is unbiased
for ``E[H]`` for any policy with range (0, 1], and a trial keeps taking
steps until the next weak-rater charge would exceed the budget.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Protocol

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .policies import Policy, PolicyParams

__all__ = [
    "P_MIN",
    "RaterCosts",
    "Sample",
    "SampleBlock",
    "TrialRecord",
    "EstimatorState",
    "TrialResult",
    "active_increment",
    "error_of_policy",
    "cost_of_policy",
    "run_trial",
    "write_trace",
    "trial_stream",
]

# Floor applied to every policy evaluation so IPW weights stay finite.
P_MIN = 1e-6


@dataclass(frozen=True)
class RaterCosts:
    """Per-query prices of the two raters, in arbitrary cost units."""

    c_g: float
    c_h: float

    def __post_init__(self) -> None:
        if not (self.c_h > self.c_g > 0):
            raise ValueError(
                f"need c_h > c_g > 0, got c_g={self.c_g}, c_h={self.c_h}"
            )

    @property
    def ratio(self) -> float:
        """Cheap-to-expensive price ratio c_g / c_h."""
        return self.c_g / self.c_h


@dataclass(frozen=True)
class Sample:
    """One input with its weak rating and, when queried, its strong rating.

    ``u_hat`` is the (estimated) conditional squared error of the weak
    rater at this input; active policies sample proportionally to its
    square root.
    """

    x_id: object
    g: float
    h: float | None
    u_hat: float

    def __post_init__(self) -> None:
        if self.u_hat < 0:
            raise ValueError(f"u_hat must be nonnegative, got {self.u_hat}")


@dataclass
class SampleBlock:
    """Columnar batch of samples, the unit a source hands to the runner.

    ``h`` is always populated here; whether the trial pays for it is
    decided by the sampling indicator, not by the source.
    """

    x_id: np.ndarray
    g: np.ndarray
    h: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return len(self.g)


class SampleSource(Protocol):
    """Anything that can produce i.i.d. sample blocks on demand."""

    def draw_block(self, n: int, rng: np.random.Generator) -> SampleBlock: ...


@dataclass(frozen=True)
class TrialRecord:
    """One step of a trial trace."""

    sample: Sample
    pi_x: float
    xi: bool
    delta: float
    cumulative_cost: float

    def __post_init__(self) -> None:
        if not (0.0 < self.pi_x <= 1.0):
            raise ValueError(f"pi_x must lie in (0, 1], got {self.pi_x}")
        if self.xi and self.sample.h is None:
            raise ValueError("xi=True requires a strong rating on the sample")
        expected = active_increment(self.sample.g, self.sample.h, self.xi, self.pi_x)
        if not math.isclose(self.delta, expected, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"delta={self.delta} inconsistent with increment {expected}")


@dataclass
class EstimatorState:
    """Running accumulator of a budgeted trial."""

    budget: float
    t: int = 0
    sum_delta: float = 0.0
    spent: float = 0.0

    @property
    def estimate(self) -> float:
        if self.t < 1:
            raise ValueError("no steps taken yet")
        return self.sum_delta / self.t


@dataclass
class TrialResult:
    """Outcome of one budgeted trial.

    Besides the plain estimate, the result carries the sufficient
    statistics for re-weighting the weak rater after the fact: the
    estimate under multiplier ``lam`` is
    ``(lam * sum_g_keep + sum_h_scaled) / t``.
    """

    estimate: float
    t: int
    spent: float
    sum_g_keep: float
    sum_h_scaled: float
    lam_num: float
    lam_den: float
    records: list[TrialRecord] | None = None

    def tuned_estimate(self, lam: float) -> float:
        return (lam * self.sum_g_keep + self.sum_h_scaled) / self.t

    def power_lambda(self, fallback: float = 1.0) -> float:
        """Plug-in variance-minimizing multiplier; ``fallback`` when pi was 1 everywhere."""
        if self.lam_den == 0.0:
            return fallback
        return self.lam_num / self.lam_den


def active_increment(g: float, h: float | None, xi: bool, pi_x: float) -> float:
    """Unbiased per-step increment ``g + (h - g) * xi / pi_x``."""
    if not (0.0 < pi_x <= 1.0):
        raise ValueError(f"pi_x must lie in (0, 1], got {pi_x}")
    if not xi:
        return float(g)
    if h is None:
        raise ValueError("xi=True requires the strong rating h")
    return float(g + (h - g) / pi_x)


def error_of_policy(params: "PolicyParams", policy: "Policy", horizon: float) -> float:
    """Mean squared error of the estimator after ``horizon`` steps.

    Evaluates ``(Var(H) - MSE(H, G) + E[(H-G)^2 / pi(X)]) / T`` with the
    IPW expectation taken over the uncertainty distribution carried by
    ``params``.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    pi = params.policy_values(policy)
    ipw = params.mean(params.u_values / pi)
    return (params.var_h - params.mse_value + ipw) / horizon


def cost_of_policy(costs: RaterCosts, mean_pi: float, horizon: float) -> float:
    """Expected spend ``T * (c_h * E[pi] + c_g)`` after ``horizon`` steps."""
    if not (0.0 < mean_pi <= 1.0):
        raise ValueError(f"mean_pi must lie in (0, 1], got {mean_pi}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    return horizon * (costs.c_h * mean_pi + costs.c_g)


def _validate_pi(pi: np.ndarray) -> None:
    if not np.all(np.isfinite(pi)) or np.any(pi <= 0.0) or np.any(pi > 1.0):
        raise ValueError("policy produced values outside (0, 1]")


def run_trial(
    source: SampleSource,
    policy: "Policy",
    costs: RaterCosts,
    budget: float,
    rng: np.random.Generator,
    trace: bool = False,
) -> TrialResult:
    """Run one budgeted trial and return the estimate with its statistics.

    Each step first checks that another weak-rater charge fits in the
    budget, then pays ``c_g``, draws the sampling indicator, and pays
    ``c_h`` whenever the indicator comes up -- that last charge is always
    honored, so the final spend may exceed the budget by at most ``c_h``.

    Samples and indicators are drawn block-wise from ``rng`` (samples
    first, then indicators), which pins the trace for a given seed.
    """
    if budget < costs.c_g + costs.c_h:
        raise ValueError(
            f"budget {budget} cannot afford one fully annotated step "
            f"(c_g + c_h = {costs.c_g + costs.c_h})"
        )
    state = EstimatorState(budget=budget)
    kept: list[dict[str, np.ndarray]] = []
    sum_g_keep = 0.0
    sum_h_scaled = 0.0
    lam_num = 0.0
    lam_den = 0.0
    mean_step_cost = costs.c_g + costs.c_h  # refined from observed indicators

    while True:
        remaining = budget - state.spent
        n = int(math.ceil(1.15 * remaining / mean_step_cost)) + 32
        n = min(max(n, 16), 1 << 20)
        block = source.draw_block(n, rng)
        if len(block) == 0:
            if state.t == 0:
                raise ValueError("source produced no samples")
            break
        pi = policy.pi_block(block)
        _validate_pi(pi)
        xi = rng.random(len(block)) < pi

        step_cost = costs.c_g + costs.c_h * xi
        cum = state.spent + np.cumsum(step_cost)
        before = cum - step_cost
        unaffordable = before + costs.c_g > budget
        # stop at the first step the weak-rater charge no longer fits
        take = int(np.argmax(unaffordable)) if unaffordable.any() else len(block)
        if take == 0:
            break

        w = xi[:take] / pi[:take]
        g = block.g[:take]
        h = block.h[:take]
        delta = g + (h - g) * w
        inv = 1.0 / pi[:take] - 1.0

        state.t += take
        state.sum_delta += float(delta.sum())
        state.spent = float(cum[take - 1])
        sum_g_keep += float((g * (1.0 - w)).sum())
        sum_h_scaled += float((h * w).sum())
        lam_num += float(((g * g + (h * g - g * g) * w) * inv).sum())
        lam_den += float((g * g * inv).sum())
        if trace:
            kept.append(
                {
                    "x_id": block.x_id[:take],
                    "g": g,
                    "h": h,
                    "u": block.u[:take],
                    "pi": pi[:take],
                    "xi": xi[:take],
                    "delta": delta,
                    "cum": cum[:take],
                }
            )
        if take < len(block):
            break
        mean_step_cost = costs.c_g + costs.c_h * max(float(xi.mean()), 1e-3)

    records = None
    if trace:
        records = []
        t = 0
        for part in kept:
            for i in range(len(part["g"])):
                t += 1
                queried = bool(part["xi"][i])
                sample = Sample(
                    x_id=part["x_id"][i],
                    g=float(part["g"][i]),
                    h=float(part["h"][i]) if queried else None,
                    u_hat=float(part["u"][i]),
                )
                records.append(
                    TrialRecord(
                        sample=sample,
                        pi_x=float(part["pi"][i]),
                        xi=queried,
                        delta=float(part["delta"][i]),
                        cumulative_cost=float(part["cum"][i]),
                    )
                )

    return TrialResult(
        estimate=state.estimate,
        t=state.t,
        spent=state.spent,
        sum_g_keep=sum_g_keep,
        sum_h_scaled=sum_h_scaled,
        lam_num=lam_num,
        lam_den=lam_den,
        records=records,
    )


def write_trace(records: Iterable[TrialRecord], path) -> None:
    """Export a trial trace as CSV, one row per step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x_id", "g", "h", "xi", "pi_x", "delta", "cumulative_cost"])
        for t, rec in enumerate(records, start=1):
            writer.writerow(
                [
                    t,
                    rec.sample.x_id,
                    repr(rec.sample.g),
                    "" if rec.sample.h is None else repr(rec.sample.h),
                    int(rec.xi),
                    repr(rec.pi_x),
                    repr(rec.delta),
                    repr(rec.cumulative_cost),
                ]
            )


def trial_stream(seed: int, *scope: int | str) -> np.random.Generator:
    """Independent generator for one trial, derived from the master seed.

    String scope parts (policy names and the like) are hashed so that
    every (seed, scope) combination maps to a reproducible stream on any
    platform.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for part in scope:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
