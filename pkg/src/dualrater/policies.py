"""Cost-optimal annotation policies.

Four policy kinds are supported: ``base`` always buys the strong rating,
``random`` buys it at a fixed optimal rate, ``active`` buys it with
probability proportional to the square root of the per-input uncertainty
(clipped to 1 above a threshold), and ``oracle`` is the active rule fed
the realized squared disagreement instead of an uncertainty estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import P_MIN, RaterCosts, Sample, SampleBlock

__all__ = [
    "PolicyParams",
    "Policy",
    "optimal_random_rate",
    "optimal_random_rate_integer",
    "feasible_step_range",
    "gamma_star",
    "default_tau_grid",
    "optimize_tau",
    "policy_objective",
    "expected_stop_time",
    "make_policy",
]

POLICY_KINDS = ("base", "random", "active", "oracle")


def _weighted_quantile(values: np.ndarray, levels: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if weights is None:
        weights = np.full(values.shape, 1.0 / len(values))
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = np.asarray(weights, dtype=float)[order]
    cum = np.cumsum(w) - 0.5 * w
    cum /= w.sum()
    return np.interp(levels, cum, v)


@dataclass
class PolicyParams:
    """Distributional quantities a policy optimization needs.

    ``u_values`` (with optional probabilities ``u_weights``) represent
    the law of the conditional squared error U; ``mse`` defaults to its
    mean but may be pinned separately when estimated from a different
    statistic.
    """

    var_h: float
    costs: RaterCosts
    u_values: np.ndarray
    u_weights: np.ndarray | None = None
    mse: float | None = None

    def __post_init__(self) -> None:
        self.u_values = np.asarray(self.u_values, dtype=float)
        if self.u_values.ndim != 1 or len(self.u_values) == 0:
            raise ValueError("u_values must be a nonempty 1-d array")
        if np.any(self.u_values < 0) or not np.all(np.isfinite(self.u_values)):
            raise ValueError("u_values must be finite and nonnegative")
        if self.var_h < 0:
            raise ValueError(f"var_h must be nonnegative, got {self.var_h}")
        if self.u_weights is not None:
            w = np.asarray(self.u_weights, dtype=float)
            if w.shape != self.u_values.shape or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("u_weights must be nonnegative and match u_values")
            self.u_weights = w / w.sum()
        if self.mse is not None and self.mse < 0:
            raise ValueError(f"mse must be nonnegative, got {self.mse}")

    def mean(self, values: np.ndarray) -> float:
        """Expectation of per-u values under the carried U law."""
        if self.u_weights is None:
            return float(np.mean(values))
        return float(np.dot(self.u_weights, values))

    @property
    def mse_value(self) -> float:
        if self.mse is not None:
            return self.mse
        return self.mean(self.u_values)

    def policy_values(self, policy: "Policy") -> np.ndarray:
        return policy.pi_for_u(self.u_values)


@dataclass(frozen=True)
class Policy:
    """An annotation policy mapping inputs to strong-rater probabilities.

    Active policies evaluate ``min(gamma * sqrt(u), 1)`` on the sample's
    uncertainty field; the oracle variant uses the realized squared
    disagreement instead.  Every evaluation is clamped to [p_min, 1].
    """

    kind: str
    p: float | None = None
    gamma: float | None = None
    tau: float | None = None
    p_min: float = P_MIN

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "base" and self.p not in (None, 1.0):
            raise ValueError("base policy has p = 1")
        if self.kind == "random":
            if self.p is None or not (0.0 < self.p <= 1.0):
                raise ValueError(f"random policy needs p in (0, 1], got {self.p}")
        if self.kind in ("active", "oracle"):
            if self.gamma is None or self.gamma <= 0:
                raise ValueError("active policy needs gamma > 0")
            if self.tau is not None and self.tau <= 0:
                raise ValueError("tau must be positive")

    def _clamp(self, pi: np.ndarray) -> np.ndarray:
        return np.clip(pi, self.p_min, 1.0)

    def pi_for_u(self, u: np.ndarray) -> np.ndarray:
        """Evaluate the policy on raw uncertainty values."""
        u = np.asarray(u, dtype=float)
        if self.kind == "base":
            return np.ones_like(u)
        if self.kind == "random":
            return self._clamp(np.full_like(u, self.p))
        return self._clamp(np.minimum(self.gamma * np.sqrt(u), 1.0))

    def pi_block(self, block: SampleBlock) -> np.ndarray:
        """Evaluate the policy on a sample block."""
        if self.kind == "oracle":
            h = np.asarray(block.h, dtype=float)
            if not np.all(np.isfinite(h)):
                raise ValueError("oracle policy requires strong ratings for every sample")
            return self.pi_for_u((h - block.g) ** 2)
        return self.pi_for_u(block.u)

    def pi(self, sample: Sample) -> float:
        block = SampleBlock(
            x_id=np.array([sample.x_id], dtype=object),
            g=np.array([sample.g], dtype=float),
            h=np.array([math.nan if sample.h is None else sample.h], dtype=float),
            u=np.array([sample.u_hat], dtype=float),
        )
        return float(self.pi_block(block)[0])

    def to_json(self) -> str:
        payload: dict = {"kind": self.kind, "p_min": self.p_min}
        if self.kind in ("base", "random"):
            payload["p"] = 1.0 if self.kind == "base" else self.p
        else:
            payload["gamma"] = self.gamma
            payload["tau"] = self.tau
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        payload = json.loads(text)
        kind = payload["kind"]
        if kind in ("base", "random"):
            return cls(kind=kind, p=payload.get("p"), p_min=payload.get("p_min", P_MIN))
        return cls(
            kind=kind,
            gamma=payload["gamma"],
            tau=payload.get("tau"),
            p_min=payload.get("p_min", P_MIN),
        )


def optimal_random_rate(params: PolicyParams) -> float:
    """Best fixed strong-rater rate for the carried moments.

    Returns ``sqrt((c_g / c_h) * mse / (var_h - mse))`` when the weak
    rater is accurate enough to help, 1 otherwise, clamped to
    [p_min, 1].
    """
    mse = params.mse_value
    var_h = params.var_h
    c = params.costs
    threshold = var_h * c.c_h / (c.c_h + c.c_g)
    if mse >= threshold:
        return 1.0
    rate = math.sqrt(c.ratio * mse / (var_h - mse))
    return min(max(rate, P_MIN), 1.0)


def feasible_step_range(costs: RaterCosts, budget: float) -> tuple[int, int]:
    """Integer step counts for which a budget-exhausting rate lies in (0, 1]."""
    k_lo = math.ceil(budget / (costs.c_g + costs.c_h) - 1e-9)
    k_hi = math.floor(budget / costs.c_g + 1e-9)
    if budget - k_hi * costs.c_g <= 0:
        k_hi -= 1
    k_lo = max(k_lo, 1)
    return k_lo, k_hi


def optimal_random_rate_integer(params: PolicyParams, budget: float) -> float:
    """Fixed rate that is optimal when the step count must be an integer.

    For each candidate step count ``k`` the budget-exhausting rate is
    ``(B - k c_g) / (k c_h)`` with objective ``V/k + c_h E / (B - k c_g)``
    (``V = var_h - mse``, ``E = mse``); candidates are the feasible-range
    endpoints, the rounded interior optimum, and the all-strong rate with
    its own step count.
    """
    c = params.costs
    e_term = params.mse_value
    v_term = params.var_h - e_term
    k_lo, k_hi = feasible_step_range(c, budget)
    if k_hi < k_lo:
        raise ValueError(f"no feasible integer step count for budget {budget}")

    def objective(k: int) -> float:
        return v_term / k + c.c_h * e_term / (budget - k * c.c_g)

    candidates = {k_lo, k_hi}
    if e_term > 0 and v_term > 0:
        k_c = budget / (c.c_g + math.sqrt(c.c_g * c.c_h * e_term / v_term))
        for k in (math.floor(k_c), math.ceil(k_c)):
            if k_lo <= k <= k_hi:
                candidates.add(int(k))

    # (objective, -p) ordering: ties go to the larger sampling rate.
    best_obj = math.inf
    best_p = None
    for k in sorted(candidates):
        obj = objective(k)
        p = (budget - k * c.c_g) / (k * c.c_h)
        p = min(max(p, P_MIN), 1.0)
        if obj < best_obj or (obj == best_obj and p > best_p):
            best_obj, best_p = obj, p
    k_one = math.floor(budget / (c.c_g + c.c_h) + 1e-9)
    if k_one >= 1:
        obj_one = (v_term + e_term) / k_one
        if obj_one < best_obj or (obj_one == best_obj and best_p < 1.0):
            best_obj, best_p = obj_one, 1.0
    return best_p


def gamma_star(tau: float, params: PolicyParams) -> float:
    """Optimal scaling factor for clipping threshold ``tau``.

    ``min(sqrt((c_g/c_h + P(U > tau^2)) / (Var(H) - E[U 1{U <= tau^2}])_+),
    1/tau)``; the positive-part guard falls back to ``1/tau`` when the
    denominator vanishes.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    u = params.u_values
    tau_sq = tau * tau
    above = params.mean((u > tau_sq).astype(float))
    below_mass = params.mean(u * (u <= tau_sq))
    denom = params.var_h - below_mass
    if denom <= 0:
        return 1.0 / tau
    return min(math.sqrt((params.costs.ratio + above) / denom), 1.0 / tau)


def _clip_objective(params: PolicyParams, pi: np.ndarray) -> float:
    # (c_h E[pi] + c_g) * (Var(H) + E[U (1/pi - 1)]), all from the U law
    c = params.costs
    mean_pi = params.mean(pi)
    spread = params.var_h + params.mean(params.u_values * (1.0 / pi - 1.0))
    return (c.c_h * mean_pi + c.c_g) * spread


def _clip_policy_values(params: PolicyParams, gamma: float) -> np.ndarray:
    pi = np.minimum(gamma * np.sqrt(params.u_values), 1.0)
    return np.clip(pi, P_MIN, 1.0)


def default_tau_grid(params: PolicyParams, levels: int = 101) -> np.ndarray:
    """Threshold grid adapted to the carried U law.

    Quantiles of sqrt(U) at evenly spaced probability levels, plus one
    probe above the maximum and one below the smallest positive value so
    the all-strong and never-strong ends of the clipping range stay
    reachable for discrete laws.
    """
    s = np.sqrt(params.u_values)
    qs = _weighted_quantile(s, np.linspace(0.0, 1.0, levels), params.u_weights)
    grid = np.unique(qs[qs > 0])
    positive = s[s > 0]
    if len(positive) == 0:
        return np.array([1.0])
    grid = np.append(grid, positive.max() * 1.05)
    grid = np.append(grid, positive.min() / 2.0)
    return np.unique(grid)


def optimize_tau(
    params: PolicyParams,
    grid: np.ndarray | None = None,
    refine: int = 2,
) -> tuple[float, float]:
    """Grid-search the clipping threshold; returns ``(tau, gamma)``.

    The threshold objective is non-convex, so each grid point is scored
    directly and the winner's neighborhood is re-gridded ``refine``
    times.  Ties break toward the smallest threshold.
    """
    if grid is None:
        grid = default_tau_grid(params)
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 0:
        raise ValueError("tau grid must be nonempty")
    if np.any(grid <= 0):
        raise ValueError("tau grid must contain positive values only")
    grid = np.unique(grid)

    def score(tau: float) -> float:
        return _clip_objective(params, _clip_policy_values(params, gamma_star(tau, params)))

    best_tau = None
    best_j = math.inf
    for stage in range(refine + 1):
        for tau in grid:
            j = score(float(tau))
            if j < best_j:
                best_j, best_tau = j, float(tau)
        if stage < refine:
            idx = int(np.searchsorted(grid, best_tau))
            lo = grid[idx - 1] if idx > 0 else best_tau / 2.0
            hi = grid[idx + 1] if idx + 1 < len(grid) else best_tau * 2.0
            grid = np.unique(np.linspace(lo, hi, 33))
    return best_tau, gamma_star(best_tau, params)


def policy_objective(params: PolicyParams, policy: Policy) -> float:
    """Budget-free error constant of a policy.

    ``(c_h E[pi] + c_g) * (Var(H) - MSE + E[U / pi])``; dividing by the
    budget gives the estimator's error at the budget-exhausting step
    count.
    """
    c = params.costs
    pi = params.policy_values(policy)
    mean_pi = params.mean(pi)
    spread = params.var_h - params.mse_value + params.mean(params.u_values / pi)
    return (c.c_h * mean_pi + c.c_g) * spread


def expected_stop_time(params: PolicyParams, policy: Policy, budget: float) -> float:
    """Relaxed (non-integer) step count at which the budget runs out."""
    pi = params.policy_values(policy)
    return budget / (params.costs.c_h * params.mean(pi) + params.costs.c_g)


def make_policy(
    kind: str,
    params: PolicyParams,
    tau_grid: np.ndarray | None = None,
) -> Policy:
    """Construct a policy of the requested kind from the carried law.

    The oracle kind expects ``params`` built from realized squared
    disagreements (it needs complete strong ratings downstream, which
    ``pi_block`` enforces at evaluation time).
    """
    if kind == "base":
        return Policy(kind="base", p=1.0)
    if kind == "random":
        return Policy(kind="random", p=optimal_random_rate(params))
    if kind in ("active", "oracle"):
        tau, gamma = optimize_tau(params, grid=tau_grid)
        return Policy(kind=kind, gamma=gamma, tau=tau)
    raise ValueError(f"unknown policy kind {kind!r}")
