"""Estimating policy parameters from annotated data.

Two estimation routes feed the policy optimizers: a fully annotated
burn-in block collected at the start of a trial, or a separate annotated
dataset whose parameters transfer to the evaluation data.  Both
calibrate the weak score with Platt scaling when the strong rating is
binary.  A trial's estimate can afterwards be power-tuned (weak ratings
rescaled by a variance-minimizing multiplier) and merged with the
burn-in mean through an inverse-variance-weighted average.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import RaterCosts, Sample, SampleBlock, TrialRecord, error_of_policy
from .policies import Policy, PolicyParams, expected_stop_time

__all__ = [
    "PlattModel",
    "platt_fit",
    "CalibratedSource",
    "annotated_params",
    "BurnInEstimate",
    "estimate_params_burnin",
    "inverse_variance_combine",
    "combine_with_burnin",
    "power_tune_lambda",
]

_LOGIT_CLIP = 1e-6


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(g: np.ndarray) -> np.ndarray:
    g = np.clip(np.asarray(g, dtype=float), _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
    return np.log(g / (1.0 - g))


@dataclass(frozen=True)
class PlattModel:
    """Logistic recalibration of a probability-like weak score."""

    a: float
    b: float

    def predict(self, g: np.ndarray) -> np.ndarray:
        """Calibrated probability sigmoid(a * logit(g) + b)."""
        return _sigmoid(self.a * _logit(g) + self.b)

    def to_json(self) -> str:
        return json.dumps({"a": self.a, "b": self.b})

    @classmethod
    def from_json(cls, text: str) -> "PlattModel":
        payload = json.loads(text)
        return cls(a=float(payload["a"]), b=float(payload["b"]))


def platt_fit(g: np.ndarray, h: np.ndarray, tol: float = 1e-8, max_iter: int = 100) -> PlattModel:
    """Fit a PlattModel by maximizing the binary log-likelihood of h.

    Damped Newton iterations on the logit scale of g; converges when the
    mean-gradient norm drops below ``tol``.  Labels enter through Platt's
    smoothed targets (n+1)/(n+2) and 1/(n+2), which keeps the optimum
    finite when the classes are separable.  Raises on one-class labels or
    if the iteration cap is hit.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if g.shape != h.shape or g.ndim != 1:
        raise ValueError("g and h must be 1-d arrays of equal length")
    if not np.all((h == 0) | (h == 1)):
        raise ValueError("h must be binary for Platt scaling")
    if h.min() == h.max():
        raise ValueError("Platt scaling needs both label classes")

    s = _logit(g)
    n = len(s)
    n_pos = float(h.sum())
    t = np.where(h == 1.0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n - n_pos + 2.0))
    p_bar = float(h.mean())
    a, b = 0.0, math.log(p_bar / (1.0 - p_bar))

    def nll(a_: float, b_: float) -> float:
        z = a_ * s + b_
        # log(1 + exp(z)) - t z, computed stably
        return float(np.sum(np.logaddexp(0.0, z) - t * z))

    current = nll(a, b)
    for _ in range(max_iter):
        q = _sigmoid(a * s + b)
        grad_a = float(np.dot(q - t, s)) / n
        grad_b = float(np.sum(q - t)) / n
        if math.hypot(grad_a, grad_b) < tol:
            return PlattModel(a=a, b=b)
        w = q * (1.0 - q)
        haa = float(np.dot(w, s * s)) / n + 1e-12
        hbb = float(np.sum(w)) / n + 1e-12
        hab = float(np.dot(w, s)) / n
        det = haa * hbb - hab * hab
        step_a = (hbb * grad_a - hab * grad_b) / det
        step_b = (haa * grad_b - hab * grad_a) / det
        scale = 1.0
        for _ in range(30):
            cand = nll(a - scale * step_a, b - scale * step_b)
            if cand <= current:
                break
            scale *= 0.5
        # clipped logits reach +-13.8, which can leave the mean gradient
        # pinned at its float noise floor; a vanishing step means the
        # optimum is attained to machine precision
        if scale * math.hypot(step_a, step_b) < 1e-12 * (1.0 + abs(a) + abs(b)):
            return PlattModel(a=a, b=b)
        a -= scale * step_a
        b -= scale * step_b
        current = nll(a, b)
    raise RuntimeError(f"Platt fit did not converge within {max_iter} iterations")


class CalibratedSource:
    """Stream wrapper that replaces the weak score with its calibrated
    version and the uncertainty with q(1-q).

    Wrapping the source (rather than the policy) keeps the estimator, the
    policy, and the estimated parameters all consistent with the same
    calibrated weak rating.
    """

    def __init__(self, source, platt: PlattModel):
        self.source = source
        self.platt = platt

    def draw_block(self, n: int, rng: np.random.Generator) -> SampleBlock:
        block = self.source.draw_block(n, rng)
        q = self.platt.predict(block.g)
        return SampleBlock(x_id=block.x_id, g=q, h=block.h, u=q * (1.0 - q))


def _is_binary(h: np.ndarray) -> bool:
    return bool(np.all((h == 0) | (h == 1)) and h.min() != h.max())


def annotated_params(
    g: np.ndarray,
    h: np.ndarray,
    u_hat: np.ndarray | None,
    costs: RaterCosts,
) -> tuple[PolicyParams, PlattModel | None]:
    """Policy parameters from a fully annotated sample.

    Binary strong ratings get a Platt-calibrated weak score; the
    uncertainty sample is then q(1-q) of the calibrated score.
    Non-binary ratings skip calibration and fall back to the provided
    per-sample uncertainty estimates.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if len(h) < 2:
        raise ValueError("need at least two annotated samples")
    if not np.all(np.isfinite(h)):
        raise ValueError("every annotated sample must carry a strong rating")
    var_h = float(np.var(h, ddof=1))
    if _is_binary(h):
        platt = platt_fit(g, h)
        q = platt.predict(g)
        mse = float(np.mean((h - q) ** 2))
        u = q * (1.0 - q)
    else:
        platt = None
        mse = float(np.mean((h - g) ** 2))
        if u_hat is None:
            raise ValueError("non-binary ratings need per-sample uncertainty estimates")
        u = np.asarray(u_hat, dtype=float)
    return PolicyParams(var_h=var_h, costs=costs, u_values=u, mse=mse), platt


@dataclass
class BurnInEstimate:
    """Everything the burn-in block contributes: parameters and a mean."""

    n_b: int
    theta_burn: float
    var_burn: float
    params: PolicyParams
    platt: PlattModel | None

    def __post_init__(self) -> None:
        if self.n_b < 2:
            raise ValueError(f"burn-in needs at least 2 samples, got {self.n_b}")
        if self.var_burn < 0:
            raise ValueError("var_burn must be nonnegative")


def estimate_params_burnin(
    burn: SampleBlock | Sequence[Sample],
    costs: RaterCosts,
) -> BurnInEstimate:
    """Estimate policy parameters from a fully annotated burn-in block."""
    if isinstance(burn, SampleBlock):
        g, h, u_hat = burn.g, burn.h, burn.u
    else:
        if any(s.h is None for s in burn):
            raise ValueError("burn-in samples must all carry strong ratings")
        g = np.array([s.g for s in burn], dtype=float)
        h = np.array([s.h for s in burn], dtype=float)
        u_hat = np.array([s.u_hat for s in burn], dtype=float)
    params, platt = annotated_params(g, h, u_hat, costs)
    n_b = len(h)
    return BurnInEstimate(
        n_b=n_b,
        theta_burn=float(np.mean(h)),
        var_burn=params.var_h / n_b,
        params=params,
        platt=platt,
    )


def inverse_variance_combine(theta1: float, var1: float, theta2: float, var2: float) -> float:
    """Inverse-variance-weighted average of two unbiased estimates."""
    if var1 < 0 or var2 < 0:
        raise ValueError("variances must be nonnegative")
    if var1 + var2 == 0:
        raise ValueError("cannot combine two zero-variance estimates")
    return (var2 * theta1 + var1 * theta2) / (var1 + var2)


def combine_with_burnin(
    burn: BurnInEstimate,
    policy: Policy,
    budget: float,
    theta_pi: float,
) -> float:
    """Merge a trial estimate with the burn-in mean.

    Both variance plug-ins come from the burn-in block alone (the trial
    variance uses the burn-in-predicted stopping time), so the combination
    weights are independent of the trial draws and the merged estimate
    stays unbiased.
    """
    t_stop = expected_stop_time(burn.params, policy, budget)
    # the plug-in can dip below zero when the burn-in mse estimate exceeds
    # var_h plus the IPW term; weights only need to stay valid
    var_pi = max(error_of_policy(burn.params, policy, t_stop), 0.0)
    if burn.var_burn + var_pi == 0.0:
        return burn.theta_burn
    return inverse_variance_combine(burn.theta_burn, burn.var_burn, theta_pi, var_pi)


def power_tune_lambda(records: Iterable[TrialRecord]) -> float:
    """Plug-in multiplier for the weak rating, from a completed trace.

    ``sum((g^2 + (h g - g^2) xi / pi) (1/pi - 1)) / sum(g^2 (1/pi - 1))``.
    Raises when every step had pi = 1 (the caller falls back to 1).
    """
    num = 0.0
    den = 0.0
    for rec in records:
        g = rec.sample.g
        inv = 1.0 / rec.pi_x - 1.0
        term = g * g
        if rec.xi:
            term += (rec.sample.h * g - g * g) / rec.pi_x
        num += term * inv
        den += g * g * inv
    if den == 0.0:
        raise ValueError("power tuning undefined when pi was 1 at every step")
    return num / den
