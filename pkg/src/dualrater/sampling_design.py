"""Choosing which inputs to evaluate at all.

Given a base input distribution and the per-input second-moment profile
of the estimator's increments, the variance-minimizing sampling
distribution reweights each input proportionally to the square root of
that profile.  Estimates drawn under the reweighted distribution carry
the likelihood ratio back to the original one, so they stay unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policies import Policy

__all__ = ["InputDesign", "optimal_input_distribution", "nu_of_x"]


@dataclass
class InputDesign:
    """Reweighted input-sampling table over a discrete support."""

    labels: np.ndarray
    p: np.ndarray
    nu: np.ndarray
    q_star: np.ndarray

    @property
    def likelihood_ratio(self) -> np.ndarray:
        """dP/dQ per support point, for reweighting increments."""
        return self.p / self.q_star


def optimal_input_distribution(
    p: np.ndarray,
    nu: np.ndarray,
    labels: np.ndarray | None = None,
) -> InputDesign:
    """Variance-minimizing input distribution q*(x) = P(x) sqrt(nu(x)) / E_P[sqrt(nu)]."""
    p = np.asarray(p, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if p.shape != nu.shape or p.ndim != 1:
        raise ValueError("p and nu must be 1-d arrays of equal length")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError("p must be a probability mass function")
    if np.any(nu < 0):
        raise ValueError("nu must be nonnegative")
    if np.all(nu == 0):
        raise ValueError("nu is zero everywhere; no reweighting is defined")
    if np.any((p > 0) & (nu == 0)):
        raise ValueError("nu must be positive on the support of p")
    if labels is None:
        labels = np.arange(len(p))
    weights = p * np.sqrt(nu)
    q = weights / weights.sum()
    return InputDesign(labels=np.asarray(labels), p=p, nu=nu, q_star=q)


def nu_of_x(policy: Policy, e_h2: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-input increment second moment E[H^2 + (1/pi - 1)(H-G)^2 | x].

    ``e_h2`` is the conditional second moment of the strong rating and
    ``u`` the conditional squared error of the weak one; the policy is
    evaluated on ``u``.
    """
    e_h2 = np.asarray(e_h2, dtype=float)
    u = np.asarray(u, dtype=float)
    if e_h2.shape != u.shape:
        raise ValueError("e_h2 and u must have equal shapes")
    pi = policy.pi_for_u(u)
    if np.any(pi <= 0) or np.any(pi > 1):
        raise ValueError("policy produced values outside (0, 1]")
    return e_h2 + (1.0 / pi - 1.0) * u
