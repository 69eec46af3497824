"""Controlled generators with independently tunable moments.

Both families expose the exact distributional quantities a policy needs
(variance of the strong rating, mean and variance of the conditional
squared error), so optimal policies can be computed in closed form and
checked against simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import RaterCosts, SampleBlock
from .policies import PolicyParams

__all__ = [
    "GaussianSpec",
    "BernoulliSpec",
    "SyntheticSource",
    "spec_from_config",
]

QUADRATURE_POINTS = 10_001


def _midpoint_levels(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


@dataclass(frozen=True)
class GaussianSpec:
    """Strong rating H ~ Normal(0, nu); U ~ Gamma with mean mu and
    variance eta; weak rating G = H + sqrt(U).

    The squared disagreement (h - g)^2 equals the drawn u exactly, so the
    per-sample uncertainty channel is an oracle here.  Note G sits above
    H by E[sqrt(U)] on average; the construction is reproduced as is.
    """

    nu: float
    mu: float
    eta: float

    def __post_init__(self) -> None:
        if self.nu <= 0 or self.mu <= 0 or self.eta < 0:
            raise ValueError(
                f"need nu > 0, mu > 0, eta >= 0; got ({self.nu}, {self.mu}, {self.eta})"
            )

    @property
    def theta_star(self) -> float:
        return 0.0

    def draw_u(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.eta == 0.0:
            return np.full(n, self.mu)
        shape = self.mu * self.mu / self.eta
        scale = self.eta / self.mu
        return rng.gamma(shape, scale, size=n)

    def draw_block(self, n: int, rng: np.random.Generator, start_id: int = 0) -> SampleBlock:
        h = rng.normal(0.0, math.sqrt(self.nu), size=n)
        u = self.draw_u(n, rng)
        g = h + np.sqrt(u)
        return SampleBlock(x_id=np.arange(start_id, start_id + n), g=g, h=h, u=u)

    def u_quadrature(self, m: int = QUADRATURE_POINTS) -> np.ndarray:
        """Deterministic inverse-CDF grid standing in for the U law."""
        if self.eta == 0.0:
            return np.array([self.mu])
        shape = self.mu * self.mu / self.eta
        scale = self.eta / self.mu
        return stats.gamma.ppf(_midpoint_levels(m), a=shape, scale=scale)

    def analytic_params(self, costs: RaterCosts) -> PolicyParams:
        return PolicyParams(
            var_h=self.nu, costs=costs, u_values=self.u_quadrature(), mse=self.mu
        )

    def oracle_params(self, costs: RaterCosts) -> PolicyParams:
        # realized (h - g)^2 is distributed exactly like U
        return self.analytic_params(costs)


@dataclass(frozen=True)
class BernoulliSpec:
    """Binary strong rating with variance nu; the weak rating flips it
    with probability U ~ Beta with mean mu and variance eta.

    The Beta parameters are kappa*mu and kappa*(1-mu) with
    kappa = mu(1-mu)/eta - 1, which requires eta < mu(1-mu) strictly;
    eta = 0 degenerates to the point mass U = mu.
    """

    nu: float
    mu: float
    eta: float

    def __post_init__(self) -> None:
        if not (0.0 < self.nu <= 0.25):
            raise ValueError(f"nu must lie in (0, 0.25], got {self.nu}")
        if not (0.0 < self.mu < 1.0):
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")
        cap = self.mu * (1.0 - self.mu)
        if self.eta < 0 or self.eta >= cap:
            raise ValueError(
                f"eta must lie in [0, mu(1-mu)) = [0, {cap}), got {self.eta}"
            )

    @property
    def p_one(self) -> float:
        return 0.5 + math.sqrt(0.25 - self.nu)

    @property
    def theta_star(self) -> float:
        return self.p_one

    @property
    def _kappa(self) -> float:
        return self.mu * (1.0 - self.mu) / self.eta - 1.0

    def draw_u(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.eta == 0.0:
            return np.full(n, self.mu)
        k = self._kappa
        return rng.beta(k * self.mu, k * (1.0 - self.mu), size=n)

    def draw_block(self, n: int, rng: np.random.Generator, start_id: int = 0) -> SampleBlock:
        h = (rng.random(n) < self.p_one).astype(float)
        u = self.draw_u(n, rng)
        flip = rng.random(n) < u
        g = np.where(flip, 1.0 - h, h)
        return SampleBlock(x_id=np.arange(start_id, start_id + n), g=g, h=h, u=u)

    def u_quadrature(self, m: int = QUADRATURE_POINTS) -> np.ndarray:
        if self.eta == 0.0:
            return np.array([self.mu])
        k = self._kappa
        return stats.beta.ppf(_midpoint_levels(m), a=k * self.mu, b=k * (1.0 - self.mu))

    def analytic_params(self, costs: RaterCosts) -> PolicyParams:
        return PolicyParams(
            var_h=self.nu, costs=costs, u_values=self.u_quadrature(), mse=self.mu
        )

    def oracle_params(self, costs: RaterCosts) -> PolicyParams:
        # realized (h - g)^2 is the flip indicator: a two-point law on {0, 1}
        return PolicyParams(
            var_h=self.nu,
            costs=costs,
            u_values=np.array([0.0, 1.0]),
            u_weights=np.array([1.0 - self.mu, self.mu]),
            mse=self.mu,
        )


class SyntheticSource:
    """Stream of i.i.d. draws from a spec, with running input ids."""

    def __init__(self, spec: GaussianSpec | BernoulliSpec):
        self.spec = spec
        self._next_id = 0

    def draw_block(self, n: int, rng: np.random.Generator) -> SampleBlock:
        block = self.spec.draw_block(n, rng, start_id=self._next_id)
        self._next_id += n
        return block


def spec_from_config(payload: dict) -> GaussianSpec | BernoulliSpec:
    """Build a generator spec from config keys (family, nu, mu, eta)."""
    family = str(payload.get("family", "")).lower()
    try:
        nu = float(payload["nu"])
        mu = float(payload["mu"])
        eta = float(payload["eta"])
    except KeyError as exc:
        raise ValueError(f"synthetic spec missing key {exc}") from exc
    if family == "gaussian":
        return GaussianSpec(nu=nu, mu=mu, eta=eta)
    if family == "bernoulli":
        return BernoulliSpec(nu=nu, mu=mu, eta=eta)
    raise ValueError(f"unknown synthetic family {family!r}")
