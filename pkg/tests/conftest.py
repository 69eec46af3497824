import numpy as np
import pytest

from dualrater import RaterCosts


@pytest.fixture
def costs() -> RaterCosts:
    return RaterCosts(c_g=1.0, c_h=4.0)


@pytest.fixture
def unit_costs() -> RaterCosts:
    """c_h normalized to one cost unit, cheap rater at a tenth."""
    return RaterCosts(c_g=0.1, c_h=1.0)


def three_sigma_mean(values: np.ndarray, target: float) -> tuple[float, float]:
    """(|mean - target|, 3 * standard error) for Monte Carlo mean checks."""
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / np.sqrt(len(values))
    return abs(float(values.mean()) - target), 3.0 * se
