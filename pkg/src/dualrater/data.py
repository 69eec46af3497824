"""Replay of precomputed rater outputs.

A replay file is a CSV with columns ``x_id,g,h`` and an optional
``u_hat`` column (defaulting to g(1-g) when the weak score is a
probability), plus an optional JSON sidecar recording the target mean.
Trials sample rows with replacement, so a stream never runs dry before
the budget does.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .calibration import PlattModel, annotated_params
from .core import RaterCosts, SampleBlock
from .policies import PolicyParams

__all__ = [
    "DataError",
    "ReplayDataset",
    "load_dataset",
    "save_dataset",
    "ReplaySource",
    "transfer_split",
    "full_data_params",
    "oracle_replay_params",
    "quartile_split",
    "load_demo_dataset",
    "demo_dataset_rows",
]


class DataError(Exception):
    """A replay file failed validation."""


@dataclass
class ReplayDataset:
    """Immutable table of precomputed weak and strong ratings."""

    x_id: np.ndarray
    g: np.ndarray
    h: np.ndarray
    u_hat: np.ndarray
    theta_star: float

    def __post_init__(self) -> None:
        n = len(self.g)
        if n == 0:
            raise DataError("dataset has no rows")
        if not (len(self.x_id) == len(self.h) == len(self.u_hat) == n):
            raise DataError("dataset columns have mismatched lengths")
        if np.any(self.u_hat < 0):
            raise DataError("u_hat must be nonnegative")
        recomputed = float(np.mean(self.h))
        if not math.isclose(self.theta_star, recomputed, rel_tol=1e-9, abs_tol=1e-9):
            raise DataError(
                f"theta_star {self.theta_star} disagrees with mean(h) = {recomputed}"
            )

    def __len__(self) -> int:
        return len(self.g)

    @classmethod
    def from_rows(
        cls,
        x_id: np.ndarray,
        g: np.ndarray,
        h: np.ndarray,
        u_hat: np.ndarray | None = None,
    ) -> "ReplayDataset":
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        if u_hat is None:
            if np.any(g < 0) or np.any(g > 1):
                raise DataError(
                    "u_hat defaults to g(1-g) only for probability-valued g; "
                    "supply u_hat explicitly"
                )
            u_hat = g * (1.0 - g)
        return cls(
            x_id=np.asarray(x_id, dtype=object),
            g=g,
            h=h,
            u_hat=np.asarray(u_hat, dtype=float),
            theta_star=float(np.mean(h)),
        )


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_dataset(path) -> ReplayDataset:
    """Load and validate a replay CSV (plus its sidecar if present)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty")
        missing = {"x_id", "g", "h"} - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path} is missing columns: {sorted(missing)}")
        has_u = "u_hat" in reader.fieldnames
        ids: list[str] = []
        g: list[float] = []
        h: list[float] = []
        u: list[float | None] = []
        for line, row in enumerate(reader, start=2):
            try:
                ids.append(row["x_id"])
                g.append(float(row["g"]))
                h.append(float(row["h"]))
                raw_u = row.get("u_hat") if has_u else None
                u.append(float(raw_u) if raw_u not in (None, "") else None)
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line}: bad row ({exc})") from exc
    g_arr = np.array(g, dtype=float)
    u_arr = None
    if has_u and all(v is not None for v in u):
        u_arr = np.array(u, dtype=float)
    elif has_u and any(v is not None for v in u):
        defaults = g_arr * (1.0 - g_arr)
        if np.any((g_arr < 0) | (g_arr > 1)):
            raise DataError(f"{path}: partial u_hat column but g is not a probability")
        u_arr = np.array([d if v is None else v for v, d in zip(u, defaults)], dtype=float)
    ds = ReplayDataset.from_rows(np.array(ids, dtype=object), g_arr, np.array(h), u_arr)

    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if "theta_star" in meta and not math.isclose(
            float(meta["theta_star"]), ds.theta_star, rel_tol=1e-9, abs_tol=1e-9
        ):
            raise DataError(
                f"{sidecar}: recorded theta_star {meta['theta_star']} does not match "
                f"recomputed {ds.theta_star}"
            )
    return ds


def save_dataset(ds: ReplayDataset, path, sidecar: bool = True) -> None:
    """Write a dataset losslessly (float repr round-trips)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_id", "g", "h", "u_hat"])
        for i in range(len(ds)):
            writer.writerow(
                [ds.x_id[i], repr(float(ds.g[i])), repr(float(ds.h[i])), repr(float(ds.u_hat[i]))]
            )
    if sidecar:
        _sidecar_path(path).write_text(
            json.dumps({"theta_star": ds.theta_star, "rows": len(ds)}, indent=2),
            encoding="utf-8",
        )


class ReplaySource:
    """With-replacement row sampler over a loaded dataset."""

    def __init__(self, ds: ReplayDataset):
        self.ds = ds

    def draw_block(self, n: int, rng: np.random.Generator) -> SampleBlock:
        idx = rng.integers(0, len(self.ds), size=n)
        return SampleBlock(
            x_id=self.ds.x_id[idx],
            g=self.ds.g[idx],
            h=self.ds.h[idx],
            u=self.ds.u_hat[idx],
        )


def transfer_split(
    ds_train: ReplayDataset, costs: RaterCosts
) -> tuple[PolicyParams, PlattModel | None]:
    """Policy parameters estimated on a fully annotated related dataset."""
    return annotated_params(ds_train.g, ds_train.h, ds_train.u_hat, costs)


def full_data_params(ds: ReplayDataset, costs: RaterCosts) -> PolicyParams:
    """Parameters taken directly from the evaluation dataset itself."""
    return PolicyParams(
        var_h=float(np.var(ds.h, ddof=1)),
        costs=costs,
        u_values=ds.u_hat.copy(),
        mse=float(np.mean((ds.h - ds.g) ** 2)),
    )


def oracle_replay_params(ds: ReplayDataset, costs: RaterCosts) -> PolicyParams:
    """Parameters for the oracle rule: uncertainty is the realized
    squared disagreement of each row."""
    return PolicyParams(
        var_h=float(np.var(ds.h, ddof=1)),
        costs=costs,
        u_values=(ds.h - ds.g) ** 2,
    )


def quartile_split(ds: ReplayDataset) -> ReplayDataset:
    """Keep only the rows in the bottom and top quartiles of u_hat.

    Filtering out the middle half spreads the retained uncertainty
    distribution, which is the regime where input-conditional policies
    shine.
    """
    lo, hi = np.quantile(ds.u_hat, [0.25, 0.75])
    keep = (ds.u_hat <= lo) | (ds.u_hat >= hi)
    if not np.any(keep):
        raise DataError("quartile split removed every row")
    return ReplayDataset.from_rows(ds.x_id[keep], ds.g[keep], ds.h[keep], ds.u_hat[keep])


DEMO_SPEC = {"family": "gaussian", "nu": 1.0, "mu": 0.05, "eta": 0.25}
DEMO_ROWS = 1000
DEMO_SEED = 20240817


def demo_dataset_rows(seed: int = DEMO_SEED, n: int = DEMO_ROWS) -> ReplayDataset:
    """Regenerate the bundled demo table (strongly heteroskedastic weak
    rater, real-valued strong rating, exact per-row uncertainty)."""
    from .synthetic import spec_from_config

    spec = spec_from_config(DEMO_SPEC)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    block = spec.draw_block(n, rng)
    ids = np.array([f"row{i:04d}" for i in range(n)], dtype=object)
    return ReplayDataset.from_rows(ids, block.g, block.h, block.u)


def load_demo_dataset() -> ReplayDataset:
    """Load the replay table shipped with the package."""
    with resources.as_file(
        resources.files("dualrater").joinpath("data_files/demo_replay.csv")
    ) as path:
        return load_dataset(path)
