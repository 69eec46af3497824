"""Experiment orchestration and command-line entry points.

Subcommands:

* ``simulate`` -- policy x budget x trial sweeps over a synthetic spec.
* ``replay``   -- the same sweeps over a replay CSV of precomputed ratings.
* ``design``   -- emit the optimal input-sampling table for a discrete support.
* ``policy``   -- print the optimal policies for given moments.

Configs are JSON or TOML files; any flag given on the command line
overrides the file.  Exit codes: 0 success, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .calibration import (
    CalibratedSource,
    PlattModel,
    combine_with_burnin,
    estimate_params_burnin,
)
from .core import RaterCosts, run_trial, trial_stream, write_trace
from .data import (
    DataError,
    ReplayDataset,
    ReplaySource,
    load_dataset,
    oracle_replay_params,
    quartile_split,
    transfer_split,
)
from .metrics import (
    BudgetCurve,
    CurvePoint,
    bootstrap_ci,
    effective_budget,
    error_ratio,
    mse_over_trials,
)
from .policies import Policy, PolicyParams, make_policy
from .sampling_design import nu_of_x, optimal_input_distribution
from .synthetic import BernoulliSpec, GaussianSpec, SyntheticSource, spec_from_config

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "run_experiment",
    "emit_results",
    "main",
]

POLICY_NAMES = ("base", "random", "active", "oracle")
MODES = ("analytic", "transfer", "burnin")


class ConfigError(Exception):
    """The experiment configuration is invalid."""


@dataclass
class ExperimentConfig:
    source: dict
    costs: RaterCosts
    budgets: list[float]
    policies: list[str] = field(default_factory=lambda: ["base", "random", "active"])
    mode: str = "analytic"
    trials: int = 2000
    burnin: int = 200
    seed: int = 0
    power_tuning: bool = False
    workers: int = 1
    trace_trials: int = 0
    output: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        unknown = [p for p in self.policies if p not in POLICY_NAMES]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}; choose from {POLICY_NAMES}")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.burnin < 2:
            raise ConfigError("burnin must be at least 2")
        if not self.budgets:
            raise ConfigError("at least one budget is required")
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ConfigError("budgets must be strictly increasing")
        floor = self.costs.c_g + self.costs.c_h
        if self.budgets[0] < floor:
            raise ConfigError(
                f"smallest budget {self.budgets[0]} cannot afford one step (c_g + c_h = {floor})"
            )
        kind = self.source.get("kind")
        if kind not in ("synthetic", "replay"):
            raise ConfigError("source.kind must be 'synthetic' or 'replay'")
        if self.mode == "analytic" and kind != "synthetic":
            raise ConfigError("analytic mode requires a synthetic source")
        if self.mode == "transfer" and kind != "replay":
            raise ConfigError("transfer mode requires a replay source")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.trace_trials < 0:
            raise ConfigError("trace_trials must be nonnegative")

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        try:
            costs = _costs_from_payload(payload)
            budgets = [float(b) for b in payload["budgets"]]
            source = dict(payload["source"])
        except KeyError as exc:
            raise ConfigError(f"config missing key {exc}") from exc
        kwargs: dict[str, Any] = {}
        for key in (
            "policies",
            "mode",
            "trials",
            "burnin",
            "seed",
            "power_tuning",
            "workers",
            "trace_trials",
            "output",
        ):
            if key in payload and payload[key] is not None:
                kwargs[key] = payload[key]
        if "policies" in kwargs:
            kwargs["policies"] = list(kwargs["policies"])
        for key in ("trials", "burnin", "seed", "workers", "trace_trials"):
            if key in kwargs:
                kwargs[key] = int(kwargs[key])
        if "power_tuning" in kwargs:
            kwargs["power_tuning"] = bool(kwargs["power_tuning"])
        return cls(source=source, costs=costs, budgets=budgets, **kwargs)

    def to_dict(self) -> dict:
        return {
            "source": dict(self.source),
            "costs": {"c_g": self.costs.c_g, "c_h": self.costs.c_h},
            "budgets": list(self.budgets),
            "policies": list(self.policies),
            "mode": self.mode,
            "trials": self.trials,
            "burnin": self.burnin,
            "seed": self.seed,
            "power_tuning": self.power_tuning,
            "workers": self.workers,
            "trace_trials": self.trace_trials,
            "output": self.output,
        }


def _costs_from_payload(payload: dict) -> RaterCosts:
    # c_h is normalized to one cost unit unless given explicitly
    try:
        if "costs" in payload and payload["costs"] is not None:
            c = payload["costs"]
            return RaterCosts(c_g=float(c["c_g"]), c_h=float(c["c_h"]))
        if "cost_ratio" in payload and payload["cost_ratio"] is not None:
            return RaterCosts(c_g=float(payload["cost_ratio"]), c_h=1.0)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad cost specification: {exc}") from exc
    raise ConfigError("config needs either 'costs' or 'cost_ratio'")


@dataclass
class _SourceBundle:
    kind: str
    spec: GaussianSpec | BernoulliSpec | None = None
    dataset: ReplayDataset | None = None
    transfer: ReplayDataset | None = None

    @property
    def theta_star(self) -> float:
        return self.spec.theta_star if self.kind == "synthetic" else self.dataset.theta_star

    def make_source(self):
        if self.kind == "synthetic":
            return SyntheticSource(self.spec)
        return ReplaySource(self.dataset)


def _resolve_source(config: ExperimentConfig) -> _SourceBundle:
    src = config.source
    if src["kind"] == "synthetic":
        try:
            spec = spec_from_config(src)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return _SourceBundle(kind="synthetic", spec=spec)
    ds = load_dataset(src["dataset"])
    if src.get("quartile_split"):
        ds = quartile_split(ds)
    transfer = ds
    if src.get("transfer"):
        transfer = load_dataset(src["transfer"])
    return _SourceBundle(kind="replay", dataset=ds, transfer=transfer)


@dataclass
class _TrialJob:
    """Everything one worker needs to run a batch of trials."""

    bundle: _SourceBundle
    costs: RaterCosts
    policy_name: str
    budget: float
    mode: str
    seed: int
    burnin_n: int
    power_tuning: bool
    fixed_policy: Policy | None
    oracle_params: PolicyParams | None
    platt: PlattModel | None = None


def _run_one_trial(job: _TrialJob, index: int, trace: bool = False):
    source = job.bundle.make_source()
    rng = trial_stream(job.seed, job.policy_name, index)
    policy = job.fixed_policy
    platt = job.platt
    burn = None
    if job.mode == "burnin":
        burn_rng = trial_stream(job.seed, "burnin", index)
        block = source.draw_block(job.burnin_n, burn_rng)
        burn = estimate_params_burnin(block, job.costs)
        if job.policy_name != "oracle":
            platt = burn.platt
            policy = make_policy(job.policy_name, burn.params)

    # the oracle benchmark keeps the raw weak score; every estimated
    # policy runs on the calibrated stream it was fitted against
    if platt is not None and job.policy_name != "oracle":
        source = CalibratedSource(source, platt)
    result = run_trial(source, policy, job.costs, job.budget, rng, trace=trace)
    estimate = result.estimate
    if job.power_tuning:
        estimate = result.tuned_estimate(result.power_lambda(fallback=1.0))
    if burn is not None:
        estimate = combine_with_burnin(burn, policy, job.budget, estimate)
    return estimate, result


def _run_trial_batch(job: _TrialJob, indices: list[int]) -> list[float]:
    return [_run_one_trial(job, i)[0] for i in indices]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    theta_star: float
    curves: dict[str, BudgetCurve]
    estimates: dict[str, list[np.ndarray]]
    analytic_error_ratio_vs_base: dict[str, float] | None


def _fixed_policies(
    config: ExperimentConfig, bundle: _SourceBundle
) -> tuple[
    dict[str, Policy | None],
    dict[str, PolicyParams],
    PolicyParams | None,
    PlattModel | None,
]:
    """Policies that do not depend on per-trial burn-in, plus the params
    each policy's analytic error constant should be evaluated under."""
    costs = config.costs
    policies: dict[str, Policy | None] = {}
    ratio_params: dict[str, PolicyParams] = {}
    oracle_params = None
    if "oracle" in config.policies:
        oracle_params = (
            bundle.spec.oracle_params(costs)
            if bundle.kind == "synthetic"
            else oracle_replay_params(bundle.dataset, costs)
        )

    if config.mode == "burnin":
        for name in config.policies:
            policies[name] = None
        if oracle_params is not None:
            policies["oracle"] = make_policy("oracle", oracle_params)
            ratio_params["oracle"] = oracle_params
        return policies, ratio_params, oracle_params, None

    if config.mode == "analytic":
        params = bundle.spec.analytic_params(costs)
        platt = None
    else:
        params, platt = transfer_split(bundle.transfer, costs)
    for name in config.policies:
        if name == "oracle":
            policies[name] = make_policy("oracle", oracle_params)
            ratio_params[name] = oracle_params
        else:
            policies[name] = make_policy(name, params)
            ratio_params[name] = params
    return policies, ratio_params, oracle_params, platt


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full policy x budget x trial sweep described by the config."""
    bundle = _resolve_source(config)
    policies, ratio_params, oracle_params, platt = _fixed_policies(config, bundle)

    estimates: dict[str, list[np.ndarray]] = {name: [] for name in config.policies}
    for name in config.policies:
        for budget in config.budgets:
            job = _TrialJob(
                bundle=bundle,
                costs=config.costs,
                policy_name=name,
                budget=budget,
                mode=config.mode,
                seed=config.seed,
                burnin_n=config.burnin,
                power_tuning=config.power_tuning,
                fixed_policy=policies[name],
                oracle_params=oracle_params,
                platt=platt,
            )
            indices = list(range(config.trials))
            if config.workers > 1 and config.trials >= 4 * config.workers:
                chunks = np.array_split(np.asarray(indices), config.workers * 2)
                with ProcessPoolExecutor(max_workers=config.workers) as pool:
                    parts = pool.map(_run_trial_batch, [job] * len(chunks), [c.tolist() for c in chunks])
                    values = [v for part in parts for v in part]
            else:
                values = _run_trial_batch(job, indices)
            estimates[name].append(np.asarray(values))

    theta_star = bundle.theta_star
    curves: dict[str, BudgetCurve] = {}
    for name in config.policies:
        points = []
        for i, budget in enumerate(config.budgets):
            ests = estimates[name][i]
            mse = mse_over_trials(ests, theta_star)
            if len(ests) >= 2:
                rng = trial_stream(config.seed, "bootstrap", name, i)
                lo, hi = bootstrap_ci(ests, theta_star, rng=rng)
                lo, hi = min(lo, mse), max(hi, mse)
            else:
                lo = hi = mse
            points.append(CurvePoint(budget=budget, mse=mse, ci_low=lo, ci_high=hi))
        curves[name] = BudgetCurve(policy=name, points=points)

    ratios = None
    if config.mode != "burnin":
        base = Policy(kind="base", p=1.0)
        ratios = {
            name: error_ratio(policies[name], base, ratio_params[name])
            for name in config.policies
        }

    result = ExperimentResult(
        config=config,
        theta_star=theta_star,
        curves=curves,
        estimates=estimates,
        analytic_error_ratio_vs_base=ratios,
    )

    if config.output:
        emit_results(result, config.output)
        if config.trace_trials > 0:
            _write_traces(config, bundle, policies, oracle_params, platt)
    return result


def _write_traces(config, bundle, policies, oracle_params, platt) -> None:
    trace_dir = Path(config.output) / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    for name in config.policies:
        for budget in config.budgets:
            job = _TrialJob(
                bundle=bundle,
                costs=config.costs,
                policy_name=name,
                budget=budget,
                mode=config.mode,
                seed=config.seed,
                burnin_n=config.burnin,
                power_tuning=config.power_tuning,
                fixed_policy=policies[name],
                oracle_params=oracle_params,
                platt=platt,
            )
            for i in range(min(config.trace_trials, config.trials)):
                _, result = _run_one_trial(job, i, trace=True)
                out = trace_dir / f"{name}_b{budget:g}_t{i}.csv"
                write_trace(result.records, out)


def emit_results(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """Write the per-policy curve CSV and the JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_curve = result.curves.get("base")

    def _reference(point: CurvePoint) -> tuple[float | None, float | None]:
        if base_curve is None:
            return None, None
        eff = effective_budget(base_curve, point.mse).budget
        return eff, eff - point.budget

    curves_path = out / "curves.csv"
    with open(curves_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "budget", "mse", "ci_low", "ci_high", "effective_budget", "cost_savings"]
        )
        for name, curve in result.curves.items():
            for point in curve.points:
                eff, savings = _reference(point)
                writer.writerow(
                    [
                        name,
                        repr(point.budget),
                        repr(point.mse),
                        repr(point.ci_low),
                        repr(point.ci_high),
                        "" if eff is None else repr(eff),
                        "" if savings is None else repr(savings),
                    ]
                )

    summary = {
        "config": result.config.to_dict(),
        "theta_star": result.theta_star,
        "analytic_error_ratio_vs_base": result.analytic_error_ratio_vs_base,
        "policies": {},
    }
    for name, curve in result.curves.items():
        rows = []
        for point in curve.points:
            eff, savings = _reference(point)
            rows.append(
                {
                    "budget": point.budget,
                    "mse": point.mse,
                    "ci_low": point.ci_low,
                    "ci_high": point.ci_high,
                    "effective_budget": eff,
                    "cost_savings": savings,
                }
            )
        summary["policies"][name] = rows
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return {"curves": curves_path, "summary": summary_path}


# ----------------------------------------------------------------------
# command line


def _load_config_file(path: Path) -> dict:
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:  # pragma: no cover - py<3.11
            import tomli as tomllib
        return tomllib.loads(text.decode("utf-8"))
    return json.loads(text.decode("utf-8"))


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="JSON or TOML config file")
    sub.add_argument("--out", dest="output", help="output directory")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--trials", type=int)
    sub.add_argument("--burnin", type=int)
    sub.add_argument("--budgets", help="comma-separated budget grid")
    sub.add_argument("--policies", help="comma-separated subset of base,random,active,oracle")
    sub.add_argument("--mode", choices=MODES)
    sub.add_argument("--cost-ratio", type=float, help="c_g with c_h normalized to 1")
    sub.add_argument("--c-g", type=float)
    sub.add_argument("--c-h", type=float)
    sub.add_argument("--power-tuning", action="store_true", default=None)
    sub.add_argument("--workers", type=int)
    sub.add_argument("--trace-trials", type=int)


def _payload_from_args(args: argparse.Namespace) -> dict:
    payload: dict[str, Any] = {}
    if args.config:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        payload = _load_config_file(args.config)
    for key in ("output", "seed", "trials", "burnin", "mode", "workers", "trace_trials"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    if args.power_tuning is not None:
        payload["power_tuning"] = args.power_tuning
    if args.budgets is not None:
        try:
            payload["budgets"] = [float(b) for b in str(args.budgets).split(",") if b]
        except ValueError as exc:
            raise ConfigError(f"bad --budgets: {exc}") from exc
    if args.policies is not None:
        payload["policies"] = [p.strip() for p in str(args.policies).split(",") if p.strip()]
    if args.c_g is not None or args.c_h is not None:
        if args.c_g is None or args.c_h is None:
            raise ConfigError("--c-g and --c-h must be given together")
        payload["costs"] = {"c_g": args.c_g, "c_h": args.c_h}
        payload.pop("cost_ratio", None)
    elif args.cost_ratio is not None:
        payload["cost_ratio"] = args.cost_ratio
        payload.pop("costs", None)
    return payload


def _cmd_simulate(args: argparse.Namespace) -> int:
    payload = _payload_from_args(args)
    source = dict(payload.get("source", {}))
    source["kind"] = "synthetic"
    for key, flag in (("family", args.family), ("nu", args.nu), ("mu", args.mu), ("eta", args.eta)):
        if flag is not None:
            source[key] = flag
    payload["source"] = source
    config = ExperimentConfig.from_dict(payload)
    result = run_experiment(config)
    _print_result(result)
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    payload = _payload_from_args(args)
    source = dict(payload.get("source", {}))
    source["kind"] = "replay"
    if args.dataset is not None:
        source["dataset"] = str(args.dataset)
    if args.transfer is not None:
        source["transfer"] = str(args.transfer)
    if args.split_quartiles:
        source["quartile_split"] = True
    if "dataset" not in source:
        raise ConfigError("replay needs --dataset or source.dataset in the config")
    payload["source"] = source
    payload.setdefault("mode", "transfer")
    config = ExperimentConfig.from_dict(payload)
    result = run_experiment(config)
    _print_result(result)
    return 0


def _print_result(result: ExperimentResult) -> None:
    print(f"theta_star = {result.theta_star:.6g}")
    for name, curve in result.curves.items():
        cells = ", ".join(f"B={p.budget:g}: mse={p.mse:.4g}" for p in curve.points)
        print(f"{name:>7}: {cells}")
    if result.analytic_error_ratio_vs_base:
        for name, ratio in result.analytic_error_ratio_vs_base.items():
            print(f"{name:>7}: analytic error ratio vs base = {ratio:.4g}")
    if result.config.output:
        print(f"results written to {result.config.output}")


def _cmd_design(args: argparse.Namespace) -> int:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"input table not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = set(reader.fieldnames or [])
    if not rows or "x_id" not in fields or "p" not in fields:
        raise DataError("design input needs columns x_id,p and either nu or e_h2,u")
    labels = np.array([r["x_id"] for r in rows], dtype=object)
    p = np.array([float(r["p"]) for r in rows])
    if "nu" in fields:
        nu = np.array([float(r["nu"]) for r in rows])
    elif {"e_h2", "u"} <= fields:
        if not args.policy_json:
            raise ConfigError("computing nu from e_h2,u needs --policy-json")
        policy = Policy.from_json(Path(args.policy_json).read_text(encoding="utf-8"))
        e_h2 = np.array([float(r["e_h2"]) for r in rows])
        u = np.array([float(r["u"]) for r in rows])
        nu = nu_of_x(policy, e_h2, u)
    else:
        raise DataError("design input needs a nu column or e_h2,u columns")
    design = optimal_input_distribution(p, nu, labels=labels)
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_id", "p", "nu", "q_star"])
        for i in range(len(p)):
            writer.writerow(
                [
                    design.labels[i],
                    repr(float(design.p[i])),
                    repr(float(design.nu[i])),
                    repr(float(design.q_star[i])),
                ]
            )
    print(f"wrote {out}")
    return 0


def _cmd_policy(args: argparse.Namespace) -> int:
    if args.c_g is not None and args.c_h is not None:
        costs = RaterCosts(c_g=args.c_g, c_h=args.c_h)
    elif args.cost_ratio is not None:
        costs = RaterCosts(c_g=args.cost_ratio, c_h=1.0)
    else:
        raise ConfigError("policy needs --cost-ratio or --c-g/--c-h")
    if args.u_file:
        upath = Path(args.u_file)
        if not upath.exists():
            raise DataError(f"u sample file not found: {upath}")
        with open(upath, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "u" not in reader.fieldnames:
                raise DataError("u sample file needs a 'u' column")
            u = np.array([float(r["u"]) for r in reader])
    else:
        u = np.array([args.mse])
    params = PolicyParams(var_h=args.var_h, costs=costs, u_values=u, mse=args.mse)
    report: dict[str, Any] = {
        "random": json.loads(make_policy("random", params).to_json()),
        "active": json.loads(make_policy("active", params).to_json()),
    }
    if args.budget is not None:
        from .policies import optimal_random_rate_integer

        report["random_integer_rate"] = optimal_random_rate_integer(params, args.budget)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualrater",
        description="Budget-aware mean estimation with weak and strong raters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="sweep policies over a synthetic generator")
    _common_flags(sim)
    sim.add_argument("--family", choices=("gaussian", "bernoulli"))
    sim.add_argument("--nu", type=float, help="Var(H)")
    sim.add_argument("--mu", type=float, help="E[(H-G)^2]")
    sim.add_argument("--eta", type=float, help="Var of the conditional squared error")
    sim.set_defaults(func=_cmd_simulate)

    rep = sub.add_parser("replay", help="sweep policies over a replay dataset")
    _common_flags(rep)
    rep.add_argument("--dataset", type=Path)
    rep.add_argument("--transfer", type=Path, help="annotated dataset to estimate parameters on")
    rep.add_argument("--split-quartiles", action="store_true", help="keep only low/high u_hat quartiles")
    rep.set_defaults(func=_cmd_replay)

    des = sub.add_parser("design", help="emit the optimal input-sampling table")
    des.add_argument("--input", required=True, help="CSV with x_id,p and nu (or e_h2,u)")
    des.add_argument("--out", required=True)
    des.add_argument("--policy-json", help="policy file for computing nu from e_h2,u")
    des.set_defaults(func=_cmd_design)

    pol = sub.add_parser("policy", help="print optimal policies for given moments")
    pol.add_argument("--var-h", type=float, required=True)
    pol.add_argument("--mse", type=float, required=True)
    pol.add_argument("--cost-ratio", type=float)
    pol.add_argument("--c-g", type=float)
    pol.add_argument("--c-h", type=float)
    pol.add_argument("--u-file", help="CSV with a 'u' column for the active policy")
    pol.add_argument("--budget", type=float, help="also report the integer-time rate")
    pol.add_argument("--out")
    pol.set_defaults(func=_cmd_policy)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
