"""Replication engine: bias, RMSE, convergence-rate slopes, coverage, normality.

Work is sharded by replication; each replication owns seed substreams derived
from (master_seed, replication_id), and results are reduced in replication
order, so tables are bit-identical for any worker count or completion order.
"""
from __future__ import annotations

import concurrent.futures
import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.stats import kstest

from . import estimands, estimators
from .core import (
    ApplicabilityError,
    DEFAULT_MASTER_SEED,
    LinearGeneralLaw,
    NumericalError,
    ORACLE_REPLICATION_BASE,
    ScenarioError,
    ScenarioSpec,
    derive_streams,
    load_scenario,
    spec_from_dict,
)
from .dgp import draw_noise, simulate

ESTIMATOR_NAMES = ("ht", "kernel", "kernel-irf", "lp-ols", "lp-iv")
TARGET_METHODS = ("analytic", "value", "mc")
RECOMMENDED_MIN_REPLICATIONS = 50


@dataclass(frozen=True)
class EstimatorConfig:
    name: str
    p: int
    w: float = 1.0
    wprime: float = 0.0
    demean: bool = False
    bandwidth_c: float | None = None  # kernel estimators; None = data-driven default

    def __post_init__(self):
        if self.name not in ESTIMATOR_NAMES:
            raise ScenarioError("estimators.name", f"unknown estimator {self.name!r}")
        if self.p < 0:
            raise ScenarioError("estimators.p", "need p >= 0")

    @property
    def key(self) -> str:
        return f"{self.name}[p={self.p}]"


@dataclass(frozen=True)
class TargetSpec:
    method: str = "analytic"
    value: float | None = None
    mc_draws: int = 1_000_000

    def __post_init__(self):
        if self.method not in TARGET_METHODS:
            raise ScenarioError("targets.method", f"unknown target method {self.method!r}")
        if self.method == "value" and self.value is None:
            raise ScenarioError("targets.value", "explicit targets need a value")


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: ScenarioSpec
    t_grid: tuple[int, ...]
    replications: int
    estimator_configs: tuple[EstimatorConfig, ...]
    targets: dict[str, TargetSpec] = field(default_factory=dict)
    parallelism: int = 1
    master_seed: int = DEFAULT_MASTER_SEED

    def __post_init__(self):
        grid = tuple(int(t) for t in self.t_grid)
        if not grid or any(t <= 0 for t in grid):
            raise ScenarioError("t_grid", "need positive grid entries")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ScenarioError("t_grid", "grid must be strictly ascending")
        object.__setattr__(self, "t_grid", grid)
        if self.replications < 1:
            raise ScenarioError("replications", "need at least 1 replication")
        if not self.estimator_configs:
            raise ScenarioError("estimators", "need at least one estimator")
        if self.parallelism < 1:
            raise ScenarioError("parallelism", "need parallelism >= 1")
        spec = self.scenario
        law = spec.coefficients
        if isinstance(law, LinearGeneralLaw) and law.beta_table is not None:
            for t in grid:
                if law.beta_table.shape[0] != t:
                    raise ScenarioError(
                        "t_grid",
                        "a per-period coefficient table pins the horizon; the grid "
                        f"entry {t} differs from the table length {law.beta_table.shape[0]}",
                    )
        for cfg in self.estimator_configs:
            if cfg.p >= min(grid):
                raise ScenarioError("estimators.p", "lag must be below the smallest grid horizon")
            if cfg.name == "ht" and not spec.discrete_treatment:
                raise ApplicabilityError(f"{cfg.key}: inverse-propensity weighting needs a discrete mechanism")
            if cfg.name in ("kernel", "kernel-irf") and spec.discrete_treatment:
                raise ApplicabilityError(f"{cfg.key}: kernel regression needs a continuous mechanism")
            if cfg.name == "lp-iv" and spec.instrument is None:
                raise ApplicabilityError(f"{cfg.key}: no instrument block in the scenario")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.to_dict(),
            "t_grid": list(self.t_grid),
            "replications": self.replications,
            "estimators": [
                {
                    "name": c.name,
                    "p": c.p,
                    "w": c.w,
                    "wprime": c.wprime,
                    "demean": c.demean,
                    "bandwidth_c": c.bandwidth_c,
                }
                for c in self.estimator_configs
            ],
            "targets": {
                k: {"method": t.method, "value": t.value, "mc_draws": t.mc_draws}
                for k, t in self.targets.items()
            },
            "parallelism": self.parallelism,
            "master_seed": self.master_seed,
        }


def plan_from_dict(doc: dict[str, Any], base_dir=None) -> ExperimentPlan:
    if not isinstance(doc, dict):
        raise ScenarioError("plan", "experiment plan must be a JSON object")
    allowed = ("scenario", "t_grid", "replications", "estimators", "targets", "parallelism", "master_seed")
    for key in doc:
        if key not in allowed:
            raise ScenarioError(f"plan.{key}", "unknown key")
    for key in ("scenario", "t_grid", "replications", "estimators"):
        if key not in doc:
            raise ScenarioError(f"plan.{key}", "missing required field")
    raw_scenario = doc["scenario"]
    if isinstance(raw_scenario, str):
        path = raw_scenario if base_dir is None else str(base_dir / raw_scenario)
        spec = load_scenario(path)
    elif isinstance(raw_scenario, dict):
        spec = spec_from_dict(raw_scenario)
    else:
        raise ScenarioError("plan.scenario", "expected a scenario object or a path string")
    cfgs = []
    if not isinstance(doc["estimators"], list) or not doc["estimators"]:
        raise ScenarioError("plan.estimators", "expected a non-empty list")
    for i, item in enumerate(doc["estimators"]):
        if not isinstance(item, dict):
            raise ScenarioError(f"plan.estimators[{i}]", "expected an object")
        for key in item:
            if key not in ("name", "p", "w", "wprime", "demean", "bandwidth_c"):
                raise ScenarioError(f"plan.estimators[{i}].{key}", "unknown key")
        cfgs.append(
            EstimatorConfig(
                name=item.get("name", ""),
                p=int(item.get("p", 0)),
                w=float(item.get("w", 1.0)),
                wprime=float(item.get("wprime", 0.0)),
                demean=bool(item.get("demean", False)),
                bandwidth_c=None if item.get("bandwidth_c") is None else float(item["bandwidth_c"]),
            )
        )
    targets = {}
    for key, item in (doc.get("targets") or {}).items():
        if not isinstance(item, dict):
            raise ScenarioError(f"plan.targets.{key}", "expected an object")
        for sub in item:
            if sub not in ("method", "value", "mc_draws"):
                raise ScenarioError(f"plan.targets.{key}.{sub}", "unknown key")
        targets[key] = TargetSpec(
            method=item.get("method", "analytic"),
            value=item.get("value"),
            mc_draws=int(item.get("mc_draws", 1_000_000)),
        )
    return ExperimentPlan(
        scenario=spec,
        t_grid=tuple(int(t) for t in doc["t_grid"]),
        replications=int(doc["replications"]),
        estimator_configs=tuple(cfgs),
        targets=targets,
        parallelism=int(doc.get("parallelism", 1)),
        master_seed=int(doc.get("master_seed", DEFAULT_MASTER_SEED)),
    )


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def resolve_target(spec: ScenarioSpec, cfg: EstimatorConfig, tspec: TargetSpec):
    """(target value, target MC standard error) for one estimator at one horizon."""
    if tspec.method == "value":
        return float(tspec.value), 0.0
    if tspec.method == "mc":
        ev = estimands.irf_mc(
            spec,
            cfg.p,
            cfg.w,
            cfg.wprime,
            draws=tspec.mc_draws,
            master_seed=spec.horizon,  # distinct oracle stream per horizon
            replication_id=ORACLE_REPLICATION_BASE + cfg.p,
        )
        return ev.value, ev.mc_standard_error
    if cfg.name in ("ht", "kernel"):
        return estimands.analytic_avg_weighted_effect(spec, cfg.p, cfg.w, cfg.wprime).value, 0.0
    if cfg.name == "kernel-irf":
        return estimands.crf_linear_gaussian(spec, cfg.p, cfg.w, cfg.wprime).value, 0.0
    if cfg.name == "lp-ols":
        return estimands.beta_u_star_analytic(spec, cfg.p).value, 0.0
    return estimators.lp_iv_plim_oracle(spec, cfg.p).value, 0.0


# ---------------------------------------------------------------------------
# Replication pipeline
# ---------------------------------------------------------------------------


def _apply_estimator(cfg: EstimatorConfig, bundle):
    if cfg.name == "ht":
        return estimators.ht_lagp(bundle, cfg.p, cfg.w, cfg.wprime)
    if cfg.name == "kernel":
        kernel = None
        if cfg.bandwidth_c is not None:
            kernel = estimators.KernelSpec(
                "gaussian", estimators.bandwidth_rule(bundle.horizon, cfg.p, cfg.bandwidth_c)
            )
        return estimators.kernel_lagp(bundle, cfg.p, cfg.w, cfg.wprime, kernel=kernel)
    if cfg.name == "kernel-irf":
        kernel = None
        if cfg.bandwidth_c is not None:
            kernel = estimators.KernelSpec(
                "gaussian", estimators.bandwidth_rule(bundle.horizon, cfg.p, cfg.bandwidth_c)
            )
        return estimators.kernel_irf(bundle, cfg.p, cfg.w, cfg.wprime, kernel=kernel)
    if cfg.name == "lp-ols":
        return estimators.lp_ols(bundle, cfg.p, demean=cfg.demean)
    return estimators.lp_iv(bundle, cfg.p)


def _run_replication(spec: ScenarioSpec, master_seed: int, rep: int, cfgs):
    streams = derive_streams(master_seed, rep)
    panel = draw_noise(spec, streams)
    bundle = simulate(spec, panel)
    out = []
    for cfg in cfgs:
        report = _apply_estimator(cfg, bundle)
        out.append((report.point, report.std_error))
    return out


def _worker(args):
    spec, master_seed, rep, cfgs = args
    return _run_replication(spec, master_seed, rep, cfgs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellMetrics:
    estimator: str  # config key, e.g. "lp-ols[p=1]"
    name: str
    T: int
    p: int
    mean: float
    bias: float
    sd: float
    rmse: float
    coverage: float
    mean_se: float
    ks: float
    target: float
    target_se: float
    replications: int
    degenerate_se: int


@dataclass(frozen=True)
class MetricsTable:
    cells: tuple[CellMetrics, ...]
    plan_echo: dict

    def cell(self, estimator_key: str, T: int) -> CellMetrics:
        for c in self.cells:
            if c.estimator == estimator_key and c.T == T:
                return c
        raise KeyError((estimator_key, T))

    def rows_for(self, estimator_key: str) -> list[CellMetrics]:
        return sorted(
            (c for c in self.cells if c.estimator == estimator_key), key=lambda c: c.T
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["estimator", "T", "p", "mean", "bias", "sd", "rmse", "coverage", "mean_se", "ks"]
            )
            for c in self.cells:
                writer.writerow(
                    [
                        c.estimator,
                        c.T,
                        c.p,
                        f"{c.mean:.17g}",
                        f"{c.bias:.17g}",
                        f"{c.sd:.17g}",
                        f"{c.rmse:.17g}",
                        f"{c.coverage:.17g}",
                        f"{c.mean_se:.17g}",
                        f"{c.ks:.17g}",
                    ]
                )

    def diagnostics(self) -> dict:
        return {
            c.estimator
            + f"@T={c.T}": {
                "target": c.target,
                "target_se": c.target_se,
                "replications": c.replications,
                "degenerate_se": c.degenerate_se,
            }
            for c in self.cells
        }


def normality_check(standardized: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance of standardized errors to the unit normal."""
    z = np.asarray(standardized, dtype=float)
    if z.size == 0:
        return float("nan")
    return float(kstest(z, "norm").statistic)


def _cell_metrics(cfg, T, points, ses, target, target_se, M) -> CellMetrics:
    bias = float(points.mean() - target)
    sd = float(points.std(ddof=0))  # population sd so that rmse^2 = bias^2 + sd^2 exactly
    rmse = math.sqrt(bias**2 + sd**2)
    valid = ses > 0
    degenerate = int(M - valid.sum())
    if valid.any():
        covered = (points[valid] - estimators.Z95 * ses[valid] <= target) & (
            target <= points[valid] + estimators.Z95 * ses[valid]
        )
        coverage = float(covered.mean())
        mean_se = float(ses[valid].mean())
        ks = normality_check((points[valid] - target) / ses[valid])
    else:
        coverage = float("nan")
        mean_se = 0.0
        ks = float("nan")
    return CellMetrics(
        estimator=cfg.key,
        name=cfg.name,
        T=T,
        p=cfg.p,
        mean=float(points.mean()),
        bias=bias,
        sd=sd,
        rmse=rmse,
        coverage=coverage,
        mean_se=mean_se,
        ks=ks,
        target=target,
        target_se=target_se,
        replications=M,
        degenerate_se=degenerate,
    )


def run_replications(plan: ExperimentPlan) -> MetricsTable:
    """Execute the plan: per cell, M seeded simulate-estimate pipelines.

    Deterministic for a fixed master seed regardless of worker count: results
    are indexed by replication id, and each replication derives its own
    streams.
    """
    cells = []
    M = plan.replications
    cfgs = plan.estimator_configs
    for T in plan.t_grid:
        spec_t = replace(plan.scenario, horizon=T)
        targets = [
            resolve_target(spec_t, cfg, plan.targets.get(cfg.key, TargetSpec())) for cfg in cfgs
        ]
        points = np.empty((len(cfgs), M))
        ses = np.empty((len(cfgs), M))
        if plan.parallelism <= 1 or M == 1:
            results = (_run_replication(spec_t, plan.master_seed, rep, cfgs) for rep in range(M))
        else:
            executor = concurrent.futures.ProcessPoolExecutor(max_workers=plan.parallelism)
            try:
                results = list(
                    executor.map(
                        _worker,
                        ((spec_t, plan.master_seed, rep, cfgs) for rep in range(M)),
                        chunksize=max(1, M // (plan.parallelism * 4)),
                    )
                )
            finally:
                executor.shutdown()
        for rep, res in enumerate(results):
            for i, (point, se) in enumerate(res):
                points[i, rep] = point
                ses[i, rep] = se
        for i, cfg in enumerate(cfgs):
            target, target_se = targets[i]
            cells.append(_cell_metrics(cfg, T, points[i], ses[i], target, target_se, M))
    return MetricsTable(cells=tuple(cells), plan_echo=plan.to_dict())


def rate_slope(table: MetricsTable, estimator_key: str):
    """Least-squares slope of log RMSE on log T with its regression SE."""
    rows = table.rows_for(estimator_key)
    if len(rows) < 4:
        raise ApplicabilityError("rate estimation needs at least 4 grid points")
    x = np.log([r.T for r in rows])
    y = np.array([r.rmse for r in rows])
    if np.any(y <= 0):
        raise NumericalError("zero RMSE cell: the log-log rate regression is undefined")
    y = np.log(y)
    xbar = x.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xbar)
    resid = y - intercept - slope * x
    dof = len(rows) - 2
    se = math.sqrt(float(np.sum(resid**2)) / dof / sxx) if dof > 0 else 0.0
    return slope, se


def coverage_summary(table: MetricsTable) -> list[dict]:
    """Per-cell coverage with degenerate-SE diagnostics."""
    return [
        {
            "estimator": c.estimator,
            "T": c.T,
            "coverage": c.coverage,
            "replications": c.replications,
            "degenerate_se": c.degenerate_se,
        }
        for c in table.cells
    ]


def write_manifest(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
