"""Episode metrics and the seeded Monte Carlo benchmark harness.

One closed-loop episode is reduced to a row of summary statistics: mean
utilization and queue length per hardware class, thermal exposure, and
metered energy and cost.  The harness then runs grids of
(policy, seed, arrival-scale) cells with paired seeds, meaning every
policy arm replays byte-identical arrival schedules and ambient weather
for a given seed, and aggregates the cells into mean/std tables and
saturation frontiers.

Experiment directories are laid out as::

    out/
      cells/<policy>_s<seed>_x<scale>/
        timeseries.csv      one row per step, repr-format floats
        summary.json        scalar metrics plus provenance
      summary.csv           aggregate table, one row per (policy, scale)
      frontier.csv          arrival-rate sweep rows (sweeps only)

Summaries are a pure function of the time series, and the writers embed
no timestamps or machine state, so any summary can be regenerated
bit-for-bit from the per-cell logs long after the run.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SimulationConfig
from .environment import Action, SchedulingEnvironment
from .policies import Policy, make_policy
from .workload import CPU, Schedule

# ----------------------------------------------------------------------
# scalar metric catalogue
# ----------------------------------------------------------------------

#: Scalar fields produced by :func:`summarize_series`, in report order.
METRIC_FIELDS = (
    "util_mean_cpu_pct",
    "util_mean_gpu_pct",
    "util_mean_fleet_pct",
    "queue_mean_cpu",
    "queue_mean_gpu",
    "backlog_mean",
    "completed_jobs",
    "temp_mean_c",
    "temp_max_c",
    "throttle_pct",
    "energy_total_kwh",
    "energy_per_job_kwh",
    "cost_usd",
)

#: Section layout for the text summary table (label, [(field, row label)]).
TABLE_LAYOUT = (
    (
        "QoS",
        (
            ("util_mean_cpu_pct", "cpu util [%]"),
            ("util_mean_gpu_pct", "gpu util [%]"),
            ("queue_mean_cpu", "cpu queue [jobs]"),
            ("queue_mean_gpu", "gpu queue [jobs]"),
            ("completed_jobs", "completed [jobs]"),
        ),
    ),
    (
        "Thermal",
        (
            ("temp_mean_c", "temp mean [C]"),
            ("temp_max_c", "temp max [C]"),
            ("throttle_pct", "throttled [%]"),
        ),
    ),
    (
        "Energy",
        (
            ("energy_total_kwh", "energy [kWh]"),
            ("energy_per_job_kwh", "energy/job [kWh]"),
            ("cost_usd", "cost [$]"),
        ),
    ),
)

# per-step columns holding whole counts; written as integers in the CSV
_INT_COLUMNS = frozenset(
    {"t", "pool_cpu", "pool_gpu", "backlog_total", "completed", "sites_over_soft"}
)

# per-step scalar columns, in file order
_SCALAR_COLUMNS = (
    "util_cpu_pct",
    "util_gpu_pct",
    "util_fleet_pct",
    "queue_cpu",
    "queue_gpu",
    "pool_cpu",
    "pool_gpu",
    "backlog_total",
    "completed",
    "sites_over_soft",
    "cost_usd",
)

# per-site column families, in file order; suffixed with the site id
_SITE_FIELDS = ("temp_c", "compute_kwh", "cooling_kwh", "price")


# ----------------------------------------------------------------------
# episode metrics
# ----------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    """Summary of one closed-loop episode.

    Utilization is the time average of executed capacity units over
    installed capacity, capacity-weighted across the clusters of each
    hardware class, in percent.  Queue lengths count jobs waiting at
    clusters of a class plus the share of the undispatched pool whose
    jobs belong to that class, averaged per cluster and per step; no
    warm-up window is discarded.  ``throttle_pct`` is the percentage of
    (site, step) pairs whose hall temperature exceeded the throttle
    onset.  ``energy_per_job_kwh`` is ``None`` when nothing completed.
    """

    policy: str
    seed: int
    arrival_scale: float
    schedule_digest: str
    util_mean_cpu_pct: float
    util_mean_gpu_pct: float
    util_mean_fleet_pct: float
    queue_mean_cpu: float
    queue_mean_gpu: float
    backlog_mean: float
    completed_jobs: int
    temp_mean_c: float
    temp_max_c: float
    throttle_pct: float
    energy_total_kwh: float
    cost_usd: float
    energy_per_job_kwh: Optional[float] = None
    faults: int = 0
    fault_log: Tuple[str, ...] = ()
    fallbacks: int = 0
    series: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def summary_dict(self) -> dict:
        """JSON-ready summary; ``energy_per_job_kwh`` is omitted when absent."""
        metrics = {}
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            if value is not None:
                metrics[name] = value
        return {
            "policy": self.policy,
            "seed": self.seed,
            "arrival_scale": self.arrival_scale,
            "schedule_digest": self.schedule_digest,
            "faults": self.faults,
            "fault_log": list(self.fault_log),
            "fallbacks": self.fallbacks,
            "metrics": metrics,
        }


def summarize_series(series: Dict[str, np.ndarray]) -> dict:
    """Scalar metrics as a pure function of the per-step series.

    Shared by the live episode path and :func:`rebuild_summary`, so a
    summary recomputed from a written log reproduces the original to the
    last bit.
    """
    temp = series["temp_c"]
    steps, sites = temp.shape
    completed = int(series["completed"].sum())
    energy = float(series["compute_kwh"].sum() + series["cooling_kwh"].sum())
    out = {
        "util_mean_cpu_pct": float(series["util_cpu_pct"].mean()),
        "util_mean_gpu_pct": float(series["util_gpu_pct"].mean()),
        "util_mean_fleet_pct": float(series["util_fleet_pct"].mean()),
        "queue_mean_cpu": float(series["queue_cpu"].mean()),
        "queue_mean_gpu": float(series["queue_gpu"].mean()),
        "backlog_mean": float(series["backlog_total"].mean()),
        "completed_jobs": completed,
        "temp_mean_c": float(temp.mean()),
        "temp_max_c": float(temp.max()),
        "throttle_pct": 100.0
        * float(series["sites_over_soft"].sum())
        / (sites * steps),
        "energy_total_kwh": energy,
        "cost_usd": float(series["cost_usd"].sum()),
    }
    if completed > 0:
        out["energy_per_job_kwh"] = energy / completed
    return out


def run_episode(
    config: SimulationConfig,
    policy: Union[str, Policy],
    seed: int,
    out_dir=None,
    schedule: Optional[Schedule] = None,
) -> EpisodeMetrics:
    """Run one closed-loop episode and reduce it to metrics.

    ``policy`` is a policy name or an already-built instance; either way
    it is reset with ``seed`` so repeat calls with the same arguments
    produce identical logs.  A policy that raises mid-episode is logged
    as a fault and its step falls back to deferring the whole batch with
    setpoints held, so the episode always runs to the horizon.  When
    ``out_dir`` is given the per-step table and summary are written
    there.
    """
    pol = make_policy(policy, config, seed) if isinstance(policy, str) else policy
    env = SchedulingEnvironment(config)
    obs = env.reset(seed=seed, schedule=schedule)
    pol.reset(seed=seed)

    clusters = config.clusters()
    cpu_mask = np.array([c.hardware == CPU for c in clusters])
    gpu_mask = ~cpu_mask
    cap_cpu = config.class_capacity_cu(CPU)
    cap_gpu = config.fleet_capacity_cu() - cap_cpu
    cap_fleet = config.fleet_capacity_cu()
    n_cpu = max(int(cpu_mask.sum()), 1)
    n_gpu = max(int(gpu_mask.sum()), 1)
    sites = config.sites()
    site_ids = np.array([dc.id for dc in sites])
    onset = np.array([dc.physics.throttle_onset_c for dc in sites])

    steps = config.episode_length()
    series: Dict[str, np.ndarray] = {
        name: np.zeros(steps) for name in ("t",) + _SCALAR_COLUMNS
    }
    for name in _SITE_FIELDS:
        series[name] = np.zeros((steps, len(sites)))
    series["site_ids"] = site_ids

    fault_log: List[str] = []
    fallbacks = 0
    for t in range(steps):
        try:
            action = pol.act(obs)
        except Exception as exc:  # a broken policy must not kill the run
            fault_log.append("step %d: %s: %s" % (t, type(exc).__name__, exc))
            action = Action(assignments={}, cooling_setpoints=None)
        else:
            diag = getattr(pol, "diagnostics", None)
            if isinstance(diag, dict) and diag.get("fallback"):
                fallbacks += 1
        obs, info = env.step(action)

        pool_cpu = sum(1 for j in env.pool.values() if j.hardware == CPU)
        pool_gpu = len(env.pool) - pool_cpu
        series["t"][t] = t
        series["util_cpu_pct"][t] = (
            100.0 * float(info.util_exec_cu[cpu_mask].sum()) / cap_cpu
            if cap_cpu > 0
            else 0.0
        )
        series["util_gpu_pct"][t] = (
            100.0 * float(info.util_exec_cu[gpu_mask].sum()) / cap_gpu
            if cap_gpu > 0
            else 0.0
        )
        series["util_fleet_pct"][t] = (
            100.0 * float(info.util_exec_cu.sum()) / cap_fleet
        )
        series["queue_cpu"][t] = (
            float(info.queue_lengths[cpu_mask].sum()) + pool_cpu
        ) / n_cpu
        series["queue_gpu"][t] = (
            float(info.queue_lengths[gpu_mask].sum()) + pool_gpu
        ) / n_gpu
        series["pool_cpu"][t] = pool_cpu
        series["pool_gpu"][t] = pool_gpu
        series["backlog_total"][t] = float(info.queue_lengths.sum()) + len(env.pool)
        series["completed"][t] = info.completed
        series["sites_over_soft"][t] = np.count_nonzero(info.temp_c > onset)
        series["cost_usd"][t] = info.cost_usd
        series["temp_c"][t] = info.temp_c
        series["compute_kwh"][t] = info.compute_kwh
        series["cooling_kwh"][t] = info.cooling_kwh
        series["price"][t] = info.price

    metrics = EpisodeMetrics(
        policy=pol.name,
        seed=seed,
        arrival_scale=config.workload.arrival_scale,
        schedule_digest=env.schedule_digest,
        faults=len(fault_log),
        fault_log=tuple(fault_log),
        fallbacks=fallbacks,
        series=series,
        **summarize_series(series),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_timeseries(out_dir / "timeseries.csv", series)
        write_summary(out_dir / "summary.json", metrics.summary_dict())
    return metrics


# ----------------------------------------------------------------------
# per-cell log files
# ----------------------------------------------------------------------


def write_timeseries(path, series: Dict[str, np.ndarray]) -> None:
    """Write the per-step table as CSV with round-trip-exact floats."""
    site_ids = [int(s) for s in series["site_ids"]]
    header = ["t"] + list(_SCALAR_COLUMNS)
    for name in _SITE_FIELDS:
        header.extend("%s_%d" % (name, sid) for sid in site_ids)
    steps = len(series["t"])
    lines = [",".join(header)]
    for t in range(steps):
        cells = ["%d" % int(series["t"][t])]
        for name in _SCALAR_COLUMNS:
            v = series[name][t]
            cells.append("%d" % int(v) if name in _INT_COLUMNS else repr(float(v)))
        for name in _SITE_FIELDS:
            cells.extend(repr(float(v)) for v in series[name][t])
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_timeseries(path) -> Dict[str, np.ndarray]:
    """Parse a per-step table back into the arrays the writer was given."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    table = np.array(
        [[float(v) for v in line.split(",")] for line in lines[1:]]
    ).reshape(len(lines) - 1, len(header))

    series: Dict[str, np.ndarray] = {}
    site_cols: Dict[str, List[Tuple[int, int]]] = {name: [] for name in _SITE_FIELDS}
    for j, name in enumerate(header):
        stem, _, tail = name.rpartition("_")
        if stem in site_cols and tail.isdigit():
            site_cols[stem].append((int(tail), j))
        else:
            series[name] = table[:, j].copy()
    site_ids = sorted(sid for sid, _ in site_cols[_SITE_FIELDS[0]])
    for name, cols in site_cols.items():
        order = [j for _, j in sorted(cols)]
        series[name] = table[:, order].copy()
    series["site_ids"] = np.array(site_ids)
    return series


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def rebuild_summary(cell_dir) -> dict:
    """Recompute a cell's summary from its time-series log.

    Provenance fields are carried over from the stored summary; every
    metric is recomputed from ``timeseries.csv``.  The result must equal
    the stored ``summary.json`` exactly, which is the audit check that
    the scalar table really is a pure function of the logs.
    """
    cell_dir = Path(cell_dir)
    stored = json.loads((cell_dir / "summary.json").read_text())
    fresh = dict(stored)
    fresh["metrics"] = summarize_series(read_timeseries(cell_dir / "timeseries.csv"))
    return fresh


# ----------------------------------------------------------------------
# experiment grids
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """A grid of (policy, seed, arrival-scale) cells over one fleet."""

    config: SimulationConfig
    policies: Tuple[str, ...]
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    arrival_scales: Tuple[float, ...] = (1.0,)
    out_dir: Optional[str] = None
    jobs: int = 1

    def validate(self) -> list:
        issues = []
        if not self.policies:
            issues.append("experiment: needs at least one policy")
        if not self.seeds:
            issues.append("experiment: needs at least one seed")
        if not self.arrival_scales:
            issues.append("experiment: needs at least one arrival scale")
        if any(s <= 0 for s in self.arrival_scales):
            issues.append("experiment: arrival scales must be > 0")
        if self.jobs < 1:
            issues.append("experiment: jobs must be >= 1")
        return issues


@dataclass
class CellResult:
    """One grid cell: either metrics or a recorded failure."""

    policy: str
    seed: int
    arrival_scale: float
    metrics: Optional[EpisodeMetrics]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.metrics is None


@dataclass
class ExperimentResult:
    """All cells of a grid plus per-(policy, scale) aggregates."""

    spec: ExperimentSpec
    cells: List[CellResult]
    digests: Dict[Tuple[int, float], str]
    aggregates: List[dict]

    def cell(self, policy: str, seed: int, scale: float = None) -> CellResult:
        if scale is None:
            scale = self.spec.arrival_scales[0]
        for c in self.cells:
            if c.policy == policy and c.seed == seed and c.arrival_scale == scale:
                return c
        raise KeyError((policy, seed, scale))

    def aggregate(self, policy: str, scale: float = None) -> dict:
        if scale is None:
            scale = self.spec.arrival_scales[0]
        for row in self.aggregates:
            if row["policy"] == policy and row["arrival_scale"] == scale:
                return row
        raise KeyError((policy, scale))


def cell_name(policy: str, seed: int, scale: float) -> str:
    return "%s_s%d_x%g" % (policy, seed, scale)


def experiment_cells(spec: ExperimentSpec) -> List[Tuple[str, int, float]]:
    """Deterministic cell order: scale-major, then seed, then policy."""
    return [
        (policy, seed, scale)
        for scale in spec.arrival_scales
        for seed in spec.seeds
        for policy in spec.policies
    ]


def _run_cell(
    config: SimulationConfig, policy: str, seed: int, scale: float, cell_dir
) -> CellResult:
    try:
        metrics = run_episode(
            config.with_arrival_scale(scale), policy, seed, out_dir=cell_dir
        )
        return CellResult(policy, seed, scale, metrics)
    except Exception as exc:  # an unusable cell must not kill the grid
        return CellResult(
            policy, seed, scale, None, "%s: %s" % (type(exc).__name__, exc)
        )


def aggregate_cells(cells: Sequence[CellResult]) -> List[dict]:
    """Mean/std (population) over seeds for each (policy, scale) group.

    Failed cells are skipped and surface as ``n_failed``;
    ``energy_per_job_kwh`` averages only the cells where it exists.
    """
    keys: List[Tuple[str, float]] = []
    for c in cells:
        key = (c.policy, c.arrival_scale)
        if key not in keys:
            keys.append(key)
    rows = []
    for policy, scale in keys:
        group = [c for c in cells if (c.policy, c.arrival_scale) == (policy, scale)]
        ok = [c.metrics for c in group if not c.failed]
        metrics = {}
        for name in METRIC_FIELDS:
            values = [getattr(m, name) for m in ok]
            values = [v for v in values if v is not None]
            if values:
                metrics[name] = {
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                }
        rows.append(
            {
                "policy": policy,
                "arrival_scale": scale,
                "n_cells": len(group),
                "n_failed": len(group) - len(ok),
                "metrics": metrics,
            }
        )
    return rows


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run every cell of the grid and aggregate.

    Seeds are paired: each (seed, scale) pair sees one arrival schedule
    and ambient realization across all policy arms, which the harness
    verifies by comparing schedule digests.  Failures are recorded in
    their cell and excluded from aggregates.  With ``jobs > 1`` cells
    run in a process pool; results are identical to a serial run.
    """
    issues = spec.validate()
    if issues:
        raise ValueError("; ".join(issues))
    out_root = Path(spec.out_dir) if spec.out_dir is not None else None
    grid = experiment_cells(spec)
    args = []
    for policy, seed, scale in grid:
        cell_dir = (
            out_root / "cells" / cell_name(policy, seed, scale)
            if out_root is not None
            else None
        )
        args.append((spec.config, policy, seed, scale, cell_dir))

    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            cells = list(pool.map(_run_cell, *zip(*args)))
    else:
        cells = [_run_cell(*a) for a in args]

    digests: Dict[Tuple[int, float], str] = {}
    for c in cells:
        if c.failed:
            continue
        key = (c.seed, c.arrival_scale)
        first = digests.setdefault(key, c.metrics.schedule_digest)
        if c.metrics.schedule_digest != first:
            raise RuntimeError(
                "paired seeds diverged: seed %d scale %g gave different "
                "schedules across policy arms" % key
            )

    result = ExperimentResult(spec, cells, digests, aggregate_cells(cells))
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        write_aggregates_csv(out_root / "summary.csv", result.aggregates)
    return result


def write_aggregates_csv(path, aggregates: List[dict]) -> None:
    """Wide aggregate table: one row per (policy, scale), mean/std pairs."""
    header = ["policy", "arrival_scale", "n_cells", "n_failed"]
    for name in METRIC_FIELDS:
        header.extend(("%s_mean" % name, "%s_std" % name))
    lines = [",".join(header)]
    for row in aggregates:
        cells = [
            row["policy"],
            repr(float(row["arrival_scale"])),
            "%d" % row["n_cells"],
            "%d" % row["n_failed"],
        ]
        for name in METRIC_FIELDS:
            stat = row["metrics"].get(name)
            cells.extend(
                ("", "") if stat is None else (repr(stat["mean"]), repr(stat["std"]))
            )
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def format_summary_table(
    aggregates: List[dict], scale: Optional[float] = None
) -> str:
    """Render aggregates as a sectioned text table, policies as columns.

    Values show mean +/- std over seeds; a cell whose group recorded
    failures is annotated with the failure count.
    """
    if scale is None:
        scale = aggregates[0]["arrival_scale"]
    rows = [r for r in aggregates if r["arrival_scale"] == scale]
    policies = [r["policy"] for r in rows]
    by_policy = {r["policy"]: r for r in rows}

    label_w = max(
        len("  " + label) for _, fields in TABLE_LAYOUT for _, label in fields
    )
    col_w = max(18, max(len(p) for p in policies) + 2)
    out = ["arrival scale x%g, %d seed(s)" % (scale, rows[0]["n_cells"])]
    out.append(
        " " * label_w + "".join(p.rjust(col_w) for p in policies)
    )
    for section, fields in TABLE_LAYOUT:
        out.append(section)
        for name, label in fields:
            cells = []
            for p in policies:
                row = by_policy[p]
                stat = row["metrics"].get(name)
                if stat is None:
                    text = "-"
                else:
                    text = "%.2f+-%.2f" % (stat["mean"], stat["std"])
                if row["n_failed"]:
                    text += " (%d failed)" % row["n_failed"]
                cells.append(text.rjust(col_w))
            out.append(("  " + label).ljust(label_w) + "".join(cells))
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------
# saturation sweeps
# ----------------------------------------------------------------------

#: Frontier columns, one row per (arrival scale, policy).
FRONTIER_FIELDS = (
    "util_mean_fleet_pct",
    "backlog_mean",
    "temp_max_c",
    "throttle_pct",
)


def saturation_sweep(spec: ExperimentSpec) -> Tuple[ExperimentResult, List[dict]]:
    """Sweep the arrival-scale grid and reduce to a frontier table.

    Each frontier row holds the seed-mean fleet utilization, backlog,
    peak temperature, and throttling exposure for one (scale, policy)
    pair, ready for plotting load against congestion and heat.
    """
    result = run_experiment(spec)
    frontier = []
    for scale in spec.arrival_scales:
        for policy in spec.policies:
            agg = result.aggregate(policy, scale)
            row = {"arrival_scale": scale, "policy": policy}
            for name in FRONTIER_FIELDS:
                stat = agg["metrics"].get(name)
                row[name] = None if stat is None else stat["mean"]
            frontier.append(row)
    if spec.out_dir is not None:
        write_frontier_csv(Path(spec.out_dir) / "frontier.csv", frontier)
    return result, frontier


def write_frontier_csv(path, frontier: List[dict]) -> None:
    header = ("arrival_scale", "policy") + FRONTIER_FIELDS
    lines = [",".join(header)]
    for row in frontier:
        cells = [repr(float(row["arrival_scale"])), row["policy"]]
        for name in FRONTIER_FIELDS:
            cells.append("" if row[name] is None else repr(float(row[name])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class KneeReport:
    """Piecewise slopes of a load-response curve and the detected knee."""

    slopes: np.ndarray
    ratio: float
    knee_x: Optional[float]


def detect_knee(
    xs: Sequence[float], ys: Sequence[float], threshold: float = 5.0
) -> KneeReport:
    """Find where a response curve bends upward.

    The curve is reduced to finite-difference slopes between grid
    points; the knee is the first grid point whose incoming slope
    exceeds ``threshold`` times the first slope (floored at 1e-9 so a
    flat start cannot hide a bend).  ``knee_x`` is ``None`` when the
    curve never steepens that much.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 2:
        return KneeReport(np.zeros(0), 0.0, None)
    slopes = np.diff(ys) / np.diff(xs)
    base = max(float(slopes[0]), 1e-9)
    ratio = float(slopes.max()) / base
    knee_x = None
    for i in range(len(slopes)):
        if slopes[i] > threshold * base:
            knee_x = float(xs[i + 1])
            break
    return KneeReport(slopes, ratio, knee_x)
