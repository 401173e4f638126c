"""Command-line front end for the simulator and benchmark harness.

Subcommands map onto the package layers: ``validate`` checks a fleet
configuration, ``episode`` and ``replay`` run single closed-loop cells,
``rq1`` reproduces the nominal-load policy comparison, and ``rq2`` and
``sweep`` run arrival-rate saturation sweeps.  Exit codes are 0 on
success, 1 for usage or configuration errors, and 2 when a run recorded
a runtime fault.

Output directories are treated as immutable run records: a command
refuses to write into a non-empty directory unless ``--overwrite`` is
given, and every file it writes can be regenerated bit-for-bit from the
per-cell logs.
"""

import argparse
from dataclasses import dataclass
import json
from pathlib import Path
import sys
import traceback
from typing import Optional, Tuple

import numpy as np

from . import evaluation as ev
from .config import SimulationConfig
from .policies import POLICIES
from .presets import PRESETS, load_preset
from .workload import build_schedule, load_schedule, save_schedule

#: Column order of the nominal benchmark table.
POLICY_ORDER = ("random", "greedy", "thermal", "powercool", "scmpc", "hmpc")

#: Defaults for the saturation benchmark: the policies worth contrasting
#: (myopic, power-aware, coordinated) over a grid spanning light load to
#: well past fleet saturation.
SWEEP_POLICIES = ("greedy", "powercool", "hmpc")
SWEEP_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)

RQ1_SEEDS = (0, 1, 2, 3, 4)
SWEEP_SEEDS = (0, 1, 2)


class UsageError(Exception):
    """Bad flags or an unusable configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    """Everything one invocation resolved from its command line."""

    command: str
    config_ref: str
    seeds: Tuple[int, ...]
    policies: Optional[Tuple[str, ...]]
    lambda_grid: Optional[Tuple[float, ...]]
    out: Optional[str]
    jobs: int
    verbose: bool
    overwrite: bool
    schedule: Optional[str] = None

    @staticmethod
    def from_args(ns: argparse.Namespace) -> "RunManifest":
        if getattr(ns, "seeds", None) is not None:
            seeds = tuple(ns.seeds)
        elif getattr(ns, "seed", None) is not None:
            seeds = (ns.seed,)
        else:
            seeds = ()
        policies = getattr(ns, "policy", None)
        grid = getattr(ns, "lambda_grid", None)
        return RunManifest(
            command=ns.command,
            config_ref=ns.config,
            seeds=seeds,
            policies=tuple(policies) if policies else None,
            lambda_grid=tuple(grid) if grid else None,
            out=getattr(ns, "out", None),
            jobs=getattr(ns, "jobs", 1),
            verbose=bool(getattr(ns, "verbose", False)),
            overwrite=bool(getattr(ns, "overwrite", False)),
            schedule=getattr(ns, "schedule", None),
        )


# ----------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------


def check_policies(names) -> Tuple[str, ...]:
    """Reject unknown policy names before any compute is spent."""
    known = set(POLICIES) | {"scmpc", "hmpc"}
    unknown = [n for n in names if n not in known]
    if unknown:
        raise UsageError(
            "unknown policy %s (have: %s)"
            % (", ".join(unknown), ", ".join(sorted(known)))
        )
    return tuple(names)


def resolve_config(ref: str) -> SimulationConfig:
    """Turn a preset name or JSON file path into a validated config."""
    if ref in PRESETS:
        config = load_preset(ref)
    else:
        path = Path(ref)
        if not path.exists():
            raise UsageError(
                "config %r is neither a preset (%s) nor a readable file"
                % (ref, ", ".join(sorted(PRESETS)))
            )
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError("config %s: %s" % (path, exc))
        try:
            config = SimulationConfig.from_dict(data)
        except (KeyError, TypeError) as exc:
            raise UsageError("config %s: malformed: %s" % (path, exc))
    issues = config.validate()
    if issues:
        raise UsageError(
            "config %r is invalid:\n  %s" % (ref, "\n  ".join(issues))
        )
    return config


def prepare_out(out: Optional[str], overwrite: bool) -> Optional[Path]:
    """Create the output directory, refusing to clobber prior runs."""
    if out is None:
        return None
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise UsageError(
            "output directory %s is not empty (pass --overwrite to replace it)"
            % path
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _report_cells(result: ev.ExperimentResult, verbose: bool) -> int:
    """Print per-cell status; return the number of failed cells."""
    failed = 0
    for cell in result.cells:
        if cell.failed:
            failed += 1
            print(
                "cell %s: FAILED: %s"
                % (ev.cell_name(cell.policy, cell.seed, cell.arrival_scale), cell.error),
                file=sys.stderr,
            )
        elif verbose:
            m = cell.metrics
            print(
                "cell %s: util %.1f%% backlog %.1f temp_max %.2fC "
                "throttle %.2f%% energy %.1fkWh"
                % (
                    ev.cell_name(cell.policy, cell.seed, cell.arrival_scale),
                    m.util_mean_fleet_pct,
                    m.backlog_mean,
                    m.temp_max_c,
                    m.throttle_pct,
                    m.energy_total_kwh,
                )
            )
    return failed


def _write_thermal_csv(path: Path, result: ev.ExperimentResult) -> None:
    """Per-(scale, policy) distribution of site-step hall temperatures."""
    header = (
        "arrival_scale,policy,temp_p50_c,temp_p90_c,temp_p99_c,temp_max_c"
    )
    lines = [header]
    spec = result.spec
    for scale in spec.arrival_scales:
        for policy in spec.policies:
            temps = [
                c.metrics.series["temp_c"].ravel()
                for c in result.cells
                if (c.policy, c.arrival_scale) == (policy, scale) and not c.failed
            ]
            cells = [repr(float(scale)), policy]
            if temps:
                pooled = np.concatenate(temps)
                p50, p90, p99 = np.percentile(pooled, (50.0, 90.0, 99.0))
                cells.extend(
                    repr(float(v)) for v in (p50, p90, p99, pooled.max())
                )
            else:
                cells.extend(("", "", "", ""))
            lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def _format_frontier(frontier) -> str:
    header = "%8s  %-10s %10s %12s %12s %12s" % (
        "scale",
        "policy",
        "util[%]",
        "backlog",
        "temp_max[C]",
        "throttle[%]",
    )
    lines = [header]
    for row in frontier:
        values = tuple(
            float("nan") if row[k] is None else row[k] for k in ev.FRONTIER_FIELDS
        )
        lines.append(
            "%8g  %-10s %10.2f %12.2f %12.2f %12.2f"
            % ((row["arrival_scale"], row["policy"]) + values)
        )
    return "\n".join(lines) + "\n"


def _run_sweep(man: RunManifest, policies, grid, seeds) -> int:
    config = resolve_config(man.config_ref)
    out = prepare_out(man.out, man.overwrite)
    spec = ev.ExperimentSpec(
        config=config,
        policies=check_policies(man.policies or policies),
        seeds=tuple(man.seeds or seeds),
        arrival_scales=tuple(man.lambda_grid or grid),
        out_dir=None if out is None else str(out),
        jobs=man.jobs,
    )
    result, frontier = ev.saturation_sweep(spec)
    failed = _report_cells(result, man.verbose)
    print(_format_frontier(frontier), end="")
    for policy in spec.policies:
        rows = [r for r in frontier if r["policy"] == policy]
        usable = [r for r in rows if r["backlog_mean"] is not None]
        if len(usable) == len(rows):
            report = ev.detect_knee(
                [r["arrival_scale"] for r in rows],
                [r["backlog_mean"] for r in rows],
            )
            where = "none" if report.knee_x is None else "x%g" % report.knee_x
            print(
                "knee[%s]: slope ratio %.1f, onset %s" % (policy, report.ratio, where)
            )
    if out is not None:
        _write_thermal_csv(out / "thermal.csv", result)
    return 2 if failed else 0


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_validate(man: RunManifest) -> int:
    try:
        config = resolve_config(man.config_ref)
    except UsageError as exc:
        print("invalid: %s" % exc, file=sys.stderr)
        return 1
    print(
        "config %r ok: %d sites, %d clusters, %d steps"
        % (
            man.config_ref,
            len(config.sites()),
            len(config.clusters()),
            config.episode_length(),
        )
    )
    return 0


def cmd_episode(man: RunManifest) -> int:
    config = resolve_config(man.config_ref)
    out = prepare_out(man.out, man.overwrite)
    seed = man.seeds[0] if man.seeds else 0
    policy = check_policies(man.policies or ("greedy",))[0]
    schedule = None
    if out is not None:
        # archive the workload so the run can be replayed bit-for-bit
        schedule = build_schedule(config.workload, seed)
        save_schedule(out / "schedule.json", schedule)
    metrics = ev.run_episode(config, policy, seed, out_dir=out, schedule=schedule)
    print(json.dumps(metrics.summary_dict(), sort_keys=True, indent=2))
    return 2 if metrics.faults else 0


def cmd_replay(man: RunManifest) -> int:
    config = resolve_config(man.config_ref)
    if man.schedule is None:
        raise UsageError("replay needs --schedule <file>")
    path = Path(man.schedule)
    if not path.exists():
        raise UsageError("schedule file %s does not exist" % path)
    schedule = load_schedule(path)
    out = prepare_out(man.out, man.overwrite)
    seed = man.seeds[0] if man.seeds else 0
    policy = check_policies(man.policies or ("greedy",))[0]
    metrics = ev.run_episode(config, policy, seed, out_dir=out, schedule=schedule)
    print(json.dumps(metrics.summary_dict(), sort_keys=True, indent=2))
    return 2 if metrics.faults else 0


def cmd_rq1(man: RunManifest) -> int:
    """Nominal-load comparison: every policy against paired seeds."""
    config = resolve_config(man.config_ref)
    out = prepare_out(man.out, man.overwrite)
    spec = ev.ExperimentSpec(
        config=config,
        policies=check_policies(man.policies or POLICY_ORDER),
        seeds=tuple(man.seeds or RQ1_SEEDS),
        arrival_scales=(1.0,),
        out_dir=None if out is None else str(out),
        jobs=man.jobs,
    )
    result = ev.run_experiment(spec)
    failed = _report_cells(result, man.verbose)
    table = ev.format_summary_table(result.aggregates)
    print(table, end="")
    if out is not None:
        (out / "table.txt").write_text(table)
    return 2 if failed else 0


def cmd_rq2(man: RunManifest) -> int:
    """Saturation benchmark: arrival-rate sweep of the contrasting policies."""
    return _run_sweep(man, SWEEP_POLICIES, SWEEP_GRID, SWEEP_SEEDS)


def cmd_sweep(man: RunManifest) -> int:
    """Arrival-rate sweep with explicitly chosen policies and grid."""
    if not man.policies:
        raise UsageError("sweep needs at least one --policy")
    if not man.lambda_grid:
        raise UsageError("sweep needs --lambda-grid")
    return _run_sweep(man, man.policies, man.lambda_grid, SWEEP_SEEDS)


COMMANDS = {
    "validate": cmd_validate,
    "episode": cmd_episode,
    "replay": cmd_replay,
    "rq1": cmd_rq1,
    "rq2": cmd_rq2,
    "sweep": cmd_sweep,
}


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, seeds: bool) -> None:
    p.add_argument(
        "--config",
        default="nominal",
        help="preset name (%s) or JSON config path" % ", ".join(sorted(PRESETS)),
    )
    p.add_argument("--out", help="output directory for logs and tables")
    p.add_argument(
        "--overwrite",
        action="store_true",
        help="allow writing into a non-empty output directory",
    )
    p.add_argument("--verbose", action="store_true", help="per-cell progress")
    if seeds:
        p.add_argument(
            "--seeds", type=int, nargs="+", help="seeds for the Monte Carlo grid"
        )
        p.add_argument(
            "--jobs", type=int, default=1, help="worker processes for grid cells"
        )
    else:
        p.add_argument("--seed", type=int, default=0, help="episode seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="thermsched",
        description="Thermal- and power-aware fleet scheduling benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a configuration and exit")
    _add_common(p, seeds=False)

    p = sub.add_parser("episode", help="run a single closed-loop episode")
    _add_common(p, seeds=False)
    p.add_argument("--policy", nargs="+", help="policy name (first one is used)")

    p = sub.add_parser("replay", help="re-run an episode from an archived schedule")
    _add_common(p, seeds=False)
    p.add_argument("--policy", nargs="+", help="policy name (first one is used)")
    p.add_argument("--schedule", help="schedule JSON written by 'episode --out'")

    p = sub.add_parser("rq1", help="nominal-load comparison of all policies")
    _add_common(p, seeds=True)
    p.add_argument("--policy", nargs="+", help="restrict to these policies")

    p = sub.add_parser("rq2", help="arrival-rate saturation sweep (default grid)")
    _add_common(p, seeds=True)
    p.add_argument("--policy", nargs="+", help="override the swept policies")
    p.add_argument(
        "--lambda-grid", type=float, nargs="+", help="override the arrival scales"
    )

    p = sub.add_parser("sweep", help="arrival-rate sweep with explicit grid")
    _add_common(p, seeds=True)
    p.add_argument("--policy", nargs="+", help="policies to sweep")
    p.add_argument(
        "--lambda-grid", type=float, nargs="+", help="arrival scales to sweep"
    )

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        man = RunManifest.from_args(ns)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    try:
        return COMMANDS[man.command](man)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except Exception as exc:  # contained runtime fault, exit code 2
        print("fault: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        if man.verbose:
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
