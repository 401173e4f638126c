"""Workload sources: trace replay and synthetic generation.

A workload is an arrival schedule, timestep -> list of jobs, materialized
deterministically from (config, seed).  Both sources share the same pipeline:

    parse/draw jobs -> bucket by arrival step (cap + spill-forward)
                    -> demand normalization (trace only)
                    -> hardware affinity tagging
                    -> arrival-rate scaling (thinning / replication)

The cap bounds how many jobs can land in one bucket; overflow spills into the
following buckets in arrival order rather than being dropped, so total work is
preserved within the horizon.  Rate scaling happens after capping: a scaled-up
schedule deliberately exceeds the per-step cap, that is the stress being
studied.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

CPU = "cpu"
GPU = "gpu"
HARDWARE_KINDS = (CPU, GPU)


def stream_rng(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible generator for a named random stream."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())))
    )


@dataclass
class Job:
    """One schedulable unit of work.

    id        unique within a schedule
    cu        resource demand in compute units, held for the whole runtime
    duration  runtime in whole timesteps (>= 1)
    priority  carried from the trace; no shipped policy consumes it
    hardware  "cpu" or "gpu"; jobs only run on matching clusters
    arrival   timestep the job enters the system
    remaining live countdown while executing (mutable)
    """

    id: int
    cu: float
    duration: int
    priority: int
    hardware: str
    arrival: int
    remaining: int = -1

    def __post_init__(self):
        if self.remaining < 0:
            self.remaining = self.duration


@dataclass(frozen=True)
class WorkloadConfig:
    """Everything needed to materialize an arrival schedule.

    source               "synthetic" or "trace"
    arrival_cap          max jobs per bucket before rate scaling
    gpu_fraction         Bernoulli parameter for hardware affinity
    arrival_scale        rate multiplier applied last (the sweep knob)
    episode_length       number of timesteps in the horizon
    timestep_s           seconds per timestep

    synthetic knobs: per-bucket counts are Poisson(arrival_cap), job sizes are
    uniform in cu_range, durations uniform integers in duration_range.

    trace knobs: CSV columns start_ts,end_ts,plan_cpu[,priority] (header
    auto-detected, order remappable via column_indices); rows with start_ts in
    [slice_start_s, slice_start_s + horizon) are selected; demands are scaled
    so the episode's peak instantaneous demand equals peak_demand_fraction of
    fleet_capacity_cu (skipped when fleet_capacity_cu is None).
    """

    source: str = "synthetic"
    arrival_cap: int = 200
    gpu_fraction: float = 0.6
    arrival_scale: float = 1.0
    episode_length: int = 288
    timestep_s: float = 300.0
    cu_range: Tuple[float, float] = (150.0, 450.0)
    duration_range: Tuple[int, int] = (6, 18)
    trace_path: Optional[str] = None
    slice_start_s: float = 0.0
    peak_demand_fraction: float = 0.65
    fleet_capacity_cu: Optional[float] = None
    column_indices: Tuple[int, int, int, int] = (0, 1, 2, 3)

    def validate(self) -> list:
        issues = []
        if self.source not in ("synthetic", "trace"):
            issues.append("source must be 'synthetic' or 'trace'")
        if self.arrival_cap < 0:
            issues.append("arrival_cap must be >= 0")
        if not 0.0 <= self.gpu_fraction <= 1.0:
            issues.append("gpu_fraction must lie in [0, 1]")
        if self.arrival_scale < 0:
            issues.append("arrival_scale must be >= 0")
        if self.episode_length <= 0:
            issues.append("episode_length must be > 0")
        if self.timestep_s <= 0:
            issues.append("timestep_s must be > 0")
        if self.cu_range[0] <= 0 or self.cu_range[1] < self.cu_range[0]:
            issues.append("cu_range must satisfy 0 < lo <= hi")
        if self.duration_range[0] < 1 or self.duration_range[1] < self.duration_range[0]:
            issues.append("duration_range must satisfy 1 <= lo <= hi")
        if self.source == "trace" and not self.trace_path:
            issues.append("trace source requires trace_path")
        if not 0.0 < self.peak_demand_fraction <= 1.0:
            issues.append("peak_demand_fraction must lie in (0, 1]")
        return issues


Schedule = Dict[int, List[Job]]


def _bucket_with_cap(jobs: List[Job], cfg: WorkloadConfig) -> Schedule:
    """Group jobs by arrival step, capping each bucket and spilling overflow
    forward in arrival order.  Overflow past the horizon is dropped (it would
    arrive after the episode ends)."""
    pending: List[Job] = []
    by_step: Dict[int, List[Job]] = {}
    for job in jobs:
        by_step.setdefault(job.arrival, []).append(job)
    schedule: Schedule = {}
    for t in range(cfg.episode_length):
        pending.extend(by_step.get(t, []))
        take = pending[: cfg.arrival_cap]
        pending = pending[cfg.arrival_cap :]
        if take:
            for job in take:
                job.arrival = t
            schedule[t] = take
    return schedule


def _assign_affinity(jobs: List[Job], cfg: WorkloadConfig, seed: int) -> None:
    rng = stream_rng(seed, "affinity")
    draws = rng.random(len(jobs))
    for job, x in zip(jobs, draws):
        job.hardware = GPU if x < cfg.gpu_fraction else CPU


def _normalize_demand(schedule: Schedule, cfg: WorkloadConfig) -> None:
    """Scale job demands so peak instantaneous demand hits the configured
    fraction of fleet capacity."""
    if cfg.fleet_capacity_cu is None:
        return
    occupancy = np.zeros(cfg.episode_length)
    for t, jobs in schedule.items():
        for job in jobs:
            end = min(cfg.episode_length, t + job.duration)
            occupancy[t:end] += job.cu
    peak = occupancy.max()
    if peak <= 0:
        return
    factor = cfg.peak_demand_fraction * cfg.fleet_capacity_cu / peak
    for jobs in schedule.values():
        for job in jobs:
            job.cu *= factor


def load_trace(path, cfg: WorkloadConfig, seed: int) -> Schedule:
    """Parse a cluster trace CSV into an arrival schedule.

    Expected row shape: start_ts,end_ts,plan_cpu[,priority] with timestamps in
    seconds and demand in trace CPU units.  Raises ValueError with the
    offending row number on malformed rows, and "empty slice" when no row
    falls inside the configured window.
    """
    i_start, i_end, i_cpu, i_prio = cfg.column_indices
    horizon_s = cfg.episode_length * cfg.timestep_s
    jobs: List[Job] = []
    next_id = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            needed = max(i_start, i_end, i_cpu) + 1
            if len(parts) < needed:
                raise ValueError(
                    "row %d: expected at least %d columns, got %d"
                    % (lineno, needed, len(parts))
                )
            try:
                start = float(parts[i_start])
                end = float(parts[i_end])
                cpu = float(parts[i_cpu])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ValueError("row %d: non-numeric field" % lineno)
            if end < start:
                raise ValueError("row %d: end_ts precedes start_ts" % lineno)
            if cpu <= 0:
                raise ValueError("row %d: plan_cpu must be > 0" % lineno)
            if not (cfg.slice_start_s <= start < cfg.slice_start_s + horizon_s):
                continue
            priority = 1
            if len(parts) > i_prio and parts[i_prio]:
                try:
                    priority = int(float(parts[i_prio]))
                except ValueError:
                    raise ValueError("row %d: non-numeric priority" % lineno)
            rel = start - cfg.slice_start_s
            arrival = int(rel // cfg.timestep_s)
            duration = max(1, math.ceil((end - start) / cfg.timestep_s))
            jobs.append(
                Job(
                    id=next_id,
                    cu=cpu,
                    duration=duration,
                    priority=priority,
                    hardware=CPU,
                    arrival=arrival,
                )
            )
            next_id += 1
    if not jobs:
        raise ValueError("empty slice")
    _assign_affinity(jobs, cfg, seed)
    schedule = _bucket_with_cap(jobs, cfg)
    _normalize_demand(schedule, cfg)
    return schedule


def generate_synthetic(cfg: WorkloadConfig, seed: int) -> Schedule:
    """Draw a synthetic schedule: Poisson(arrival_cap) jobs per step with
    uniform sizes/durations, capped with spill, then rate-scaled by
    cfg.arrival_scale."""
    rng = stream_rng(seed, "synthetic")
    jobs: List[Job] = []
    next_id = 0
    for t in range(cfg.episode_length):
        count = int(rng.poisson(cfg.arrival_cap))
        for _ in range(count):
            cu = float(rng.uniform(cfg.cu_range[0], cfg.cu_range[1]))
            duration = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
            priority = int(rng.integers(1, 4))
            jobs.append(
                Job(
                    id=next_id,
                    cu=cu,
                    duration=duration,
                    priority=priority,
                    hardware=CPU,
                    arrival=t,
                )
            )
            next_id += 1
    _assign_affinity(jobs, cfg, seed)
    schedule = _bucket_with_cap(jobs, cfg)
    if cfg.arrival_scale != 1.0:
        schedule = scale_arrivals(schedule, cfg.arrival_scale, seed)
    return schedule


def scale_arrivals(schedule: Schedule, scale: float, seed: int) -> Schedule:
    """Rescale a schedule's arrival rate.

    scale == 1 returns the schedule unchanged.  scale < 1 thins jobs by
    independent Bernoulli(scale) keeps.  scale > 1 replicates: every job
    yields floor(scale) copies plus one more with probability frac(scale);
    duplicates get fresh ids and a seeded +/-10% demand jitter, and land in
    the same bucket.  Integer scale factors therefore multiply bucket counts
    exactly.
    """
    if scale < 0:
        raise ValueError("scale must be >= 0")
    if scale == 1.0:
        return schedule
    rng = stream_rng(seed, "scale")
    out: Schedule = {}
    if scale < 1.0:
        for t in sorted(schedule):
            kept = [job for job in schedule[t] if rng.random() < scale]
            if kept:
                out[t] = kept
        return out
    whole = int(math.floor(scale))
    frac = scale - whole
    next_id = 1 + max(
        (job.id for jobs in schedule.values() for job in jobs), default=-1
    )
    for t in sorted(schedule):
        bucket: List[Job] = []
        for job in schedule[t]:
            copies = whole + (1 if frac > 0 and rng.random() < frac else 0)
            bucket.append(job)
            for _ in range(copies - 1):
                dup = replace(
                    job,
                    id=next_id,
                    cu=job.cu * float(rng.uniform(0.9, 1.1)),
                    remaining=job.duration,
                )
                next_id += 1
                bucket.append(dup)
        out[t] = bucket
    return out


def build_schedule(cfg: WorkloadConfig, seed: int) -> Schedule:
    """Materialize the arrival schedule for (cfg, seed).

    Trace sources apply cfg.arrival_scale here (synthetic generation applies
    it internally so both paths scale exactly once).
    """
    if cfg.source == "synthetic":
        return generate_synthetic(cfg, seed)
    if cfg.source == "trace":
        schedule = load_trace(cfg.trace_path, cfg, seed)
        if cfg.arrival_scale != 1.0:
            schedule = scale_arrivals(schedule, cfg.arrival_scale, seed)
        return schedule
    raise ValueError("unknown workload source %r" % (cfg.source,))


def schedule_totals(schedule: Schedule) -> Tuple[int, float]:
    """(job count, total CU demand) over the whole schedule."""
    n = sum(len(jobs) for jobs in schedule.values())
    cu = sum(job.cu for jobs in schedule.values() for job in jobs)
    return n, cu


def save_schedule(path, schedule: Schedule) -> None:
    """Write a schedule as line-delimited records: t,id,cu,duration,priority,hardware."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,id,cu,duration,priority,hardware\n")
        for t in sorted(schedule):
            for job in schedule[t]:
                fh.write(
                    "%d,%d,%r,%d,%d,%s\n"
                    % (t, job.id, job.cu, job.duration, job.priority, job.hardware)
                )


def load_schedule(path) -> Schedule:
    """Inverse of save_schedule."""
    schedule: Schedule = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("t,"):
            raise ValueError("not a schedule file (missing header)")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError("row %d: expected 6 fields" % lineno)
            t = int(parts[0])
            job = Job(
                id=int(parts[1]),
                cu=float(parts[2]),
                duration=int(parts[3]),
                priority=int(parts[4]),
                hardware=parts[5],
                arrival=t,
            )
            if job.hardware not in HARDWARE_KINDS:
                raise ValueError("row %d: unknown hardware %r" % (lineno, job.hardware))
            schedule.setdefault(t, []).append(job)
    return schedule


def schedule_hash(schedule: Schedule) -> str:
    """Canonical digest of a schedule; identical streams hash identically."""
    h = hashlib.sha256()
    for t in sorted(schedule):
        for job in schedule[t]:
            h.update(
                (
                    "%d,%d,%r,%d,%d,%s\n"
                    % (t, job.id, job.cu, job.duration, job.priority, job.hardware)
                ).encode()
            )
    return h.hexdigest()
