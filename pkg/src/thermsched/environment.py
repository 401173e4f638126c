"""Closed-loop discrete-time environment coupling scheduling and site physics.

Each step consumes a composite action (per-job placement for the presented
batch, optional per-site cooling setpoints) and advances the fleet through a
fixed sub-step order:

    1. validate and apply placements (infeasible ones convert to defer)
    2. enqueue accepted placements on their cluster's FIFO queue
    3. dispatch queued jobs into throttled-capacity headroom (backfilling)
    4. execute: decrement remaining runtimes, retire completions
    5. site heat load -> PID chiller command -> hall temperature update
    6. recompute throttled capacity (affects next step's dispatch)
    7. per-cluster power ledger update (admission keeps it non-negative)
    8. advance exogenous signals (ambient, tariff)
    9. account energy, cost, and counters into the step record

Jobs the policy defers (and placements that fail validation) land in a global
pending pool that is re-presented with future arrival batches, oldest first,
up to a presentation cap.  Running jobs are never evicted: if throttling
drops capacity below active utilization, dispatch simply stalls until
completions free it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import SimulationConfig
from .physics import (
    PidState,
    ambient_series,
    electricity_price,
    load_ambient_trace,
    pid_cooling,
    step_energy_kwh,
    thermal_step,
    throttle_factor,
)
from .workload import CPU, GPU, Job, Schedule, build_schedule, schedule_hash, stream_rng

EPS = 1e-9


class InvariantViolation(RuntimeError):
    """A state invariant failed; the simulation is not trustworthy."""


class EpisodeComplete(RuntimeError):
    """step() was called after the configured horizon."""


@dataclass
class Action:
    """Composite control input for one step.

    assignments: job id -> cluster id, or 0 to defer.  Jobs absent from the
    mapping are deferred.  cooling_setpoints: site id -> target temperature;
    None (or a missing site) applies the site's fixed configured setpoint.
    """

    assignments: Dict[int, int] = field(default_factory=dict)
    cooling_setpoints: Optional[Dict[int, float]] = None


@dataclass
class Observation:
    """What a policy sees after reset/step.

    vector packs [power, throttled_capacity, queue_length] per cluster (id
    order) then [hall_temp, ambient_temp, price] per site (id order).  The
    arrival batch and live utilization are structured side information:
    utilization is derivable fleet state (sum of active demand), exposed so
    policies can compute headroom without shadow-accounting the episode.
    """

    t: int
    vector: np.ndarray
    arrivals: Tuple[Job, ...]
    utilization: np.ndarray
    cool_w: np.ndarray
    pool_size: int


@dataclass
class StepInfo:
    """Per-step record with everything the metrics layer needs."""

    t: int
    arrivals_new: int
    presented: int
    assigned: int
    deferred: int
    infeasible_assignments: int
    unplaceable: int
    dispatched: int
    completed: int
    pool_size: int
    queue_lengths: np.ndarray
    util_exec_cu: np.ndarray
    c_eff: np.ndarray
    power_w: np.ndarray
    power_deficits: int
    temp_c: np.ndarray
    ambient_c: np.ndarray
    price: np.ndarray
    setpoint_c: np.ndarray
    cool_w: np.ndarray
    compute_kwh: np.ndarray
    cooling_kwh: np.ndarray
    cost_usd: float

    @property
    def energy_kwh(self) -> float:
        return float(self.compute_kwh.sum() + self.cooling_kwh.sum())


class PlacementView:
    """Tentative cluster-state bookkeeping shared by policies and validation.

    Tracks utilization (and a site-temperature proxy) as a batch of jobs is
    assigned one by one, so every assignment in the batch is feasible against
    the state left by the previous ones.
    """

    def __init__(
        self,
        hardware: np.ndarray,
        c_eff: np.ndarray,
        util: np.ndarray,
        power: np.ndarray,
        phi: np.ndarray,
        kappa: np.ndarray,
        inflow: np.ndarray,
        dc_index: np.ndarray,
        cool_w: np.ndarray,
        temp_c: np.ndarray,
        alpha: np.ndarray,
    ):
        self.hardware = hardware
        self.c_eff = c_eff
        self.util = util.copy()
        self.power = power
        self.phi = phi
        self.kappa = kappa
        self.inflow = inflow
        self.dc_index = dc_index
        self.cool_w = cool_w
        self.temp_c = temp_c.copy()
        self.alpha = alpha

    def feasible_mask(self, job: Job) -> np.ndarray:
        hw = 1 if job.hardware == GPU else 0
        headroom_ok = self.c_eff - self.util >= job.cu - EPS
        power_next = (
            self.power
            - self.phi * (self.util + job.cu)
            - self.kappa * self.cool_w[self.dc_index]
            + self.inflow
        )
        return (self.hardware == hw) & headroom_ok & (power_next >= -EPS)

    def commit(self, job: Job, index: int) -> None:
        self.util[index] += job.cu
        self.temp_c[self.dc_index[index]] += self.alpha[index] * job.cu


class SchedulingEnvironment:
    """Stateful fleet simulator driven through reset()/step()."""

    def __init__(self, config: SimulationConfig):
        issues = config.validate()
        if issues:
            raise ValueError("invalid configuration:\n  " + "\n  ".join(issues))
        self.config = config
        self.sites = config.sites()
        self.cluster_configs = config.clusters()
        self.dt = config.dt_s()
        self.horizon = config.episode_length()

        self.cluster_ids = [c.id for c in self.cluster_configs]
        self.site_ids = [d.id for d in self.sites]
        self._cl_index = {cid: i for i, cid in enumerate(self.cluster_ids)}
        self._dc_index = {did: i for i, did in enumerate(self.site_ids)}

        self.n_clusters = len(self.cluster_configs)
        self.n_sites = len(self.sites)
        self.hardware_code = np.array(
            [1 if c.hardware == GPU else 0 for c in self.cluster_configs], dtype=np.int8
        )
        self.capacity = np.array(
            [c.physics.capacity_cu for c in self.cluster_configs]
        )
        self.alpha = np.array([c.physics.heat_per_cu for c in self.cluster_configs])
        self.phi = np.array([c.physics.power_per_cu for c in self.cluster_configs])
        self.kappa = np.array([c.physics.cooling_share for c in self.cluster_configs])
        self.inflow = np.array([c.physics.grid_inflow_w for c in self.cluster_configs])
        self.dc_of_cluster = np.array(
            [self._dc_index[c.physics.datacenter_id] for c in self.cluster_configs],
            dtype=np.int64,
        )
        self.fixed_setpoints = np.array([d.setpoint_c for d in self.sites])
        self._max_cap_per_hw = {
            hw: max(
                (c.physics.capacity_cu for c in self.cluster_configs if c.hardware == hw),
                default=0.0,
            )
            for hw in (CPU, GPU)
        }
        self._reset_done = False

    # -- lifecycle ---------------------------------------------------------
    def reset(self, seed: int, schedule: Optional[Schedule] = None) -> Observation:
        """Initialize state and materialize the episode's exogenous streams.

        The arrival schedule, ambient trajectories, and tariff series depend
        only on (config, seed), never on policy behavior, so paired
        comparisons across policies see identical inputs.  An explicit
        schedule (replay fixture) overrides the configured source and is
        deep-copied before use.
        """
        wl = self.config.workload
        if wl.fleet_capacity_cu is None:
            wl = replace(wl, fleet_capacity_cu=self.config.fleet_capacity_cu())
        if schedule is None:
            self.schedule = build_schedule(wl, seed)
        else:
            self.schedule = {
                t: [replace(j, remaining=j.duration) for j in jobs]
                for t, jobs in schedule.items()
            }
        self.schedule_digest = schedule_hash(self.schedule)
        self.seed = seed

        n_steps = self.horizon + 1
        ambient = []
        for dc in self.sites:
            if dc.ambient_trace_path:
                trace = load_ambient_trace(dc.ambient_trace_path)
                if len(trace) < n_steps:
                    raise ValueError(
                        "site %d: ambient trace has %d steps, needs %d"
                        % (dc.id, len(trace), n_steps)
                    )
                ambient.append(np.asarray(trace[:n_steps], dtype=float))
            else:
                rng = stream_rng(seed, "ambient-%d" % dc.id)
                ambient.append(ambient_series(n_steps, dc.physics, rng))
        self.ambient = np.stack(ambient)  # (D, T+1)
        self.prices = np.stack(
            [
                np.array(
                    [electricity_price(t, dc.physics, self.dt) for t in range(n_steps)]
                )
                for dc in self.sites
            ]
        )

        self.t = 0
        self.temp_c = np.array([d.initial_temp_c() for d in self.sites])
        self.pid = [PidState() for _ in self.sites]
        self.cool_w = np.zeros(self.n_sites)
        self.c_eff = self.capacity * np.array(
            [throttle_factor(self.temp_c[self.dc_of_cluster[i]], self.sites[self.dc_of_cluster[i]].physics) for i in range(self.n_clusters)]
        )
        self.power = np.array([c.power_init_w for c in self.cluster_configs])
        self.util = np.zeros(self.n_clusters)
        self.active: List[List[Job]] = [[] for _ in range(self.n_clusters)]
        self.queues: List[deque] = [deque() for _ in range(self.n_clusters)]
        self.pool: Dict[int, Job] = {}

        self.arrived_total = 0
        self.completed_total = 0
        self.unplaceable: List[Job] = []
        self.infeasible_total = 0
        self.deficit_total = 0
        self._reset_done = True
        return self._make_observation()

    # -- helpers -----------------------------------------------------------
    def placement_view(self) -> PlacementView:
        return PlacementView(
            self.hardware_code,
            self.c_eff,
            self.util,
            self.power,
            self.phi,
            self.kappa,
            self.inflow,
            self.dc_of_cluster,
            self.cool_w,
            self.temp_c,
            self.alpha,
        )

    def feasible_clusters(self, job: Job) -> List[int]:
        """Cluster ids that could accept the job right now (hardware match,
        throttled-capacity headroom, projected power balance)."""
        mask = self.placement_view().feasible_mask(job)
        return [self.cluster_ids[i] for i in np.flatnonzero(mask)]

    def _current_batch(self) -> List[Job]:
        new = self.schedule.get(self.t, [])
        fresh: List[Job] = []
        for job in new:
            cap = self._max_cap_per_hw.get(job.hardware, 0.0)
            if job.cu > cap:
                self.unplaceable.append(job)
            else:
                fresh.append(job)
        self.arrived_total += len(new)
        self._new_count = len(new)
        cap = self.config.effective_presentation_cap()
        budget = max(0, cap - len(fresh))
        represented = []
        for jid in self.pool:
            if len(represented) >= budget:
                break
            represented.append(self.pool[jid])
        return fresh + represented

    def _make_observation(self) -> Observation:
        self._batch = self._current_batch()
        queue_lengths = np.array([len(q) for q in self.queues], dtype=float)
        per_cluster = np.column_stack([self.power, self.c_eff, queue_lengths]).ravel()
        per_site = np.column_stack(
            [self.temp_c, self.ambient[:, self.t], self.prices[:, self.t]]
        ).ravel()
        return Observation(
            t=self.t,
            vector=np.concatenate([per_cluster, per_site]),
            arrivals=tuple(self._batch),
            utilization=self.util.copy(),
            cool_w=self.cool_w.copy(),
            pool_size=len(self.pool),
        )

    def _check_invariants(self) -> None:
        sums = np.array([sum(j.cu for j in cl) for cl in self.active])
        if np.any(np.abs(sums - self.util) > 1e-6):
            raise InvariantViolation("utilization diverged from active-job demand")
        self.util = sums  # resynchronize to kill float drift
        if np.any(self.util < -EPS):
            raise InvariantViolation("negative utilization")
        if np.any(self.util > self.capacity + 1e-6):
            raise InvariantViolation("utilization above nameplate capacity")
        if np.any(self.power < -EPS):
            raise InvariantViolation("negative power budget")
        in_system = (
            self.completed_total
            + sum(len(a) for a in self.active)
            + sum(len(q) for q in self.queues)
            + len(self.pool)
            + len(self.unplaceable)
        )
        if in_system != self.arrived_total:
            raise InvariantViolation(
                "job conservation broken: %d arrived, %d accounted"
                % (self.arrived_total, in_system)
            )

    # -- the step ----------------------------------------------------------
    def step(self, action: Action) -> Tuple[Observation, StepInfo]:
        if not self._reset_done:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.horizon:
            raise EpisodeComplete("episode horizon (%d steps) reached" % self.horizon)

        batch = self._batch
        batch_ids = {j.id for j in batch}
        for jid, target in action.assignments.items():
            if jid not in batch_ids:
                raise ValueError("assignment for job %d not in presented batch" % jid)
            if target != 0 and target not in self._cl_index:
                raise ValueError("assignment to unknown cluster id %d" % target)
        if action.cooling_setpoints:
            for did in action.cooling_setpoints:
                if did not in self._dc_index:
                    raise ValueError("setpoint for unknown site id %d" % did)

        # 1+2: validate placements against tentative state; enqueue accepted
        view = self.placement_view()
        assigned = deferred = infeasible = 0
        for job in batch:
            target = action.assignments.get(job.id, 0)
            if target == 0:
                self.pool.setdefault(job.id, job)
                deferred += 1
                continue
            idx = self._cl_index[target]
            if view.feasible_mask(job)[idx]:
                view.commit(job, idx)
                self.queues[idx].append(job)
                self.pool.pop(job.id, None)
                assigned += 1
            else:
                self.pool.setdefault(job.id, job)
                infeasible += 1
                deferred += 1
        self.infeasible_total += infeasible

        # 3: FIFO dispatch with backfilling under capacity + power headroom
        dispatched = 0
        for i in range(self.n_clusters):
            queue = self.queues[i]
            if not queue:
                continue
            kept = deque()
            u_before = self.util[i]
            while queue:
                job = queue.popleft()
                power_next = (
                    self.power[i]
                    - self.phi[i] * (self.util[i] + job.cu)
                    - self.kappa[i] * self.cool_w[self.dc_of_cluster[i]]
                    + self.inflow[i]
                )
                if (
                    self.util[i] + job.cu <= self.c_eff[i] + EPS
                    and power_next >= -EPS
                ):
                    self.active[i].append(job)
                    self.util[i] += job.cu
                    dispatched += 1
                else:
                    kept.append(job)
            self.queues[i] = kept
            if self.util[i] > max(self.c_eff[i], u_before) + 1e-6:
                raise InvariantViolation("dispatch exceeded throttled capacity")

        # 4: execute one step; jobs heat and draw power through their final step
        util_exec = self.util.copy()
        completed = 0
        for i in range(self.n_clusters):
            still = []
            for job in self.active[i]:
                job.remaining -= 1
                if job.remaining <= 0:
                    completed += 1
                    self.util[i] -= job.cu
                else:
                    still.append(job)
            self.active[i] = still
        self.completed_total += completed

        # 5: heat load -> chiller -> hall temperature
        setpoints = self.fixed_setpoints.copy()
        if action.cooling_setpoints:
            for did, val in action.cooling_setpoints.items():
                setpoints[self._dc_index[did]] = min(
                    self.config.setpoint_max_c,
                    max(self.config.setpoint_min_c, float(val)),
                )
        heat = np.zeros(self.n_sites)
        np.add.at(heat, self.dc_of_cluster, self.alpha * util_exec)
        new_cool = np.zeros(self.n_sites)
        new_temp = np.zeros(self.n_sites)
        for d, dc in enumerate(self.sites):
            cool, self.pid[d] = pid_cooling(
                self.temp_c[d], setpoints[d], self.pid[d], dc.physics, self.dt
            )
            new_cool[d] = cool
            new_temp[d] = thermal_step(
                self.temp_c[d], heat[d], self.ambient[d, self.t], cool, dc.physics, self.dt
            )
        self.cool_w = new_cool
        self.temp_c = new_temp

        # 6: throttle takes effect for the next step's dispatch
        g = np.array(
            [
                throttle_factor(self.temp_c[self.dc_of_cluster[i]], self.sites[self.dc_of_cluster[i]].physics)
                for i in range(self.n_clusters)
            ]
        )
        self.c_eff = self.capacity * g

        # 7: power ledgers (floored at zero; deficits are counted, and the
        # projection in the dispatch test keeps them at zero in practice)
        deficits = 0
        raw = (
            self.power
            - self.phi * util_exec
            - self.kappa * self.cool_w[self.dc_of_cluster]
            + self.inflow
        )
        neg = raw < 0
        deficits = int(neg.sum())
        self.deficit_total += deficits
        self.power = np.where(neg, 0.0, raw)

        # 8: exogenous signals advance
        prices_now = self.prices[:, self.t].copy()
        ambient_now = self.ambient[:, self.t].copy()
        self.t += 1

        # 9: accounting
        util_map = {self.cluster_ids[i]: util_exec[i] for i in range(self.n_clusters)}
        cp_map = {c.id: c.physics for c in self.cluster_configs}
        cool_map = {self.site_ids[d]: self.cool_w[d] for d in range(self.n_sites)}
        compute_kwh, cooling_kwh = step_energy_kwh(util_map, cp_map, cool_map, self.dt)
        cost = sum(
            prices_now[d] * (compute_kwh[self.site_ids[d]] + cooling_kwh[self.site_ids[d]])
            for d in range(self.n_sites)
        )

        self._check_invariants()

        info = StepInfo(
            t=self.t - 1,
            arrivals_new=self._new_count,
            presented=len(batch),
            assigned=assigned,
            deferred=deferred,
            infeasible_assignments=infeasible,
            unplaceable=len(self.unplaceable),
            dispatched=dispatched,
            completed=completed,
            pool_size=len(self.pool),
            queue_lengths=np.array([len(q) for q in self.queues], dtype=float),
            util_exec_cu=util_exec,
            c_eff=self.c_eff.copy(),
            power_w=self.power.copy(),
            power_deficits=deficits,
            temp_c=self.temp_c.copy(),
            ambient_c=ambient_now,
            price=prices_now,
            setpoint_c=setpoints,
            cool_w=self.cool_w.copy(),
            compute_kwh=np.array([compute_kwh[s] for s in self.site_ids]),
            cooling_kwh=np.array([cooling_kwh[s] for s in self.site_ids]),
            cost_usd=float(cost),
        )
        return self._make_observation(), info
