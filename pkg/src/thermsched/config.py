"""Fleet configuration schema: dataclasses, validation, JSON round-trip.

A SimulationConfig fully determines an experiment cell together with a seed:
sites (thermal plant, tariffs), clusters (capacity, electrical coefficients),
workload source, policy selection, and controller settings.  Validation
returns per-field diagnostics rather than raising, so the CLI can print all
problems at once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .physics import ClusterPhysicsParams, DatacenterPhysicsParams
from .workload import HARDWARE_KINDS, WorkloadConfig

POLICY_NAMES = ("random", "greedy", "thermal", "powercool", "scmpc", "hmpc")


@dataclass(frozen=True)
class ClusterConfig:
    """One cluster: identity, hardware kind, and electrical coefficients."""

    id: int
    hardware: str
    physics: ClusterPhysicsParams
    power_init_w: float = 0.0

    def validate(self) -> list:
        issues = ["cluster %d: %s" % (self.id, m) for m in self.physics.validate()]
        if self.hardware not in HARDWARE_KINDS:
            issues.append("cluster %d: hardware must be one of %s" % (self.id, HARDWARE_KINDS))
        if self.power_init_w < 0:
            issues.append("cluster %d: power_init_w must be >= 0" % self.id)
        return issues


@dataclass(frozen=True)
class DatacenterConfig:
    """One site: thermal plant parameters plus operational settings."""

    id: int
    name: str
    physics: DatacenterPhysicsParams
    setpoint_c: float
    temp_init_c: Optional[float] = None
    ambient_trace_path: Optional[str] = None
    clusters: Tuple[ClusterConfig, ...] = ()

    def initial_temp_c(self) -> float:
        return self.setpoint_c if self.temp_init_c is None else self.temp_init_c

    def validate(self, dt: float) -> list:
        issues = ["site %d: %s" % (self.id, m) for m in self.physics.validate(dt)]
        if not self.clusters:
            issues.append("site %d: has no clusters" % self.id)
        for cl in self.clusters:
            issues.extend(cl.validate())
            if cl.physics.datacenter_id != self.id:
                issues.append(
                    "cluster %d: datacenter_id %d does not match enclosing site %d"
                    % (cl.id, cl.physics.datacenter_id, self.id)
                )
        if self.clusters:
            share = sum(cl.physics.cooling_share for cl in self.clusters)
            if abs(share - 1.0) > 1e-6:
                issues.append(
                    "site %d: cluster cooling_share values sum to %.6f, expected 1"
                    % (self.id, share)
                )
        return issues


@dataclass(frozen=True)
class PolicyConfig:
    """Which placement policy runs and its knobs.

    omega   cooling-pressure weight of the power-cooling heuristic
    gamma   cooling-response proxy gain; None uses each site's kp
    tie_break  "lowest_id" or "seeded" (shuffled among exact ties)
    """

    name: str = "greedy"
    omega: float = 1.0
    gamma: Optional[float] = None
    tie_break: str = "lowest_id"

    def validate(self) -> list:
        issues = []
        if self.name not in POLICY_NAMES:
            issues.append(
                "policy: unknown name %r (have: %s)"
                % (self.name, ", ".join(POLICY_NAMES))
            )
        if self.tie_break not in ("lowest_id", "seeded"):
            issues.append("policy: tie_break must be 'lowest_id' or 'seeded'")
        if self.omega < 0:
            issues.append("policy: omega must be >= 0")
        return issues


@dataclass(frozen=True)
class MpcConfig:
    """Controller settings shared by the receding-horizon policies.

    Weights price the competing objectives (energy kWh, queued/unadmitted
    backlog, squared temperature deviation, unadmitted-job penalty, soft
    thermal slack, scheduling-stage rejection).  The soft thermal limit sits a
    guard band below each site's throttle onset; the setpoint-only controller
    additionally enforces its hard ceiling at the throttle limit.

    util_target bounds the hierarchical controller's admission planning: the
    supervisory stage treats util_target * capacity as the fill line, so
    under overload the fleet regulates to that load instead of saturating and
    the slack above it stays available as thermal headroom.  1.0 disables the
    ceiling.
    """

    energy_weight: float = 1.0
    backlog_weight: float = 10.0
    temperature_weight: float = 0.1
    admission_weight: float = 5.0
    slack_weight: float = 100.0
    rejection_weight: float = 50.0
    horizon_supervisory: int = 12
    horizon_scheduling: int = 6
    guard_margin_c: float = 1.5
    util_target: float = 0.7
    theta_ref: Optional[Dict[int, float]] = None
    grad_iterations: int = 20
    multi_starts: int = 3
    fd_epsilon: float = 1e-3
    constraint_tol: float = 1e-6
    lp_max_iter: int = 2000

    def validate(self) -> list:
        issues = []
        if self.horizon_scheduling > self.horizon_supervisory:
            issues.append("mpc: horizon_scheduling must not exceed horizon_supervisory")
        if min(self.horizon_supervisory, self.horizon_scheduling) < 1:
            issues.append("mpc: horizons must be >= 1")
        if self.grad_iterations < 1 or self.multi_starts < 1:
            issues.append("mpc: iteration/start counts must be >= 1")
        if not 0.0 < self.util_target <= 1.0:
            issues.append("mpc: util_target must be in (0, 1]")
        for name in (
            "energy_weight",
            "backlog_weight",
            "temperature_weight",
            "admission_weight",
            "slack_weight",
            "rejection_weight",
        ):
            if getattr(self, name) < 0:
                issues.append("mpc: %s must be >= 0" % name)
        return issues


@dataclass(frozen=True)
class SimulationConfig:
    """Complete description of a simulated fleet and experiment cell."""

    datacenters: Tuple[DatacenterConfig, ...]
    workload: WorkloadConfig = WorkloadConfig()
    policy: PolicyConfig = PolicyConfig()
    mpc: MpcConfig = MpcConfig()
    setpoint_min_c: float = 18.0
    setpoint_max_c: float = 35.0
    presentation_cap: Optional[int] = None  # None -> 2 * arrival_cap

    # -- structure helpers -------------------------------------------------
    def sites(self) -> List[DatacenterConfig]:
        return sorted(self.datacenters, key=lambda d: d.id)

    def clusters(self) -> List[ClusterConfig]:
        out = []
        for dc in self.sites():
            out.extend(dc.clusters)
        return sorted(out, key=lambda c: c.id)

    def fleet_capacity_cu(self) -> float:
        return sum(c.physics.capacity_cu for c in self.clusters())

    def class_capacity_cu(self, hardware: str) -> float:
        return sum(
            c.physics.capacity_cu for c in self.clusters() if c.hardware == hardware
        )

    def effective_presentation_cap(self) -> int:
        if self.presentation_cap is not None:
            return self.presentation_cap
        if self.workload.arrival_cap > 0:
            return 2 * self.workload.arrival_cap
        return 10**9  # injected-schedule setups: present the whole backlog

    def dt_s(self) -> float:
        return self.workload.timestep_s

    def episode_length(self) -> int:
        return self.workload.episode_length

    # -- mutation helpers (frozen dataclass: return modified copies) -------
    def with_arrival_scale(self, scale: float) -> "SimulationConfig":
        return replace(self, workload=replace(self.workload, arrival_scale=scale))

    def with_policy(self, name: str) -> "SimulationConfig":
        return replace(self, policy=replace(self.policy, name=name))

    def with_workload(self, **kwargs) -> "SimulationConfig":
        return replace(self, workload=replace(self.workload, **kwargs))

    # -- validation --------------------------------------------------------
    def validate(self) -> list:
        issues = []
        if not self.datacenters:
            issues.append("config has no datacenters")
            return issues
        dt = self.dt_s()
        dc_ids = [d.id for d in self.datacenters]
        if len(set(dc_ids)) != len(dc_ids):
            issues.append("duplicate site ids")
        cl_ids = [c.id for c in self.clusters()]
        if len(set(cl_ids)) != len(cl_ids):
            issues.append("duplicate cluster ids")
        for dc in self.datacenters:
            issues.extend(dc.validate(dt))
            if not (
                self.setpoint_min_c <= dc.setpoint_c <= self.setpoint_max_c
            ):
                issues.append(
                    "site %d: setpoint %.1f outside box [%.1f, %.1f]"
                    % (dc.id, dc.setpoint_c, self.setpoint_min_c, self.setpoint_max_c)
                )
        if self.setpoint_min_c >= self.setpoint_max_c:
            issues.append("setpoint_min_c must be below setpoint_max_c")
        issues.extend(self.workload.validate())
        issues.extend(self.policy.validate())
        issues.extend(self.mpc.validate())
        if self.presentation_cap is not None and self.presentation_cap < 1:
            issues.append("presentation_cap must be >= 1 when set")
        return issues

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "SimulationConfig":
        def tup(x):
            return tuple(x) if x is not None else None

        dcs = []
        for d in data["datacenters"]:
            phys = dict(d["physics"])
            phys["peak_hours"] = tup(phys.get("peak_hours", ()))
            clusters = []
            for c in d.get("clusters", []):
                clusters.append(
                    ClusterConfig(
                        id=c["id"],
                        hardware=c["hardware"],
                        physics=ClusterPhysicsParams(**c["physics"]),
                        power_init_w=c.get("power_init_w", 0.0),
                    )
                )
            dcs.append(
                DatacenterConfig(
                    id=d["id"],
                    name=d.get("name", "site-%d" % d["id"]),
                    physics=DatacenterPhysicsParams(**phys),
                    setpoint_c=d["setpoint_c"],
                    temp_init_c=d.get("temp_init_c"),
                    ambient_trace_path=d.get("ambient_trace_path"),
                    clusters=tuple(clusters),
                )
            )
        wl = dict(data.get("workload", {}))
        for key in ("cu_range", "duration_range", "column_indices"):
            if key in wl:
                wl[key] = tup(wl[key])
        mpc = dict(data.get("mpc", {}))
        if mpc.get("theta_ref") is not None:
            mpc["theta_ref"] = {int(k): float(v) for k, v in mpc["theta_ref"].items()}
        return SimulationConfig(
            datacenters=tuple(dcs),
            workload=WorkloadConfig(**wl),
            policy=PolicyConfig(**data.get("policy", {})),
            mpc=MpcConfig(**mpc),
            setpoint_min_c=data.get("setpoint_min_c", 18.0),
            setpoint_max_c=data.get("setpoint_max_c", 35.0),
            presentation_cap=data.get("presentation_cap"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "SimulationConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return SimulationConfig.from_dict(json.load(fh))
