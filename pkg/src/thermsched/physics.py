"""Site-level physical models for the simulator.

One datacenter hall is a single lumped thermal node: active compute injects
heat, the hall exchanges heat with ambient through a lumped resistance, and a
PID-driven chiller removes heat up to a plant limit.  Hall temperature feeds a
piecewise-linear throttle that derates compute capacity, closing the loop
between scheduling decisions and the thermal plant.  Per-cluster electrical
bookkeeping and time-of-use pricing turn utilization and cooling effort into
energy and cost.

All step functions are pure: state in, state out, no hidden globals.  The
environment owns sequencing; everything here is a single explicit update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

import numpy as np

J_PER_KWH = 3.6e6


@dataclass(frozen=True)
class DatacenterPhysicsParams:
    """Static physical description of one datacenter site.

    thermal_resistance   K/W between hall air and outside ambient
    thermal_capacitance  J/K of hall air plus equipment mass
    cooling_max_w        chiller plant limit (W of heat removal)
    throttle_onset_c     hall temperature where capacity derating begins
    throttle_limit_c     hall temperature where derating bottoms out
    throttle_floor       capacity fraction retained at/above throttle_limit_c
    kp, ki, kd           PID gains driving the chiller (W per K, K*s, K/s)
    ambient_base_c       mean outside temperature
    ambient_amplitude_c  half peak-to-peak of the diurnal swing
    ambient_noise_std_c  per-step Gaussian noise on ambient
    diurnal_period_steps timesteps per full diurnal cycle
    price_peak           $/kWh during peak_hours
    price_offpeak        $/kWh otherwise
    peak_hours           hours-of-day (0..23) billed at the peak rate
    """

    thermal_resistance: float
    thermal_capacitance: float
    cooling_max_w: float
    throttle_onset_c: float = 32.0
    throttle_limit_c: float = 35.0
    throttle_floor: float = 0.2
    kp: float = 5000.0
    ki: float = 100.0
    kd: float = 1000.0
    ambient_base_c: float = 20.0
    ambient_amplitude_c: float = 0.0
    ambient_noise_std_c: float = 0.0
    diurnal_period_steps: int = 288
    price_peak: float = 0.10
    price_offpeak: float = 0.05
    peak_hours: tuple = tuple(range(8, 20))

    def validate(self, dt: float = 300.0) -> list:
        """Return a list of human-readable problems (empty when consistent)."""
        issues = []
        if self.thermal_resistance <= 0:
            issues.append("thermal_resistance must be > 0")
        if self.thermal_capacitance <= 0:
            issues.append("thermal_capacitance must be > 0")
        if self.thermal_resistance > 0 and self.thermal_capacitance > 0:
            ratio = dt / (self.thermal_capacitance * self.thermal_resistance)
            if ratio >= 2.0:
                issues.append(
                    "dt/(C*R) = %.3g >= 2: discrete thermal update is unstable" % ratio
                )
        if self.cooling_max_w < 0:
            issues.append("cooling_max_w must be >= 0")
        if not 0.0 < self.throttle_floor <= 1.0:
            issues.append("throttle_floor must lie in (0, 1]")
        if self.throttle_onset_c >= self.throttle_limit_c:
            issues.append("throttle_onset_c must be below throttle_limit_c")
        if min(self.kp, self.ki, self.kd) < 0:
            issues.append("PID gains must be >= 0")
        if self.ambient_noise_std_c < 0:
            issues.append("ambient_noise_std_c must be >= 0")
        if self.diurnal_period_steps <= 0:
            issues.append("diurnal_period_steps must be > 0")
        if self.price_peak < 0 or self.price_offpeak < 0:
            issues.append("prices must be >= 0")
        if any(h < 0 or h > 23 for h in self.peak_hours):
            issues.append("peak_hours entries must be in 0..23")
        return issues


@dataclass(frozen=True)
class ClusterPhysicsParams:
    """Static electrical/thermal coefficients of one cluster.

    capacity_cu    nameplate compute capacity in compute units (CU)
    heat_per_cu    W of hall heat per active CU
    power_per_cu   W of electrical draw per active CU
    cooling_share  fraction of the site cooling draw billed to this cluster
    grid_inflow_w  per-step replenishment of the cluster power budget
    """

    datacenter_id: int
    capacity_cu: float
    heat_per_cu: float
    power_per_cu: float
    cooling_share: float
    grid_inflow_w: float

    def validate(self) -> list:
        issues = []
        if self.capacity_cu <= 0:
            issues.append("capacity_cu must be > 0")
        if self.heat_per_cu < 0:
            issues.append("heat_per_cu must be >= 0")
        if self.power_per_cu < 0:
            issues.append("power_per_cu must be >= 0")
        if not 0.0 <= self.cooling_share <= 1.0:
            issues.append("cooling_share must lie in [0, 1]")
        if self.grid_inflow_w < 0:
            issues.append("grid_inflow_w must be >= 0")
        return issues


@dataclass(frozen=True)
class PidState:
    """Controller memory carried between steps (error integral, last error)."""

    integral: float = 0.0
    prev_error: float = 0.0


def thermal_step(
    temp_c: float,
    heat_w: float,
    ambient_c: float,
    cool_w: float,
    params: DatacenterPhysicsParams,
    dt: float,
) -> float:
    """One explicit-Euler update of the lumped hall temperature.

    temp' = temp + dt/C * heat - dt/(C*R) * (temp - ambient) - dt/C * cool

    Stable for dt/(C*R) < 2; params.validate() flags violations.
    """
    if not all(map(math.isfinite, (temp_c, heat_w, ambient_c, cool_w))):
        raise ValueError("thermal_step requires finite inputs")
    c = params.thermal_capacitance
    r = params.thermal_resistance
    return (
        temp_c
        + (dt / c) * heat_w
        - (dt / (c * r)) * (temp_c - ambient_c)
        - (dt / c) * cool_w
    )


def thermal_equilibrium(
    heat_w: float, ambient_c: float, cool_w: float, params: DatacenterPhysicsParams
) -> float:
    """Closed-form fixed point of thermal_step under constant inputs."""
    return ambient_c + params.thermal_resistance * (heat_w - cool_w)


def pid_cooling(
    temp_c: float,
    target_c: float,
    state: PidState,
    params: DatacenterPhysicsParams,
    dt: float,
) -> tuple:
    """Chiller command from a one-sided PID on hall temperature.

    The proportional and derivative terms act on max(0, temp - target): the
    plant only removes heat, so undershoot generates no direct actuation.
    The integral uses conditional anti-windup: it accumulates the signed
    excursion, floored at zero and capped so the I term alone can never
    exceed the plant limit.  Without the bleed-down below target, the I term
    latches at the running peak of demanded cooling and drags the hall far
    below its setpoint after every load drop; halls with day-scale thermal
    time constants would still be overcooling a day later.  The final
    command is clipped to [0, cooling_max].

    Returns (cool_w, new_state).
    """
    error = max(0.0, temp_c - target_c)
    integral = max(0.0, state.integral + (temp_c - target_c) * dt)
    if params.ki > 0:
        integral = min(integral, params.cooling_max_w / params.ki)
    derivative = (error - state.prev_error) / dt
    raw = params.kp * error + params.ki * integral + params.kd * derivative
    cool_w = min(params.cooling_max_w, max(0.0, raw))
    return cool_w, PidState(integral=integral, prev_error=error)


def throttle_factor(temp_c: float, params: DatacenterPhysicsParams) -> float:
    """Capacity retention factor g(temp) in [throttle_floor, 1].

    Unity at/below the onset temperature, linear ramp down to the floor at the
    limit temperature, floor beyond.
    """
    span = params.throttle_limit_c - params.throttle_onset_c
    ramp = 1.0 - (1.0 - params.throttle_floor) * (temp_c - params.throttle_onset_c) / span
    return max(params.throttle_floor, min(1.0, ramp))


def ambient_temperature(
    t: int,
    params: DatacenterPhysicsParams,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Outside temperature at timestep t: diurnal sinusoid plus optional noise.

    With rng=None the deterministic (noise-free) profile is returned, which is
    what forecast-driven controllers consume.
    """
    base = params.ambient_base_c + params.ambient_amplitude_c * math.sin(
        2.0 * math.pi * t / params.diurnal_period_steps
    )
    if rng is not None and params.ambient_noise_std_c > 0:
        base += rng.normal(0.0, params.ambient_noise_std_c)
    return base


def ambient_series(
    n_steps: int,
    params: DatacenterPhysicsParams,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Ambient trajectory for timesteps 0..n_steps-1 (one draw per step)."""
    return np.array(
        [ambient_temperature(t, params, rng) for t in range(n_steps)], dtype=float
    )


def load_ambient_trace(path) -> np.ndarray:
    """Read a measured ambient trace: CSV lines ``timestep,temperature_c``.

    A non-numeric first row is treated as a header.  Timesteps must start at 0
    and increase by 1.
    """
    temps = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ValueError("row %d: expected 'timestep,temperature_c'" % lineno)
            try:
                t = int(float(parts[0]))
                temp = float(parts[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError("row %d: non-numeric ambient entry" % lineno)
            if t != len(temps):
                raise ValueError(
                    "row %d: timesteps must be contiguous from 0 (got %d)" % (lineno, t)
                )
            temps.append(temp)
    if not temps:
        raise ValueError("ambient trace is empty")
    return np.array(temps, dtype=float)


def power_step(
    power_w: float,
    util_cu: float,
    cool_w: float,
    params: ClusterPhysicsParams,
    dt: float = 300.0,
) -> float:
    """Raw next-step power budget of one cluster.

    power' = power - power_per_cu * util - cooling_share * cool + grid_inflow

    The ledger is maintained in per-step capacity units, so the terms are
    already per-step rates; dt is accepted for signature symmetry with the
    other step functions but does not scale the balance.  The caller (the
    environment) is responsible for keeping the budget non-negative through
    admission control.
    """
    return (
        power_w
        - params.power_per_cu * util_cu
        - params.cooling_share * cool_w
        + params.grid_inflow_w
    )


def electricity_price(
    t: int, params: DatacenterPhysicsParams, dt: float = 300.0
) -> float:
    """Time-of-use $/kWh at timestep t (hour-of-day resolution)."""
    hour = int(t * dt // 3600) % 24
    return params.price_peak if hour in params.peak_hours else params.price_offpeak


def step_energy_kwh(
    util_cu: Mapping,
    cluster_params: Mapping,
    cool_w: Mapping,
    dt: float,
) -> tuple:
    """Per-site electrical energy drawn during one step.

    util_cu maps cluster id -> active CU, cluster_params maps cluster id ->
    ClusterPhysicsParams, cool_w maps datacenter id -> chiller draw (W).

    Returns (compute_kwh_by_dc, cooling_kwh_by_dc).
    """
    compute = {d: 0.0 for d in cool_w}
    for cid, u in util_cu.items():
        cp = cluster_params[cid]
        compute[cp.datacenter_id] = compute.get(cp.datacenter_id, 0.0) + (
            cp.power_per_cu * u * dt / J_PER_KWH
        )
    cooling = {d: w * dt / J_PER_KWH for d, w in cool_w.items()}
    return compute, cooling


def step_cost(
    util_cu: Mapping,
    cluster_params: Mapping,
    cool_w: Mapping,
    prices: Mapping,
    dt: float,
) -> float:
    """Dollar cost of one step: per-site (compute + cooling) kWh times tariff."""
    compute, cooling = step_energy_kwh(util_cu, cluster_params, cool_w, dt)
    total = 0.0
    for d in cool_w:
        total += prices[d] * (compute.get(d, 0.0) + cooling[d])
    return total
