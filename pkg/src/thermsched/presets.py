"""Shipped reference configurations.

``nominal_fleet``: a 20-cluster, 4-site continental fleet (cool coastal, hot
desert, continental north, continental south) sized so that the nominal
synthetic workload (200 jobs/step, 60% GPU) lands around 65-70% fleet
utilization, no site throttles at nominal load, and at least one GPU-heavy
site exceeds its cooling envelope when driven to full utilization.

``tiny_desk``: a 4-cluster, 2-site fleet that runs an episode in well under a
second, for CI and desk experiments.

Per-cluster heat coefficients are drawn once per preset from a fixed seeded
stream inside the class range of each site, so presets are deterministic
constants without hand-typing twenty numbers.
"""

from __future__ import annotations

from typing import Dict, Tuple

from .config import (
    ClusterConfig,
    DatacenterConfig,
    MpcConfig,
    PolicyConfig,
    SimulationConfig,
)
from .physics import ClusterPhysicsParams, DatacenterPhysicsParams
from .workload import CPU, GPU, WorkloadConfig, stream_rng

_ALPHA_SEED = 0
_POWER_PER_HEAT = 2.0  # electrical draw per unit of heat coefficient


def _site(
    dc_id: int,
    name: str,
    rng,
    *,
    resistance: float,
    capacitance: float,
    cooling_max_w: float,
    throttle_floor: float,
    ambient_base: float,
    ambient_amp: float,
    price_peak: float,
    price_offpeak: float,
    kp: float,
    ki: float,
    kd: float,
    setpoint: float,
    cpu_clusters: Tuple[int, float, Tuple[float, float]],
    gpu_clusters: Tuple[int, float, Tuple[float, float]],
    first_cluster_id: int,
) -> DatacenterConfig:
    physics = DatacenterPhysicsParams(
        thermal_resistance=resistance,
        thermal_capacitance=capacitance,
        cooling_max_w=cooling_max_w,
        throttle_onset_c=32.0,
        throttle_limit_c=35.0,
        throttle_floor=throttle_floor,
        kp=kp,
        ki=ki,
        kd=kd,
        ambient_base_c=ambient_base,
        ambient_amplitude_c=ambient_amp,
        ambient_noise_std_c=0.5,
        price_peak=price_peak,
        price_offpeak=price_offpeak,
        peak_hours=tuple(range(8, 20)),
    )
    clusters = []
    cid = first_cluster_id
    n_total = cpu_clusters[0] + gpu_clusters[0]
    for hardware, (count, cap_each, alpha_range) in (
        (CPU, cpu_clusters),
        (GPU, gpu_clusters),
    ):
        for _ in range(count):
            alpha = round(float(rng.uniform(*alpha_range)), 3)
            phi = _POWER_PER_HEAT * alpha
            inflow = phi * cap_each + (1.0 / n_total) * cooling_max_w
            clusters.append(
                ClusterConfig(
                    id=cid,
                    hardware=hardware,
                    physics=ClusterPhysicsParams(
                        datacenter_id=dc_id,
                        capacity_cu=float(cap_each),
                        heat_per_cu=alpha,
                        power_per_cu=phi,
                        cooling_share=1.0 / n_total,
                        grid_inflow_w=inflow,
                    ),
                    power_init_w=10.0 * inflow,
                )
            )
            cid += 1
    return DatacenterConfig(
        id=dc_id,
        name=name,
        physics=physics,
        setpoint_c=setpoint,
        clusters=tuple(clusters),
    )


def nominal_fleet() -> SimulationConfig:
    """Reference 4-site, 20-cluster fleet at the nominal workload point."""
    rng = stream_rng(_ALPHA_SEED, "preset-alpha")
    sites = (
        _site(
            1,
            "coastal-nw",
            rng,
            resistance=0.003,
            capacitance=7.0e8,
            cooling_max_w=0.68e6,
            throttle_floor=0.2,
            ambient_base=10.0,
            ambient_amp=5.0,
            price_peak=0.08,
            price_offpeak=0.06,
            kp=5000.0,
            ki=100.0,
            kd=1000.0,
            setpoint=23.0,
            cpu_clusters=(3, 42953.0, (0.3, 0.7)),
            gpu_clusters=(2, 61570.0, (4.0, 5.0)),
            first_cluster_id=1,
        ),
        _site(
            2,
            "desert-sw",
            rng,
            resistance=0.004,
            capacitance=6.0e8,
            cooling_max_w=1.22e6,
            throttle_floor=0.7,
            ambient_base=38.0,
            ambient_amp=12.0,
            price_peak=0.22,
            price_offpeak=0.14,
            kp=7000.0,
            ki=150.0,
            kd=1500.0,
            setpoint=25.0,
            cpu_clusters=(2, 32500.0, (0.6, 0.8)),
            gpu_clusters=(3, 56667.0, (6.5, 8.0)),
            first_cluster_id=6,
        ),
        _site(
            3,
            "lakes-n",
            rng,
            resistance=0.005,
            capacitance=5.5e8,
            cooling_max_w=0.30e6,
            throttle_floor=0.4,
            ambient_base=16.0,
            ambient_amp=10.0,
            price_peak=0.13,
            price_offpeak=0.09,
            kp=4500.0,
            ki=90.0,
            kd=900.0,
            setpoint=24.0,
            cpu_clusters=(3, 48000.0, (0.4, 0.6)),
            gpu_clusters=(2, 30000.0, (3.5, 4.5)),
            first_cluster_id=11,
        ),
        _site(
            4,
            "plains-s",
            rng,
            resistance=0.002,
            capacitance=5.2e8,
            cooling_max_w=1.97e6,
            throttle_floor=0.3,
            ambient_base=30.0,
            ambient_amp=11.0,
            price_peak=0.19,
            price_offpeak=0.11,
            kp=6000.0,
            ki=120.0,
            kd=1200.0,
            setpoint=24.0,
            cpu_clusters=(2, 45000.0, (0.5, 0.7)),
            gpu_clusters=(3, 93333.0, (6.0, 9.0)),
            first_cluster_id=16,
        ),
    )
    return SimulationConfig(
        datacenters=sites,
        workload=WorkloadConfig(
            source="synthetic",
            arrival_cap=200,
            gpu_fraction=0.6,
            arrival_scale=1.0,
            episode_length=288,
            timestep_s=300.0,
            cu_range=(150.0, 450.0),
            duration_range=(6, 18),
        ),
        policy=PolicyConfig(name="greedy"),
        mpc=MpcConfig(),
    )


def tiny_desk() -> SimulationConfig:
    """Two small sites, one CPU + one GPU cluster each; runs in well under a
    second per episode."""
    rng = stream_rng(_ALPHA_SEED, "preset-alpha-tiny")
    sites = (
        _site(
            1,
            "desk-a",
            rng,
            resistance=0.01,
            capacitance=3.6e5,
            cooling_max_w=12000.0,
            throttle_floor=0.3,
            ambient_base=15.0,
            ambient_amp=5.0,
            price_peak=0.10,
            price_offpeak=0.06,
            kp=600.0,
            ki=0.5,
            kd=100.0,
            setpoint=23.0,
            cpu_clusters=(1, 1200.0, (0.4, 0.6)),
            gpu_clusters=(1, 2000.0, (4.5, 5.5)),
            first_cluster_id=1,
        ),
        _site(
            2,
            "desk-b",
            rng,
            resistance=0.012,
            capacitance=3.0e5,
            cooling_max_w=12000.0,
            throttle_floor=0.4,
            ambient_base=25.0,
            ambient_amp=8.0,
            price_peak=0.12,
            price_offpeak=0.07,
            kp=550.0,
            ki=0.5,
            kd=100.0,
            setpoint=24.0,
            cpu_clusters=(1, 1200.0, (0.4, 0.6)),
            gpu_clusters=(1, 2000.0, (4.5, 5.5)),
            first_cluster_id=3,
        ),
    )
    return SimulationConfig(
        datacenters=sites,
        workload=WorkloadConfig(
            source="synthetic",
            arrival_cap=20,
            gpu_fraction=0.6,
            episode_length=96,
            timestep_s=300.0,
            cu_range=(20.0, 58.0),
            duration_range=(3, 8),
        ),
        policy=PolicyConfig(name="greedy"),
        mpc=MpcConfig(horizon_supervisory=8, horizon_scheduling=4),
    )


PRESETS: Dict[str, callable] = {
    "nominal": nominal_fleet,
    "tiny": tiny_desk,
}


def load_preset(name: str) -> SimulationConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(
            "unknown preset %r (have: %s)" % (name, ", ".join(sorted(PRESETS)))
        )
    return factory()
