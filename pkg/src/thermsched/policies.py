"""Myopic placement baselines.

Every policy scores candidate clusters per job and walks the arrival batch in
order, keeping a tentative view of utilization (and site temperature, where
the score uses it) so later jobs in the batch see the capacity earlier ones
just claimed.  Scores only ever rank clusters inside the feasible set, so a
well-formed policy never triggers the environment's infeasible-assignment
conversion.  Heuristics emit no cooling setpoints; the environment applies
each site's fixed configured target.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from .config import SimulationConfig
from .environment import Action, Observation, PlacementView
from .workload import GPU, Job, stream_rng


class FleetStatics:
    """Immutable per-cluster/per-site arrays policies score against.

    Arrays are in ascending id order, matching the observation layout.
    """

    def __init__(self, config: SimulationConfig):
        sites = config.sites()
        clusters = config.clusters()
        self.cluster_ids = [c.id for c in clusters]
        self.site_ids = [d.id for d in sites]
        dc_pos = {d.id: i for i, d in enumerate(sites)}
        self.n_clusters = len(clusters)
        self.n_sites = len(sites)
        self.hardware = np.array(
            [1 if c.hardware == GPU else 0 for c in clusters], dtype=np.int8
        )
        self.capacity = np.array([c.physics.capacity_cu for c in clusters])
        self.alpha = np.array([c.physics.heat_per_cu for c in clusters])
        self.phi = np.array([c.physics.power_per_cu for c in clusters])
        self.kappa = np.array([c.physics.cooling_share for c in clusters])
        self.inflow = np.array([c.physics.grid_inflow_w for c in clusters])
        self.dc_index = np.array(
            [dc_pos[c.physics.datacenter_id] for c in clusters], dtype=np.int64
        )
        self.setpoint_c = np.array([d.setpoint_c for d in sites])
        self.resistance = np.array([d.physics.thermal_resistance for d in sites])
        self.kp = np.array([d.physics.kp for d in sites])

    def view(self, obs: Observation) -> PlacementView:
        """Tentative placement state reconstructed from an observation."""
        C = self.n_clusters
        per_cluster = obs.vector[: 3 * C].reshape(C, 3)
        per_site = obs.vector[3 * C :].reshape(self.n_sites, 3)
        return PlacementView(
            hardware=self.hardware,
            c_eff=per_cluster[:, 1].copy(),
            util=obs.utilization,
            power=per_cluster[:, 0].copy(),
            phi=self.phi,
            kappa=self.kappa,
            inflow=self.inflow,
            dc_index=self.dc_index,
            cool_w=obs.cool_w,
            temp_c=per_site[:, 0].copy(),
            alpha=self.alpha,
        )


class Policy:
    """Base protocol: act(obs) -> Action, reset(seed) between episodes."""

    name = "base"

    def __init__(self, config: SimulationConfig, seed: int = 0):
        self.config = config
        self.fleet = FleetStatics(config)
        self.seed = seed
        self.reset(seed)

    def reset(self, seed: int) -> None:
        self.seed = seed
        self._tie_rng = stream_rng(seed, "policy-ties-%s" % self.name)

    def act(self, obs: Observation) -> Action:
        raise NotImplementedError

    # -- shared batch walk -------------------------------------------------
    def _assign_batch(self, obs: Observation) -> Dict[int, int]:
        view = self.fleet.view(obs)
        assignments: Dict[int, int] = {}
        for job in obs.arrivals:
            mask = view.feasible_mask(job)
            candidates = np.flatnonzero(mask)
            if len(candidates) == 0:
                assignments[job.id] = 0
                continue
            pick = self._choose(job, candidates, view)
            view.commit(job, pick)
            assignments[job.id] = self.fleet.cluster_ids[pick]
        return assignments

    def _choose(self, job: Job, candidates: np.ndarray, view: PlacementView) -> int:
        raise NotImplementedError

    def _pick_min(self, candidates: np.ndarray, scores: np.ndarray) -> int:
        """Lowest score wins.  Exact ties go to the lowest cluster id
        (candidates are in ascending id order) unless the config asks for
        seeded tie-breaking, which draws uniformly among the tied set."""
        if self.config.policy.tie_break == "seeded":
            best = scores.min()
            tied = candidates[np.flatnonzero(np.abs(scores - best) <= 1e-12)]
            return int(self._tie_rng.choice(tied))
        return int(candidates[int(np.argmin(scores))])


class RandomPolicy(Policy):
    """Uniform choice over the feasible set; defer when it is empty."""

    name = "random"

    def reset(self, seed: int) -> None:
        super().reset(seed)
        self.rng = stream_rng(seed, "policy-random")

    def _choose(self, job, candidates, view):
        return int(self.rng.choice(candidates))

    def act(self, obs: Observation) -> Action:
        return Action(assignments=self._assign_batch(obs))


class GreedyPolicy(Policy):
    """Least normalized utilization u/c_eff among feasible clusters."""

    name = "greedy"

    def _choose(self, job, candidates, view):
        scores = view.util[candidates] / view.c_eff[candidates]
        return self._pick_min(candidates, scores)

    def act(self, obs: Observation) -> Action:
        return Action(assignments=self._assign_batch(obs))


class ThermalPolicy(Policy):
    """Least projected hotspot: site temperature plus the job's heat bump.

    The heat bump alpha*r is used directly as a ranking proxy; only the
    ordering matters, not its physical scale.
    """

    name = "thermal"

    def _choose(self, job, candidates, view):
        scores = (
            view.temp_c[view.dc_index[candidates]]
            + self.fleet.alpha[candidates] * job.cu
        )
        return self._pick_min(candidates, scores)

    def act(self, obs: Observation) -> Action:
        return Action(assignments=self._assign_batch(obs))


class PowerCoolPolicy(Policy):
    """Least marginal electrical burden: compute draw plus a linear estimate
    of the extra chiller power the placement provokes.

    The chiller estimate is gain * (temp - setpoint + R * alpha * r), floored
    at zero since the plant cannot cool less than not-at-all.  The gain
    defaults to each site's proportional PID gain.
    """

    name = "powercool"

    def __init__(self, config: SimulationConfig, seed: int = 0):
        super().__init__(config, seed)
        p = config.policy
        self.omega = p.omega
        if p.gamma is not None:
            self.gamma = np.full(self.fleet.n_sites, float(p.gamma))
        else:
            self.gamma = self.fleet.kp.copy()

    def _choose(self, job, candidates, view):
        dc = view.dc_index[candidates]
        gap = (
            view.temp_c[dc]
            - self.fleet.setpoint_c[dc]
            + self.fleet.resistance[dc] * self.fleet.alpha[candidates] * job.cu
        )
        cool_hat = np.maximum(0.0, self.gamma[dc] * gap)
        scores = self.fleet.phi[candidates] * job.cu + self.omega * cool_hat
        return self._pick_min(candidates, scores)

    def act(self, obs: Observation) -> Action:
        return Action(assignments=self._assign_batch(obs))


POLICIES = {
    "random": RandomPolicy,
    "greedy": GreedyPolicy,
    "thermal": ThermalPolicy,
    "powercool": PowerCoolPolicy,
}


def make_policy(name: str, config: SimulationConfig, seed: int = 0) -> Policy:
    """Instantiate any policy, including the MPC controllers, by name."""
    if name in POLICIES:
        return POLICIES[name](config, seed)
    if name in ("scmpc", "hmpc"):
        from . import mpc

        return mpc.make_mpc_policy(name, config, seed)
    raise KeyError(
        "unknown policy %r (have: %s)"
        % (name, ", ".join(sorted(POLICIES) + ["scmpc", "hmpc"]))
    )
