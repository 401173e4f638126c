"""Receding-horizon admission, placement, and cooling control.

Two controllers share one deterministic forecast model of the fleet:

``scmpc`` (SetpointMpcPolicy) optimizes only the per-site cooling setpoints
over the supervisory horizon and delegates placement to the greedy
heuristic.  A large penalty keeps predicted hall temperatures below the
throttle limit; if the optimized plan still predicts a violation, the
controller commands maximum cooling and flags it.

``hmpc`` (HierarchicalMpcPolicy) plans in two stages.  Stage 1 jointly
optimizes per-class admission fractions and cooling setpoints against the
forecast model by projected gradient with finite differences.  Stage 2
turns the first-step admission quota into per-cluster job counts, one small
LP per site, then balanced rounding and largest-job-first matching produce
the concrete assignment map.  Either stage failing falls back to greedy
placement for that step and logs it.

The forecast model abstracts jobs into per-hardware-class fluid (mean
demand, mean runtime, mean arrival counts) but keeps the exact thermal,
chiller, and throttle equations of the plant, so with frozen utilization
the model's temperature trajectory reproduces the simulator's.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import SimulationConfig
from .environment import Action, Observation
from .physics import J_PER_KWH, ambient_temperature, electricity_price
from .policies import FleetStatics, GreedyPolicy, Policy
from .solver import projected_gradient, solve_lp
from .workload import CPU, GPU, stream_rng

log = logging.getLogger(__name__)

N_TYPES = 2  # hardware classes: 0 = cpu, 1 = gpu
HARD_LIMIT_WEIGHT = 1e6


class FleetModel:
    """Deterministic fleet forecast the controllers optimize against.

    Per-cluster state is a single utilization fluid per hardware class:
    admitted jobs contribute their class's mean demand and drain at the
    class's mean completion rate.  Site thermal dynamics, chiller PID, and
    capacity throttling use the same update equations as the plant, and all
    exogenous inputs (ambient, tariff) are the noise-free profiles.
    """

    def __init__(self, config: SimulationConfig):
        sites = config.sites()
        clusters = config.clusters()
        mcfg = config.mpc
        wl = config.workload
        self.dt = config.dt_s()
        self.n_sites = len(sites)
        self.n_clusters = len(clusters)
        self.site_ids = [d.id for d in sites]
        self.cluster_ids = [c.id for c in clusters]
        dc_pos = {d.id: i for i, d in enumerate(sites)}
        self.dc_index = np.array(
            [dc_pos[c.physics.datacenter_id] for c in clusters], dtype=np.int64
        )
        self.hw = np.array(
            [1 if c.hardware == GPU else 0 for c in clusters], dtype=np.int64
        )
        self.capacity = np.array([c.physics.capacity_cu for c in clusters])
        self.alpha = np.array([c.physics.heat_per_cu for c in clusters])
        self.phi = np.array([c.physics.power_per_cu for c in clusters])
        self.type_mask = np.stack([self.hw == 0, self.hw == 1])
        self.site_matrix = np.zeros((self.n_sites, self.n_clusters))
        self.site_matrix[self.dc_index, np.arange(self.n_clusters)] = 1.0

        self.r_th = np.array([d.physics.thermal_resistance for d in sites])
        self.c_th = np.array([d.physics.thermal_capacitance for d in sites])
        self.phi_max = np.array([d.physics.cooling_max_w for d in sites])
        self.kp = np.array([d.physics.kp for d in sites])
        self.ki = np.array([d.physics.ki for d in sites])
        self.kd = np.array([d.physics.kd for d in sites])
        self.onset = np.array([d.physics.throttle_onset_c for d in sites])
        self.limit = np.array([d.physics.throttle_limit_c for d in sites])
        self.floor_g = np.array([d.physics.throttle_floor for d in sites])
        self._ki_pos = self.ki > 0
        self._integ_cap = np.where(
            self._ki_pos, self.phi_max / np.where(self._ki_pos, self.ki, 1.0), np.inf
        )
        self.fixed_setpoints = np.array([d.setpoint_c for d in sites])
        self.sp_min = config.setpoint_min_c
        self.sp_max = config.setpoint_max_c
        self.guard = self.onset - mcfg.guard_margin_c
        self.admit_capacity = mcfg.util_target * self.capacity
        ref = mcfg.theta_ref or {}
        self.theta_ref = np.array([ref.get(d.id, d.setpoint_c) for d in sites])

        self.r_bar = np.full(N_TYPES, 0.5 * (wl.cu_range[0] + wl.cu_range[1]))
        self.d_bar = np.full(
            N_TYPES, 0.5 * (wl.duration_range[0] + wl.duration_range[1])
        )
        rate = wl.arrival_cap * wl.arrival_scale
        self.arrival_rate = np.array(
            [(1.0 - wl.gpu_fraction) * rate, wl.gpu_fraction * rate]
        )
        self.drain = 1.0 - 1.0 / self.d_bar
        self.drain_c = self.drain[self.hw]

        span = config.episode_length() + mcfg.horizon_supervisory + 2
        self.ambient_fc = np.stack(
            [
                np.array([ambient_temperature(t, d.physics, None) for t in range(span)])
                for d in sites
            ]
        )
        self.price_fc = np.stack(
            [
                np.array([electricity_price(t, d.physics, self.dt) for t in range(span)])
                for d in sites
            ]
        )

        self.w_energy = mcfg.energy_weight
        self.w_backlog = mcfg.backlog_weight
        self.w_temp = mcfg.temperature_weight
        self.w_admit = mcfg.admission_weight
        self.w_slack = mcfg.slack_weight

    # -- physics mirrors (identical update equations, vectorized) ----------
    def pid_vec(
        self,
        temp: np.ndarray,
        target: np.ndarray,
        integral: np.ndarray,
        prev_err: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        err = np.maximum(0.0, temp - target)
        integ = np.maximum(0.0, integral + (temp - target) * self.dt)
        integ = np.where(self._ki_pos, np.minimum(integ, self._integ_cap), integ)
        deriv = (err - prev_err) / self.dt
        raw = self.kp * err + self.ki * integ + self.kd * deriv
        cool = np.minimum(self.phi_max, np.maximum(0.0, raw))
        return cool, integ, err

    def pid_mirror_update(
        self,
        integral: np.ndarray,
        prev_err: np.ndarray,
        temp: np.ndarray,
        target: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Advance a replica of the plant's PID state for a commanded target.

        The plant clips commanded setpoints into the configured box before the
        controller sees them, so the replica clips the same way.
        """
        tgt = np.minimum(self.sp_max, np.maximum(self.sp_min, target))
        _, integ, err = self.pid_vec(temp, tgt, integral, prev_err)
        return integ, err

    def throttle_vec(self, temp: np.ndarray) -> np.ndarray:
        span = self.limit - self.onset
        ramp = 1.0 - (1.0 - self.floor_g) * (temp - self.onset) / span
        return np.clip(ramp, self.floor_g, 1.0)

    # -- the rollout -------------------------------------------------------
    def rollout(
        self,
        t0: int,
        u0: np.ndarray,
        temp0: np.ndarray,
        integral0: np.ndarray,
        prev_err0: np.ndarray,
        counts0: np.ndarray,
        setpoints: np.ndarray,
        rho: Optional[np.ndarray] = None,
        floored: bool = False,
        targeted: bool = False,
        hard_weight: float = 0.0,
    ) -> Dict[str, np.ndarray]:
        """Simulate S candidate plans over the horizon in one batch.

        setpoints: (S, H, D) candidate cooling targets.
        rho: (S, H, N_TYPES) admission fractions of current class capacity
        (None means fully open).  Admissions are min(offered, rho * cap):
        tying the fraction to capacity rather than the offer keeps the
        gradient alive exactly when admission control matters, i.e. when
        offered work exceeds what the fleet should take.
        floored=True switches to integer admission caps (the plan that is
        actually executed); the smooth caps are for gradient evaluation.
        targeted=True plans admissions against util_target * capacity
        instead of the full nameplate, so under sustained overload the
        fleet settles at the target load and the slack above it stays as
        thermal headroom.  Executed load still respects the true throttled
        capacity either way.

        Returns per-candidate objective and trajectories.
        """
        s, h, d = setpoints.shape
        c = self.n_clusters
        sp = np.clip(setpoints, self.sp_min, self.sp_max)
        rho_c = (
            np.ones((s, h, N_TYPES)) if rho is None else np.clip(rho, 0.0, 1.0)
        )
        u = np.broadcast_to(np.asarray(u0, float), (s, c)).copy()
        temp = np.broadcast_to(np.asarray(temp0, float), (s, d)).copy()
        integ = np.broadcast_to(np.asarray(integral0, float), (s, d)).copy()
        prev = np.broadcast_to(np.asarray(prev_err0, float), (s, d)).copy()
        backlog = np.zeros((s, N_TYPES))

        arrive = np.empty((h, N_TYPES))
        arrive[0] = counts0
        if h > 1:
            arrive[1:] = self.arrival_rate
        amb = self.ambient_fc[:, t0 : t0 + h]
        price = self.price_fc[:, t0 : t0 + h]
        kwh = self.dt / J_PER_KWH

        obj = np.zeros(s)
        energy_cost = np.zeros(s)
        temps = np.empty((s, h, d))
        cools = np.empty((s, h, d))
        admits = np.empty((s, h, N_TYPES))
        caps_out = np.empty((s, h, N_TYPES))
        u_pre = np.empty((s, h, c))
        c_eff_out = np.empty((s, h, c))
        backlog_out = np.empty((s, h, N_TYPES))

        for k in range(h):
            g = self.throttle_vec(temp)
            c_eff = self.capacity * g[:, self.dc_index]
            fill = np.minimum(c_eff, self.admit_capacity) if targeted else c_eff
            head = np.maximum(0.0, fill - u)
            u_pre[:, k] = u
            c_eff_out[:, k] = c_eff

            caps = np.empty((s, N_TYPES))
            for tcode in range(N_TYPES):
                per = head[:, self.type_mask[tcode]] / self.r_bar[tcode]
                caps[:, tcode] = (
                    np.floor(per).sum(axis=1) if floored else per.sum(axis=1)
                )
            avail = backlog + arrive[k]
            want = rho_c[:, k, :] * caps
            if floored:
                want = np.floor(want + 0.5)
            adm = np.maximum(0.0, np.minimum(avail, want))
            backlog = avail - adm

            u_exec = u.copy()
            routed = adm * self.r_bar
            for tcode in range(N_TYPES):
                mask = self.type_mask[tcode]
                hpart = head[:, mask]
                tot = hpart.sum(axis=1, keepdims=True)
                w = np.where(tot > 0.0, hpart / np.maximum(tot, 1e-300), 0.0)
                u_exec[:, mask] += routed[:, tcode : tcode + 1] * w

            heat = (u_exec * self.alpha) @ self.site_matrix.T
            cool, integ, prev = self.pid_vec(temp, sp[:, k, :], integ, prev)
            temp = (
                temp
                + (self.dt / self.c_th) * heat
                - (self.dt / (self.c_th * self.r_th)) * (temp - amb[:, k])
                - (self.dt / self.c_th) * cool
            )

            compute_kwh = (u_exec * self.phi) @ self.site_matrix.T * kwh
            cooling_kwh = cool * kwh
            cost = ((compute_kwh + cooling_kwh) * price[:, k]).sum(axis=1)
            energy_cost += cost
            obj += (
                self.w_energy * cost
                + (self.w_backlog + self.w_admit) * backlog.sum(axis=1)
                + self.w_temp * ((temp - self.theta_ref) ** 2).sum(axis=1)
                # quadratic, so the marginal price of running hotter keeps
                # climbing and a deep backlog can never buy through the guard
                + self.w_slack
                * (np.maximum(0.0, temp - self.guard) ** 2).sum(axis=1)
            )
            if hard_weight > 0.0:
                obj += hard_weight * (np.maximum(0.0, temp - self.limit) ** 2).sum(
                    axis=1
                )

            temps[:, k] = temp
            cools[:, k] = cool
            admits[:, k] = adm
            caps_out[:, k] = caps
            backlog_out[:, k] = backlog
            u = u_exec * self.drain_c

        return {
            "objective": obj,
            "energy_cost": energy_cost,
            "temp": temps,
            "cool": cools,
            "admitted": admits,
            "caps": caps_out,
            "u_pre": u_pre,
            "c_eff": c_eff_out,
            "backlog": backlog_out,
        }


def largest_remainder_split(
    total: int, weights: np.ndarray, caps: np.ndarray
) -> np.ndarray:
    """Integer split of total proportional to weights, capped per entry.

    Floors first, then hands out remainders by descending fractional part
    (ties to the lowest index), cycling while capacity remains.  If the caps
    cannot absorb the total, the excess is dropped.
    """
    caps = np.asarray(caps, dtype=np.int64)
    w = np.asarray(weights, dtype=float)
    out = np.zeros(len(w), dtype=np.int64)
    total = int(total)
    if total <= 0 or w.sum() <= 0.0:
        return out
    shares = total * w / w.sum()
    out = np.minimum(np.floor(shares).astype(np.int64), caps)
    frac = shares - np.floor(shares)
    order = np.lexsort((np.arange(len(w)), -frac))
    rem = total - int(out.sum())
    while rem > 0:
        progressed = False
        for idx in order:
            if rem <= 0:
                break
            if out[idx] < caps[idx]:
                out[idx] += 1
                rem -= 1
                progressed = True
        if not progressed:
            break
    return out


def balanced_round(x: np.ndarray, caps: np.ndarray, target: int) -> np.ndarray:
    """Round fractional per-cluster counts down to integers summing to target.

    Floor first, then distribute the remainder by descending fractional part
    (ties to the lowest index) among clusters still under their integer cap.
    Identical clusters with identical fractional shares therefore end at most
    one job apart.
    """
    caps = np.asarray(caps, dtype=np.int64)
    base = np.minimum(np.floor(np.asarray(x, float) + 1e-9).astype(np.int64), caps)
    frac = np.asarray(x, float) - np.floor(np.asarray(x, float) + 1e-9)
    order = np.lexsort((np.arange(len(base)), -frac))
    rem = int(target) - int(base.sum())
    while rem > 0:
        progressed = False
        for idx in order:
            if rem <= 0:
                break
            if base[idx] < caps[idx]:
                base[idx] += 1
                rem -= 1
                progressed = True
        if not progressed:
            break
    return base


def build_dispatch_lp(
    model: FleetModel,
    site_pos: int,
    quotas: np.ndarray,
    u0: np.ndarray,
    c_eff0: np.ndarray,
    t0: int,
    energy_weight: float,
    rejection_weight: float,
    horizon: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, dict]:
    """Assemble one site's dispatch-planning LP.

    Variables are planned placement counts x[i, k] (cluster i of this site,
    period k) followed by per-class rejection slacks r[tcode, k].  Quota rows
    tie each class-period's placements plus slack to the planned admissions;
    headroom rows bound the decay-weighted cumulative load added to each
    cluster by its free capacity below the admission fill line
    (util_target * capacity, same line the quota was planned against, so the
    energy objective cannot concentrate counts where placement would refuse
    them), with the pre-existing load draining at the class completion rate.  The slack columns are an obvious feasible
    basis, so the LP is never infeasible.  Rejection is priced above the
    class's costliest placement: whether work runs at all was decided
    upstream, this stage only chooses where, and sheds what cannot fit.

    quotas: (N_TYPES, horizon) planned admissions for this site.
    Returns (c, a_eq, b_eq, a_ub, b_ub, meta).
    """
    local = np.flatnonzero(model.dc_index == site_pos)
    types = [t for t in range(N_TYPES) if np.any(model.hw[local] == t)]
    nl = len(local)
    h2 = horizon
    nx = nl * h2
    nr = len(types) * h2
    c = np.zeros(nx + nr)
    a_eq = np.zeros((len(types) * h2, nx + nr))
    b_eq = np.zeros(len(types) * h2)
    a_ub = np.zeros((nl * h2, nx + nr))
    b_ub = np.zeros(nl * h2)

    for row_t, tcode in enumerate(types):
        for k in range(h2):
            row = row_t * h2 + k
            for pos, i in enumerate(local):
                if model.hw[i] == tcode:
                    a_eq[row, pos * h2 + k] = 1.0
            a_eq[row, nx + row_t * h2 + k] = 1.0
            b_eq[row] = quotas[tcode, k]

    for pos, i in enumerate(local):
        decay = model.drain_c[i]
        rbar = model.r_bar[model.hw[i]]
        fill = min(c_eff0[i], model.admit_capacity[i])
        for k in range(h2):
            row = pos * h2 + k
            for j in range(k + 1):
                a_ub[row, pos * h2 + j] = rbar * decay ** (k - j)
            b_ub[row] = max(0.0, fill - u0[i] * decay**k)

    prices = model.price_fc[site_pos, t0 : t0 + h2]
    worst = np.zeros(N_TYPES)
    for pos, i in enumerate(local):
        tcode = model.hw[i]
        job_kwh = (
            model.phi[i] * model.r_bar[tcode] * model.d_bar[tcode] * model.dt / J_PER_KWH
        )
        for k in range(h2):
            energy = energy_weight * prices[k] * job_kwh
            # the tiny k term breaks ties toward placing sooner
            c[pos * h2 + k] = energy + 1e-6 * k
            worst[tcode] = max(worst[tcode], energy)
    for row_t, tcode in enumerate(types):
        # costlier than any placement: admission economics were already
        # settled upstream, so rejection only absorbs work that cannot fit
        c[nx + row_t * h2 : nx + (row_t + 1) * h2] = (
            rejection_weight + worst[tcode]
        )

    meta = {"local": local, "types": types, "horizon": h2, "nx": nx}
    return c, a_eq, b_eq, a_ub, b_ub, meta


class _RecedingHorizonPolicy(Policy):
    """Shared machinery: PID-state mirror, warm starts, batched
    finite-difference projected-gradient solves over the forecast model."""

    def __init__(self, config: SimulationConfig, seed: int = 0):
        self.model = FleetModel(config)
        self.greedy = GreedyPolicy(config, seed)
        super().__init__(config, seed)

    def reset(self, seed: int) -> None:
        super().reset(seed)
        self.greedy.reset(seed)
        d = self.model.n_sites
        self.pid_integral = np.zeros(d)
        self.pid_prev_error = np.zeros(d)
        self._plan: Optional[np.ndarray] = None
        self.fallback_count = 0
        self.violation_count = 0
        self.diagnostics: dict = {}
        self._start_rng = stream_rng(seed, "mpc-starts-%s" % self.name)

    # -- observation unpacking --------------------------------------------
    def _site_temps(self, obs: Observation) -> np.ndarray:
        c = self.fleet.n_clusters
        return obs.vector[3 * c :].reshape(-1, 3)[:, 0].copy()

    def _cluster_c_eff(self, obs: Observation) -> np.ndarray:
        c = self.fleet.n_clusters
        return obs.vector[: 3 * c].reshape(c, 3)[:, 1].copy()

    @staticmethod
    def _batch_counts(obs: Observation) -> np.ndarray:
        counts = np.zeros(N_TYPES)
        for job in obs.arrivals:
            counts[1 if job.hardware == GPU else 0] += 1.0
        return counts

    # -- plan bookkeeping --------------------------------------------------
    def _commit_setpoints(
        self, temps: np.ndarray, sp0: np.ndarray
    ) -> Dict[int, float]:
        self.pid_integral, self.pid_prev_error = self.model.pid_mirror_update(
            self.pid_integral, self.pid_prev_error, temps, sp0
        )
        return {
            self.model.site_ids[i]: float(sp0[i]) for i in range(self.model.n_sites)
        }

    @staticmethod
    def _shift_plan(plan: np.ndarray) -> np.ndarray:
        """Receding-horizon warm start: drop step 0, repeat the last step."""
        return np.vstack([plan[1:], plan[-1:]])

    # -- solve loop --------------------------------------------------------
    def _solve(self, value_batch, dim: int, starts: List[np.ndarray], iterations: int, project):
        eps = self.config.mpc.fd_epsilon

        def value(z):
            return float(value_batch(z[None, :])[0])

        def gradient(z):
            zz = np.tile(z, (2 * dim, 1))
            idx = np.arange(dim)
            zz[idx, idx] += eps
            zz[dim + idx, idx] -= eps
            f = value_batch(zz)
            return (f[:dim] - f[dim:]) / (2.0 * eps)

        best_z, best_f = None, np.inf
        for z0 in starts:
            z, f = projected_gradient(
                z0,
                value,
                gradient,
                project,
                iterations=iterations,
                step0=1.0,
                value_many=value_batch,
            )
            if np.isfinite(f) and f < best_f:
                best_z, best_f = z, f
        return best_z, best_f


class SetpointMpcPolicy(_RecedingHorizonPolicy):
    """Supervisory cooling-setpoint optimization; placement stays greedy.

    Admission in the forecast is fully open (everything that fits runs), so
    the only decision is where to hold each hall's temperature: cooler costs
    chiller energy now, warmer risks the throttle derating capacity later.
    """

    name = "scmpc"

    def act(self, obs: Observation) -> Action:
        m = self.model
        cfg = self.config.mpc
        h, d = cfg.horizon_supervisory, m.n_sites
        temps = self._site_temps(obs)
        counts = self._batch_counts(obs)
        state = (
            obs.utilization.astype(float),
            temps,
            self.pid_integral,
            self.pid_prev_error,
        )

        def value_batch(zz):
            sp = zz.reshape(zz.shape[0], h, d)
            return m.rollout(
                obs.t, *state, counts, sp, rho=None, hard_weight=HARD_LIMIT_WEIGHT
            )["objective"]

        def project(z):
            return np.clip(z, m.sp_min, m.sp_max)

        starts, iterations = self._starts(h, d)
        z, f = self._solve(value_batch, h * d, starts, iterations, project)

        fallback = z is None
        violation = False
        if fallback:
            self.fallback_count += 1
            log.warning("%s: setpoint solve failed at t=%d, holding plan", self.name, obs.t)
            if self._plan is not None:
                sp_plan = self._shift_plan(self._plan.reshape(h, d))
            else:
                sp_plan = np.tile(m.fixed_setpoints, (h, 1))
            f = float("inf")
        else:
            sp_plan = np.clip(z.reshape(h, d), m.sp_min, m.sp_max)
            traj = m.rollout(obs.t, *state, counts, sp_plan[None], rho=None)["temp"][0]
            if np.any(traj > m.limit + 1e-9):
                violation = True
                self.violation_count += 1
                log.warning(
                    "%s: plan still predicts a throttle-limit breach at t=%d, "
                    "commanding maximum cooling",
                    self.name,
                    obs.t,
                )
                sp_plan = np.full((h, d), m.sp_min)
        self._plan = sp_plan.ravel().copy()

        self.diagnostics = {
            "t": obs.t,
            "fallback": fallback,
            "violation": violation,
            "setpoints": sp_plan.copy(),
            "objective": float(f),
        }
        assignments = self.greedy._assign_batch(obs)
        return Action(
            assignments=assignments,
            cooling_setpoints=self._commit_setpoints(temps, sp_plan[0]),
        )

    def _starts(self, h: int, d: int) -> Tuple[List[np.ndarray], int]:
        m = self.model
        cfg = self.config.mpc
        if self._plan is not None:
            warm = self._shift_plan(self._plan.reshape(h, d)).ravel()
            return [warm], max(6, cfg.grad_iterations // 2)
        mid = 0.5 * (m.sp_min + m.sp_max)
        patterns = [
            np.tile(m.fixed_setpoints, (h, 1)).ravel(),
            np.full(h * d, m.sp_min),
            np.full(h * d, mid),
            np.full(h * d, m.sp_max),
        ]
        starts = []
        for i in range(cfg.multi_starts):
            if i < len(patterns):
                starts.append(patterns[i])
            else:
                starts.append(self._start_rng.uniform(m.sp_min, m.sp_max, h * d))
        return starts, cfg.grad_iterations


class HierarchicalMpcPolicy(_RecedingHorizonPolicy):
    """Two-stage receding-horizon controller.

    Stage 1 plans per-class admission fractions and cooling setpoints over
    the supervisory horizon, filling toward util_target * capacity rather
    than nameplate: when offered load outruns the fleet, utilization
    settles at the target and the slack above it stays as thermal headroom
    instead of being burned in the throttle band.  Stage 2 expands the
    first-step quota into per-cluster placement counts with one LP per
    site over the scheduling horizon, rounds them, and matches concrete
    jobs largest-first.
    """

    name = "hmpc"

    def act(self, obs: Observation) -> Action:
        m = self.model
        cfg = self.config.mpc
        h, d = cfg.horizon_supervisory, m.n_sites
        temps = self._site_temps(obs)
        counts = self._batch_counts(obs)
        state = (
            obs.utilization.astype(float),
            temps,
            self.pid_integral,
            self.pid_prev_error,
        )
        nrho = h * N_TYPES

        def value_batch(zz):
            s = zz.shape[0]
            rho = zz[:, :nrho].reshape(s, h, N_TYPES)
            sp = zz[:, nrho:].reshape(s, h, d)
            return m.rollout(
                obs.t, *state, counts, sp, rho=rho, targeted=True
            )["objective"]

        def project(z):
            out = z.copy()
            out[:nrho] = np.clip(out[:nrho], 0.0, 1.0)
            out[nrho:] = np.clip(out[nrho:], m.sp_min, m.sp_max)
            return out

        starts, iterations = self._starts(h, d)
        z, f = self._solve(value_batch, nrho + h * d, starts, iterations, project)
        if z is None:
            return self._fallback(obs, temps, "stage-1 solve failed")

        rho_plan = np.clip(z[:nrho].reshape(h, N_TYPES), 0.0, 1.0)
        sp_plan = np.clip(z[nrho:].reshape(h, d), m.sp_min, m.sp_max)
        self._plan = np.concatenate([rho_plan.ravel(), sp_plan.ravel()])

        final = m.rollout(
            obs.t,
            *state,
            counts,
            sp_plan[None],
            rho=rho_plan[None],
            floored=True,
            targeted=True,
        )
        admitted = final["admitted"][0]
        h2 = cfg.horizon_scheduling
        quotas = self._split_quotas(
            admitted, final["u_pre"][0], final["c_eff"][0], h2
        )

        u_now = obs.utilization.astype(float)
        c_eff_now = self._cluster_c_eff(obs)
        counts_per_cluster, stage2_diag, ok = self._stage2(
            obs.t, quotas, u_now, c_eff_now, h2
        )
        self.diagnostics = {
            "t": obs.t,
            "fallback": False,
            "stage1": {
                "rho": rho_plan.copy(),
                "setpoints": sp_plan.copy(),
                "objective": float(f),
                "admitted": admitted.copy(),
                "caps": final["caps"][0].copy(),
            },
            "quotas": quotas.copy(),
            "stage2": stage2_diag,
        }
        if not ok:
            return self._fallback(
                obs, temps, "dispatch LP failed", sp_plan[0], base=self.diagnostics
            )
        assignments = self._match_jobs(obs, counts_per_cluster)
        return Action(
            assignments=assignments,
            cooling_setpoints=self._commit_setpoints(temps, sp_plan[0]),
        )

    # -- fallbacks ---------------------------------------------------------
    def _fallback(self, obs, temps, why, sp0=None, base=None):
        self.fallback_count += 1
        log.warning("%s: %s at t=%d, falling back to greedy placement", self.name, why, obs.t)
        if sp0 is None:
            if self._plan is not None:
                nrho = self.config.mpc.horizon_supervisory * N_TYPES
                sp0 = self._plan[nrho:].reshape(-1, self.model.n_sites)[0]
            else:
                sp0 = self.model.fixed_setpoints
        self.diagnostics = dict(base or {}, t=obs.t, fallback=True, why=why)
        assignments = self.greedy._assign_batch(obs)
        return Action(
            assignments=assignments,
            cooling_setpoints=self._commit_setpoints(temps, np.asarray(sp0, float)),
        )

    # -- stage-1 helpers ---------------------------------------------------
    def _starts(self, h: int, d: int) -> Tuple[List[np.ndarray], int]:
        m = self.model
        cfg = self.config.mpc
        nrho = h * N_TYPES
        if self._plan is not None:
            rho = self._plan[:nrho].reshape(h, N_TYPES)
            sp = self._plan[nrho:].reshape(h, d)
            warm = np.concatenate(
                [self._shift_plan(rho).ravel(), self._shift_plan(sp).ravel()]
            )
            return [warm], max(6, cfg.grad_iterations // 2)
        fixed = np.tile(m.fixed_setpoints, (h, 1)).ravel()
        mid = 0.5 * (m.sp_min + m.sp_max)
        patterns = [
            (1.0, fixed),
            (1.0, np.full(h * d, m.sp_min)),
            (0.6, np.full(h * d, mid)),
            (0.3, fixed),
            (1.0, np.full(h * d, m.sp_max)),
        ]
        starts = []
        for i in range(cfg.multi_starts):
            if i < len(patterns):
                rho_val, sp = patterns[i]
                starts.append(np.concatenate([np.full(nrho, rho_val), sp]))
            else:
                starts.append(
                    np.concatenate(
                        [
                            self._start_rng.uniform(0.0, 1.0, nrho),
                            self._start_rng.uniform(m.sp_min, m.sp_max, h * d),
                        ]
                    )
                )
        return starts, cfg.grad_iterations

    def _split_quotas(
        self, admitted: np.ndarray, u_pre: np.ndarray, c_eff: np.ndarray, h2: int
    ) -> np.ndarray:
        """Apportion planned admissions to sites by class-specific headroom.

        Step 0 is integral (those jobs are placed now) via largest-remainder;
        later steps stay proportional, they only shape the LP's lookahead.
        Returns (n_sites, N_TYPES, h2).
        """
        m = self.model
        quotas = np.zeros((m.n_sites, N_TYPES, h2))
        for k in range(h2):
            # same fill line as the admission plan, so the split's capacity
            # never hands a site more than stage 1 would let it take
            head = np.maximum(
                0.0, np.minimum(c_eff[k], m.admit_capacity) - u_pre[k]
            )
            for tcode in range(N_TYPES):
                per_cluster = np.floor(head / m.r_bar[tcode]) * m.type_mask[tcode]
                per_site = per_cluster @ m.site_matrix.T
                total = admitted[k, tcode]
                if k == 0:
                    quotas[:, tcode, k] = largest_remainder_split(
                        int(round(total)), per_site, per_site.astype(np.int64)
                    )
                elif per_site.sum() > 0:
                    quotas[:, tcode, k] = np.minimum(
                        total * per_site / per_site.sum(), per_site
                    )
        return quotas

    # -- stage 2 -----------------------------------------------------------
    def _stage2(
        self,
        t0: int,
        quotas: np.ndarray,
        u0: np.ndarray,
        c_eff0: np.ndarray,
        h2: int,
    ) -> Tuple[np.ndarray, dict, bool]:
        m = self.model
        cfg = self.config.mpc
        counts = np.zeros(m.n_clusters, dtype=np.int64)
        diag: dict = {}
        for site_pos in range(m.n_sites):
            site_id = m.site_ids[site_pos]
            if quotas[site_pos, :, 0].sum() <= 0:
                # nothing to place here this step; lookahead-only quotas
                # cannot change the current action
                diag[site_id] = {"skipped": True, "iterations": 0}
                continue
            c, a_eq, b_eq, a_ub, b_ub, meta = build_dispatch_lp(
                m,
                site_pos,
                quotas[site_pos],
                u0,
                c_eff0,
                t0,
                cfg.energy_weight,
                cfg.rejection_weight,
                h2,
            )
            # rejection slacks cover the quota rows and the appended slacks
            # cover the headroom rows, so phase 1 is unnecessary
            basis0 = np.concatenate(
                [
                    meta["nx"] + np.arange(len(b_eq)),
                    len(c) + np.arange(len(b_ub)),
                ]
            )
            res = solve_lp(
                c, a_eq, b_eq, a_ub, b_ub, max_iter=cfg.lp_max_iter, basis0=basis0
            )
            diag[site_id] = {
                "skipped": False,
                "status": res.status,
                "iterations": res.iterations,
                "x": res.x.copy(),
                "objective": res.objective,
                "c": c,
                "a_eq": a_eq,
                "b_eq": b_eq,
                "a_ub": a_ub,
                "b_ub": b_ub,
                "meta": meta,
            }
            if not res.ok:
                return counts, diag, False

            local = meta["local"]
            x0 = res.x[np.arange(len(local)) * h2]  # period-0 counts
            for tcode in meta["types"]:
                sel = np.flatnonzero(m.hw[local] == tcode)
                if sel.size == 0:
                    continue
                head_jobs = np.floor(
                    np.maximum(
                        0.0,
                        np.minimum(
                            c_eff0[local[sel]], m.admit_capacity[local[sel]]
                        )
                        - u0[local[sel]],
                    )
                    / m.r_bar[tcode]
                ).astype(np.int64)
                target = min(
                    int(np.floor(x0[sel].sum() + 0.5)),
                    int(round(quotas[site_pos, tcode, 0])),
                    int(head_jobs.sum()),
                )
                rounded = balanced_round(x0[sel], head_jobs, target)
                counts[local[sel]] += rounded
            diag[site_id]["counts"] = counts[local].copy()
        return counts, diag, True

    def _match_jobs(self, obs: Observation, counts: np.ndarray) -> Dict[int, int]:
        """Turn per-cluster counts into concrete assignments.

        Within each class, larger jobs choose first (ties to the lower id)
        and each picks the count-holding feasible cluster with the most free
        capacity.  Placement stops at the admission fill line too: the count
        quota is denominated in mean-sized jobs, so without the line a deep
        pool of larger-than-mean jobs would overfill straight past the load
        the plan admitted.  Jobs beyond the counts, or that fit nowhere,
        defer.
        """
        view = self.fleet.view(obs)
        remaining = counts.copy()
        fill = self.model.admit_capacity
        assignments: Dict[int, int] = {}
        for kind in (CPU, GPU):
            jobs = sorted(
                (j for j in obs.arrivals if j.hardware == kind),
                key=lambda j: (-j.cu, j.id),
            )
            for job in jobs:
                mask = (
                    view.feasible_mask(job)
                    & (remaining > 0)
                    & (view.util + job.cu <= fill + 1e-9)
                )
                cand = np.flatnonzero(mask)
                if cand.size == 0:
                    assignments[job.id] = 0
                    continue
                free = view.c_eff[cand] - view.util[cand]
                pick = int(cand[int(np.argmax(free))])
                view.commit(job, pick)
                remaining[pick] -= 1
                assignments[job.id] = self.fleet.cluster_ids[pick]
        return assignments


MPC_POLICIES = {
    "scmpc": SetpointMpcPolicy,
    "hmpc": HierarchicalMpcPolicy,
}


def make_mpc_policy(name: str, config: SimulationConfig, seed: int = 0) -> Policy:
    return MPC_POLICIES[name](config, seed)
