"""Unit and property tests for the site physics models.

Expected values are frozen from independent closed-form evaluation of the
update laws, not from running the module under test.
"""

import math

import numpy as np
import pytest

from thermsched.physics import (
    ClusterPhysicsParams,
    DatacenterPhysicsParams,
    PidState,
    ambient_series,
    ambient_temperature,
    electricity_price,
    load_ambient_trace,
    pid_cooling,
    power_step,
    step_cost,
    step_energy_kwh,
    thermal_equilibrium,
    thermal_step,
    throttle_factor,
)

DT = 300.0

# Three real site parameterizations used across the thermal tests.
SITE_A = DatacenterPhysicsParams(  # cool coastal site
    thermal_resistance=0.003,
    thermal_capacitance=7.0e8,
    cooling_max_w=0.68e6,
    throttle_floor=0.2,
    kp=5000.0,
    ki=100.0,
    kd=1000.0,
    ambient_base_c=10.0,
    ambient_amplitude_c=5.0,
)
SITE_B = DatacenterPhysicsParams(  # hot desert site
    thermal_resistance=0.004,
    thermal_capacitance=6.0e8,
    cooling_max_w=1.22e6,
    throttle_floor=0.7,
    kp=7000.0,
    ki=150.0,
    kd=1500.0,
    ambient_base_c=38.0,
    ambient_amplitude_c=12.0,
)
SITE_C = DatacenterPhysicsParams(  # continental site
    thermal_resistance=0.002,
    thermal_capacitance=5.2e8,
    cooling_max_w=1.97e6,
    throttle_floor=0.3,
    kp=6000.0,
    ki=120.0,
    kd=1200.0,
    ambient_base_c=30.0,
    ambient_amplitude_c=11.0,
)


class TestThermalStep:
    def test_equilibrium_is_fixed_point(self):
        # heat exactly matched by cooling at ambient temperature: no change
        theta = thermal_step(25.0, 5.0e5, 25.0, 5.0e5, SITE_A, DT)
        assert theta == 25.0

    def test_passive_cooling_drop(self):
        # 15 K above ambient, no heat, no chiller: drop = dt/(C*R) * 15
        theta = thermal_step(25.0, 0.0, 10.0, 0.0, SITE_A, DT)
        assert theta == pytest.approx(24.997857142857143, abs=1e-12)

    @pytest.mark.parametrize("params", [SITE_A, SITE_B, SITE_C])
    def test_converges_to_closed_form_fixed_point(self, params):
        heat = 2.0 / params.thermal_resistance  # puts the fixed point 2 K up
        ambient = params.ambient_base_c
        target = thermal_equilibrium(heat, ambient, 0.0, params)
        theta = ambient - 3.0
        gap0 = abs(theta - target)
        for _ in range(2000):
            theta = thermal_step(theta, heat, ambient, 0.0, params, DT)
        decay = (
            1.0 - DT / (params.thermal_capacitance * params.thermal_resistance)
        ) ** 2000
        assert abs(theta - target) == pytest.approx(gap0 * decay, rel=1e-6)

    def test_linearity_in_heat_and_cooling(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            theta = rng.uniform(10, 40)
            amb = rng.uniform(-5, 45)
            q1, q2 = rng.uniform(0, 1e6, size=2)
            base = thermal_step(theta, 0.0, amb, 0.0, SITE_B, DT)
            with_q1 = thermal_step(theta, q1, amb, 0.0, SITE_B, DT)
            with_both = thermal_step(theta, q1 + q2, amb, 0.0, SITE_B, DT)
            assert with_both - with_q1 == pytest.approx(
                (q2 / q1) * (with_q1 - base), rel=1e-9
            )
            # cooling enters with the opposite sign of heat
            cooled = thermal_step(theta, 0.0, amb, q1, SITE_B, DT)
            assert cooled - base == pytest.approx(-(with_q1 - base), rel=1e-9)

    @pytest.mark.parametrize("params", [SITE_A, SITE_B, SITE_C])
    def test_contraction_toward_fixed_point(self, params):
        rng = np.random.default_rng(11)
        rate = DT / (params.thermal_capacitance * params.thermal_resistance)
        assert 0.0 < rate < 2.0
        for _ in range(30):
            t1, t2 = rng.uniform(0, 60, size=2)
            n1 = thermal_step(t1, 3e5, 20.0, 1e5, params, DT)
            n2 = thermal_step(t2, 3e5, 20.0, 1e5, params, DT)
            assert abs(n1 - n2) == pytest.approx(abs(1 - rate) * abs(t1 - t2), rel=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            thermal_step(float("nan"), 0.0, 10.0, 0.0, SITE_A, DT)
        with pytest.raises(ValueError):
            thermal_step(25.0, float("inf"), 10.0, 0.0, SITE_A, DT)

    def test_validate_flags_unstable_discretization(self):
        bad = DatacenterPhysicsParams(
            thermal_resistance=1e-9, thermal_capacitance=1.0, cooling_max_w=1e6
        )
        assert any("unstable" in msg for msg in bad.validate(DT))
        assert SITE_A.validate(DT) == []


class TestPidCooling:
    def test_zero_error_zero_output(self):
        out, state = pid_cooling(22.0, 23.0, PidState(), SITE_A, DT)
        assert out == 0.0
        assert state.integral == 0.0

    def test_proportional_only_hand_value(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=0.68e6,
            kp=4000.0,
            ki=0.0,
            kd=0.0,
        )
        out, _ = pid_cooling(25.0, 23.0, PidState(), params, DT)
        assert out == pytest.approx(8000.0, abs=1e-12)

    def test_saturates_at_plant_limit(self):
        state = PidState()
        outs = []
        for _ in range(100):
            out, state = pid_cooling(33.0, 23.0, state, SITE_A, DT)
            outs.append(out)
        assert outs[-1] == SITE_A.cooling_max_w
        assert max(outs) == SITE_A.cooling_max_w

    def test_integral_antiwindup_bound(self):
        state = PidState()
        for _ in range(500):
            _, state = pid_cooling(40.0, 23.0, state, SITE_A, DT)
        assert SITE_A.ki * state.integral <= SITE_A.cooling_max_w + 1e-9

    def test_integral_unwinds_below_target(self):
        # after a long hot spell, time below target bleeds the integral off
        # instead of latching the chiller at its running peak
        state = PidState()
        for _ in range(50):
            _, state = pid_cooling(30.0, 23.0, state, SITE_A, DT)
        wound = state.integral
        assert wound > 0
        for _ in range(200):
            _, state = pid_cooling(20.0, 23.0, state, SITE_A, DT)
        assert state.integral < wound
        for _ in range(2000):
            _, state = pid_cooling(20.0, 23.0, state, SITE_A, DT)
        assert state.integral == 0.0
        out, _ = pid_cooling(20.0, 23.0, state, SITE_A, DT)
        assert out == 0.0

    def test_closed_loop_settles_near_setpoint(self):
        # constant heat, constant ambient below setpoint: the loop must
        # neither throttle-range overshoot nor drift far below target
        params = SITE_A
        heat = 0.6 * params.cooling_max_w
        theta, state = 23.0, PidState()
        temps = []
        for _ in range(288):
            cool, state = pid_cooling(theta, 23.0, state, params, DT)
            theta = thermal_step(theta, heat, 10.0, cool, params, DT)
            temps.append(theta)
        assert max(temps) < 32.0
        assert min(temps) > 10.0
        assert abs(temps[-1] - 23.0) < 6.0

    def test_output_always_in_actuator_range(self):
        rng = np.random.default_rng(3)
        for params in (SITE_A, SITE_B, SITE_C):
            state = PidState()
            for _ in range(200):
                temp = rng.uniform(0, 60)
                out, state = pid_cooling(temp, 24.0, state, params, DT)
                assert 0.0 <= out <= params.cooling_max_w

    def test_derivative_term_reacts_to_error_change(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=1e9,
            kp=0.0,
            ki=0.0,
            kd=1200.0,
        )
        out1, state = pid_cooling(26.0, 23.0, PidState(), params, DT)
        assert out1 == pytest.approx(1200.0 * 3.0 / DT, rel=1e-12)
        out2, _ = pid_cooling(26.0, 23.0, state, params, DT)
        assert out2 == 0.0  # unchanged error: derivative vanishes


class TestThrottle:
    def test_unity_at_or_below_onset(self):
        assert throttle_factor(32.0, SITE_A) == 1.0
        assert throttle_factor(20.0, SITE_A) == 1.0

    def test_floor_at_or_above_limit(self):
        assert throttle_factor(35.0, SITE_A) == pytest.approx(0.2, abs=1e-12)
        assert throttle_factor(50.0, SITE_A) == pytest.approx(0.2, abs=1e-12)

    def test_midpoint_hand_value(self):
        assert throttle_factor(33.5, SITE_A) == pytest.approx(0.6, abs=1e-12)

    def test_monotone_non_increasing_and_bounded(self):
        for params in (SITE_A, SITE_B, SITE_C):
            temps = np.linspace(0.0, 60.0, 601)
            vals = [throttle_factor(t, params) for t in temps]
            assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
            assert all(params.throttle_floor <= v <= 1.0 for v in vals)


class TestAmbient:
    def test_constant_when_flat_and_noiseless(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=1e6,
            ambient_base_c=16.0,
            ambient_amplitude_c=0.0,
        )
        assert all(ambient_temperature(t, params) == 16.0 for t in range(300))

    def test_desert_site_peak_value(self):
        # quarter period: sin = 1, so base + amplitude
        t_peak = SITE_B.diurnal_period_steps // 4
        assert ambient_temperature(t_peak, SITE_B) == pytest.approx(50.0, abs=1e-9)

    def test_noise_is_seed_deterministic(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=1e6,
            ambient_base_c=10.0,
            ambient_amplitude_c=5.0,
            ambient_noise_std_c=0.7,
        )
        a = ambient_series(288, params, np.random.default_rng(42))
        b = ambient_series(288, params, np.random.default_rng(42))
        c = ambient_series(288, params, np.random.default_rng(43))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_trace_roundtrip(self, tmp_path):
        path = tmp_path / "amb.csv"
        path.write_text("timestep,temperature_c\n0,12.5\n1,13.0\n2,12.0\n")
        trace = load_ambient_trace(path)
        assert trace.tolist() == [12.5, 13.0, 12.0]

    def test_trace_rejects_gaps(self, tmp_path):
        path = tmp_path / "amb.csv"
        path.write_text("0,12.5\n2,13.0\n")
        with pytest.raises(ValueError, match="contiguous"):
            load_ambient_trace(path)


CLUSTER = ClusterPhysicsParams(
    datacenter_id=1,
    capacity_cu=1000.0,
    heat_per_cu=0.5,
    power_per_cu=50.0,
    cooling_share=0.5,
    grid_inflow_w=1.6e5,
)


class TestPowerStep:
    def test_hand_balance(self):
        # 1e6 - 50*1000 - 0.5*2e5 + 1.6e5 = 1.01e6
        out = power_step(1.0e6, 1000.0, 2.0e5, CLUSTER, DT)
        assert out == pytest.approx(1.01e6, abs=1e-9)

    def test_balanced_inflow_holds_budget_constant(self):
        params = ClusterPhysicsParams(
            datacenter_id=1,
            capacity_cu=1000.0,
            heat_per_cu=0.5,
            power_per_cu=50.0,
            cooling_share=0.5,
            grid_inflow_w=50.0 * 400.0 + 0.5 * 1.0e5,
        )
        p = 5.0e5
        for _ in range(20):
            p = power_step(p, 400.0, 1.0e5, params, DT)
        assert p == pytest.approx(5.0e5, rel=1e-12)


class TestPricingAndCost:
    def test_peak_and_offpeak_rates(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=1e6,
            price_peak=0.08,
            price_offpeak=0.06,
            peak_hours=tuple(range(8, 20)),
        )
        # t=0 -> hour 0 (off-peak); t=96 -> hour 8 (peak) at dt=300
        assert electricity_price(0, params, DT) == 0.06
        assert electricity_price(96, params, DT) == 0.08
        assert electricity_price(96 + 288, params, DT) == 0.08  # wraps by day

    def test_empty_peak_set_always_offpeak(self):
        params = DatacenterPhysicsParams(
            thermal_resistance=0.003,
            thermal_capacitance=7.0e8,
            cooling_max_w=1e6,
            price_peak=0.30,
            price_offpeak=0.07,
            peak_hours=(),
        )
        assert all(electricity_price(t, params, DT) == 0.07 for t in range(0, 288, 7))

    def test_zero_activity_zero_cost(self):
        cost = step_cost({1: 0.0}, {1: CLUSTER}, {1: 0.0}, {1: 0.10}, DT)
        assert cost == 0.0

    def test_megawatt_step_hand_value(self):
        # 1 MW for 300 s at $0.10/kWh: 83.33 kWh -> $8.33
        params = ClusterPhysicsParams(
            datacenter_id=1,
            capacity_cu=1e5,
            heat_per_cu=0.5,
            power_per_cu=10.0,
            cooling_share=1.0,
            grid_inflow_w=0.0,
        )
        cost = step_cost({1: 1.0e5}, {1: params}, {1: 0.0}, {1: 0.10}, DT)
        assert cost == pytest.approx(25.0 / 3.0, rel=1e-9)

    def test_cost_matches_energy_times_price(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            utils = {1: rng.uniform(0, 1e5), 2: rng.uniform(0, 1e5)}
            cps = {
                1: ClusterPhysicsParams(1, 1e5, 0.5, rng.uniform(1, 10), 0.5, 0.0),
                2: ClusterPhysicsParams(2, 1e5, 0.5, rng.uniform(1, 10), 0.5, 0.0),
            }
            cools = {1: rng.uniform(0, 1e6), 2: rng.uniform(0, 1e6)}
            prices = {1: rng.uniform(0.02, 0.3), 2: rng.uniform(0.02, 0.3)}
            compute, cooling = step_energy_kwh(utils, cps, cools, DT)
            expect = sum(prices[d] * (compute[d] + cooling[d]) for d in (1, 2))
            assert step_cost(utils, cps, cools, prices, DT) == pytest.approx(
                expect, rel=1e-12
            )

    def test_cost_linear_in_price(self):
        utils = {1: 5e4}
        cps = {1: CLUSTER}
        cools = {1: 3e5}
        c1 = step_cost(utils, cps, cools, {1: 0.10}, DT)
        c2 = step_cost(utils, cps, cools, {1: 0.20}, DT)
        assert c2 == pytest.approx(2.0 * c1, rel=1e-12)
