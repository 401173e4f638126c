"""Configuration validation, serialization, and preset integrity."""

import dataclasses
import json

import pytest

from thermsched.config import (
    ClusterConfig,
    DatacenterConfig,
    MpcConfig,
    PolicyConfig,
    SimulationConfig,
)
from thermsched.physics import ClusterPhysicsParams, DatacenterPhysicsParams
from thermsched.presets import PRESETS, load_preset, nominal_fleet, tiny_desk
from thermsched.workload import WorkloadConfig


def _site_physics(**over):
    base = dict(
        thermal_resistance=0.003,
        thermal_capacitance=7.0e8,
        cooling_max_w=0.68e6,
    )
    base.update(over)
    return DatacenterPhysicsParams(**base)


def _cluster(cid, dc_id, hw="cpu", cap=1000.0):
    return ClusterConfig(
        id=cid,
        hardware=hw,
        physics=ClusterPhysicsParams(
            datacenter_id=dc_id,
            capacity_cu=cap,
            heat_per_cu=0.5,
            power_per_cu=1.0,
            cooling_share=1.0,
            grid_inflow_w=5000.0,
        ),
    )


def _one_site_config(**dc_over):
    dc_kwargs = dict(
        id=1,
        name="solo",
        physics=_site_physics(),
        setpoint_c=23.0,
        clusters=(_cluster(1, 1),),
    )
    dc_kwargs.update(dc_over)
    return SimulationConfig(datacenters=(DatacenterConfig(**dc_kwargs),))


class TestValidationDiagnostics:
    def test_clean_config_has_no_issues(self):
        assert _one_site_config().validate() == []

    def test_throttle_floor_above_one_rejected(self):
        cfg = _one_site_config(physics=_site_physics(throttle_floor=1.5))
        assert any("throttle_floor" in msg for msg in cfg.validate())

    def test_onset_at_or_above_limit_rejected(self):
        cfg = _one_site_config(
            physics=_site_physics(throttle_onset_c=35.0, throttle_limit_c=35.0)
        )
        assert any("onset" in msg for msg in cfg.validate())

    def test_unstable_timestep_rejected(self):
        # dt/(R*C) >= 2 makes the explicit update oscillate unboundedly
        cfg = _one_site_config(
            physics=_site_physics(thermal_resistance=1e-7, thermal_capacitance=1e6)
        )
        assert any("unstable" in msg or "timestep" in msg for msg in cfg.validate())

    def test_duplicate_cluster_ids_rejected(self):
        cfg = _one_site_config(clusters=(_cluster(1, 1), _cluster(1, 1)))
        assert any("duplicate" in msg.lower() for msg in cfg.validate())

    def test_cluster_site_mismatch_rejected(self):
        cfg = _one_site_config(clusters=(_cluster(1, 99),))
        assert any("site" in msg.lower() or "datacenter" in msg.lower() for msg in cfg.validate())

    def test_setpoint_outside_box_rejected(self):
        cfg = _one_site_config(setpoint_c=50.0)
        assert any("setpoint" in msg for msg in cfg.validate())

    def test_cooling_shares_must_sum_to_one(self):
        bad = dataclasses.replace(
            _cluster(1, 1),
            physics=dataclasses.replace(_cluster(1, 1).physics, cooling_share=0.25),
        )
        cfg = _one_site_config(clusters=(bad,))
        assert any("cooling_share" in msg or "share" in msg for msg in cfg.validate())

    def test_unknown_policy_name_rejected(self):
        cfg = dataclasses.replace(_one_site_config(), policy=PolicyConfig(name="psychic"))
        assert any("policy" in msg.lower() for msg in cfg.validate())


class TestSerialization:
    def test_dict_roundtrip_is_equal(self):
        cfg = nominal_fleet()
        again = SimulationConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_file_roundtrip_is_equal(self, tmp_path):
        cfg = tiny_desk()
        path = tmp_path / "cfg.json"
        cfg.save(path)
        assert SimulationConfig.load(path) == cfg

    def test_roundtrip_preserves_tuple_fields(self, tmp_path):
        cfg = nominal_fleet()
        path = tmp_path / "cfg.json"
        cfg.save(path)
        again = SimulationConfig.load(path)
        assert again.workload.cu_range == cfg.workload.cu_range
        assert again.sites()[0].physics.peak_hours == cfg.sites()[0].physics.peak_hours
        assert isinstance(again.workload.cu_range, tuple)

    def test_mutation_helpers_return_validated_variants(self):
        cfg = tiny_desk()
        scaled = cfg.with_arrival_scale(2.0)
        assert scaled.workload.arrival_scale == 2.0
        assert scaled.validate() == []
        assert cfg.workload.arrival_scale == 1.0
        swapped = cfg.with_policy("thermal")
        assert swapped.policy.name == "thermal"


class TestPresets:
    def test_registry_and_lookup(self):
        assert set(PRESETS) >= {"nominal", "tiny"}
        assert load_preset("nominal") == nominal_fleet()
        with pytest.raises(KeyError):
            load_preset("nope")

    def test_nominal_preset_shape(self):
        cfg = nominal_fleet()
        assert len(cfg.sites()) == 4
        assert len(cfg.clusters()) == 20
        assert cfg.validate() == []
        per_site = {d.id: len(d.clusters) for d in cfg.sites()}
        assert per_site == {1: 5, 2: 5, 3: 5, 4: 5}
        hw = [c.hardware for c in cfg.clusters()]
        assert hw.count("cpu") == 10 and hw.count("gpu") == 10

    def test_nominal_workload_defaults(self):
        wl = nominal_fleet().workload
        assert wl.arrival_cap == 200
        assert wl.gpu_fraction == 0.6
        assert wl.episode_length == 288
        assert wl.timestep_s == 300.0

    def test_nominal_heat_margins(self):
        # at nominal (~67%) utilization every site must stay inside its
        # chiller envelope with margin; at full utilization the GPU-heavy
        # sites must be able to exceed it, which is what makes saturation
        # experiments produce throttling
        cfg = nominal_fleet()
        full_ratios = []
        for dc in cfg.sites():
            full = sum(c.physics.capacity_cu * c.physics.heat_per_cu for c in dc.clusters)
            ratio = full / dc.physics.cooling_max_w
            full_ratios.append(ratio)
            assert 0.67 * ratio < 0.85
        assert max(full_ratios) > 1.02
        assert sum(r > 1.0 for r in full_ratios) >= 2

    def test_cooling_shares_partition_each_site(self):
        for dc in nominal_fleet().sites():
            assert sum(c.physics.cooling_share for c in dc.clusters) == pytest.approx(1.0)

    def test_grid_inflow_covers_worst_step(self):
        # inflow is sized so a cluster at full load under max chiller draw
        # never drains its budget
        for dc in nominal_fleet().sites():
            for c in dc.clusters:
                p = c.physics
                worst = p.power_per_cu * p.capacity_cu + p.cooling_share * dc.physics.cooling_max_w
                assert p.grid_inflow_w >= worst - 1e-6

    def test_tiny_preset_is_fast_shape(self):
        cfg = tiny_desk()
        assert cfg.validate() == []
        assert len(cfg.clusters()) == 4
        assert cfg.workload.episode_length == 96

    def test_presets_are_deterministic(self):
        assert nominal_fleet() == nominal_fleet()
        assert tiny_desk() == tiny_desk()
