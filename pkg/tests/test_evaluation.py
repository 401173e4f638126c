"""Episode reduction, experiment grids, and the saturation frontier."""

from dataclasses import replace
import json
from pathlib import Path

import numpy as np
import pytest

from thermsched import evaluation as ev
from thermsched.policies import Policy
from thermsched.presets import load_preset
from thermsched.workload import CPU, GPU, Job


def small_config(episode_length=24, **workload_overrides):
    cfg = load_preset("tiny")
    wl = replace(cfg.workload, episode_length=episode_length, **workload_overrides)
    return replace(cfg, workload=wl)


def job(jid, cu, duration=20, hardware=CPU, arrival=0):
    return Job(id=jid, cu=cu, duration=duration, priority=0,
               hardware=hardware, arrival=arrival)


class FaultyPolicy(Policy):
    """Raises on every act call; exercises the harness fallback path."""

    name = "faulty"

    def act(self, obs):
        raise RuntimeError("deliberate test failure")


class TestEpisodeMetrics:
    def test_pinned_utilization_from_injected_schedule(self):
        # one everlasting 600 CU cpu job against 2x1200 CU of cpu capacity
        cfg = small_config()
        sched = {0: [job(1, 600.0, duration=10**9)]}
        m = ev.run_episode(cfg, "greedy", 0, schedule=sched)
        assert m.util_mean_cpu_pct == pytest.approx(100.0 * 600.0 / 2400.0, abs=1e-12)
        assert m.util_mean_gpu_pct == 0.0
        assert m.util_mean_fleet_pct == pytest.approx(100.0 * 600.0 / 6400.0, abs=1e-12)
        assert m.queue_mean_cpu == 0.0
        assert m.completed_jobs == 0

    def test_zero_workload_runs_on_cooling_alone(self):
        cfg = small_config()
        m = ev.run_episode(cfg, "greedy", 3, schedule={})
        assert m.util_mean_cpu_pct == 0.0
        assert m.util_mean_gpu_pct == 0.0
        assert m.queue_mean_cpu == 0.0
        assert m.queue_mean_gpu == 0.0
        assert m.backlog_mean == 0.0
        assert m.completed_jobs == 0
        assert m.energy_per_job_kwh is None
        assert "energy_per_job_kwh" not in m.summary_dict()["metrics"]
        assert np.all(m.series["compute_kwh"] == 0.0)
        assert m.energy_total_kwh == pytest.approx(
            float(m.series["cooling_kwh"].sum()), rel=1e-12
        )
        assert m.energy_total_kwh > 0.0

    def test_energy_and_cost_close_over_the_log(self):
        cfg = small_config()
        m = ev.run_episode(cfg, "greedy", 7)
        site_kwh = m.series["compute_kwh"] + m.series["cooling_kwh"]
        assert m.energy_total_kwh == pytest.approx(float(site_kwh.sum()), rel=1e-9)
        recost = float((m.series["price"] * site_kwh).sum())
        assert m.cost_usd == pytest.approx(recost, rel=1e-9)

    def test_temp_ordering_and_throttle_flag(self):
        cfg = small_config()
        onsets = np.array([d.physics.throttle_onset_c for d in cfg.sites()])
        for seed in (0, 1, 2):
            m = ev.run_episode(cfg, "random", seed)
            assert m.temp_max_c >= m.temp_mean_c
            breached = bool(np.any(m.series["temp_c"] > onsets))
            assert (m.throttle_pct > 0.0) == breached

    def test_heat_wave_with_weak_chiller_counts_as_throttled(self):
        # 40 C ambient against a 100 W chiller pins the hall above onset
        cfg = small_config()
        hot = tuple(
            replace(
                d,
                physics=replace(
                    d.physics,
                    cooling_max_w=100.0,
                    ambient_base_c=40.0,
                    ambient_amplitude_c=0.0,
                    ambient_noise_std_c=0.0,
                ),
            )
            for d in cfg.sites()
        )
        cfg = replace(cfg, datacenters=hot)
        m = ev.run_episode(cfg, "greedy", 0, schedule={})
        assert m.throttle_pct > 0.0
        assert m.temp_max_c > 32.0

    def test_completed_jobs_counts_finished_work_only(self):
        # three 4-step jobs land at t=0; horizon 24 finishes them all
        cfg = small_config()
        sched = {0: [job(i, 100.0, duration=4) for i in (1, 2, 3)]}
        m = ev.run_episode(cfg, "greedy", 0, schedule=sched)
        assert m.completed_jobs == 3
        assert m.energy_per_job_kwh == pytest.approx(m.energy_total_kwh / 3.0)

    def test_faulty_policy_surfaces_but_episode_completes(self):
        cfg = small_config(episode_length=12)
        m = ev.run_episode(cfg, FaultyPolicy(cfg, 0), 0)
        assert m.faults == 12
        assert len(m.fault_log) == 12
        assert "deliberate test failure" in m.fault_log[0]
        assert m.util_mean_fleet_pct == 0.0  # everything deferred
        assert len(m.series["t"]) == 12
        assert m.summary_dict()["faults"] == 12


class TestLogsRoundTrip:
    def test_timeseries_roundtrip_exact(self, tmp_path):
        cfg = small_config()
        m = ev.run_episode(cfg, "thermal", 11, out_dir=tmp_path)
        back = ev.read_timeseries(tmp_path / "timeseries.csv")
        assert set(back) == set(m.series)
        for name, arr in m.series.items():
            assert np.array_equal(back[name], arr), name

    def test_rebuild_summary_is_bit_identical(self, tmp_path):
        cfg = small_config()
        ev.run_episode(cfg, "powercool", 2, out_dir=tmp_path)
        stored = json.loads((tmp_path / "summary.json").read_text())
        rebuilt = ev.rebuild_summary(tmp_path)
        assert rebuilt == stored
        assert json.dumps(rebuilt, sort_keys=True) == json.dumps(stored, sort_keys=True)

    def test_repeat_runs_write_identical_bytes(self, tmp_path):
        cfg = small_config()
        ev.run_episode(cfg, "greedy", 5, out_dir=tmp_path / "a")
        ev.run_episode(cfg, "greedy", 5, out_dir=tmp_path / "b")
        for name in ("timeseries.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()


class TestExperimentGrid:
    def test_paired_seeds_share_schedules_across_arms(self):
        cfg = small_config()
        spec = ev.ExperimentSpec(
            config=cfg, policies=("random", "greedy", "thermal"), seeds=(0, 1)
        )
        res = ev.run_experiment(spec)
        assert len(res.cells) == 6
        for seed in (0, 1):
            digests = {
                res.cell(p, seed).metrics.schedule_digest
                for p in ("random", "greedy", "thermal")
            }
            assert len(digests) == 1
            assert res.digests[(seed, 1.0)] in digests
        # different seeds draw different workloads
        assert res.digests[(0, 1.0)] != res.digests[(1, 1.0)]

    def test_single_cell_aggregate_has_zero_std(self):
        cfg = small_config()
        res = ev.run_experiment(
            ev.ExperimentSpec(config=cfg, policies=("greedy",), seeds=(5,))
        )
        (row,) = res.aggregates
        assert row["n_cells"] == 1 and row["n_failed"] == 0
        assert all(stat["std"] == 0.0 for stat in row["metrics"].values())
        cell = res.cell("greedy", 5)
        for name, stat in row["metrics"].items():
            assert stat["mean"] == getattr(cell.metrics, name)

    def test_failed_cell_is_flagged_and_skipped(self):
        cfg = small_config()
        res = ev.run_experiment(
            ev.ExperimentSpec(config=cfg, policies=("greedy", "nosuch"), seeds=(0,))
        )
        bad = res.cell("nosuch", 0)
        assert bad.failed and "unknown policy" in bad.error
        good = res.aggregate("greedy")
        assert good["n_failed"] == 0 and good["metrics"]
        flagged = res.aggregate("nosuch")
        assert flagged["n_failed"] == 1 and flagged["metrics"] == {}

    def test_queue_grows_with_arrival_scale(self):
        cfg = small_config()
        spec = ev.ExperimentSpec(
            config=cfg,
            policies=("greedy",),
            seeds=(0, 1),
            arrival_scales=(1.0, 2.0),
        )
        res = ev.run_experiment(spec)
        low = res.aggregate("greedy", 1.0)["metrics"]["backlog_mean"]["mean"]
        high = res.aggregate("greedy", 2.0)["metrics"]["backlog_mean"]["mean"]
        assert high > low

    def test_process_pool_matches_serial(self):
        cfg = small_config(episode_length=12)
        base = ev.ExperimentSpec(config=cfg, policies=("greedy", "random"), seeds=(0,))
        serial = ev.run_experiment(base)
        parallel = ev.run_experiment(replace(base, jobs=2))
        for a, b in zip(serial.cells, parallel.cells):
            assert a.metrics.summary_dict() == b.metrics.summary_dict()

    def test_spec_validation(self):
        cfg = small_config()
        assert ev.ExperimentSpec(config=cfg, policies=()).validate()
        assert ev.ExperimentSpec(config=cfg, policies=("greedy",), seeds=()).validate()
        assert ev.ExperimentSpec(
            config=cfg, policies=("greedy",), arrival_scales=(0.0,)
        ).validate()
        with pytest.raises(ValueError):
            ev.run_experiment(ev.ExperimentSpec(config=cfg, policies=()))

    def test_experiment_directory_layout(self, tmp_path):
        cfg = small_config(episode_length=12)
        spec = ev.ExperimentSpec(
            config=cfg, policies=("greedy",), seeds=(0,), out_dir=str(tmp_path)
        )
        ev.run_experiment(spec)
        cell = tmp_path / "cells" / "greedy_s0_x1"
        assert (cell / "timeseries.csv").exists()
        assert (cell / "summary.json").exists()
        header = (tmp_path / "summary.csv").read_text().splitlines()[0]
        assert header.startswith("policy,arrival_scale,n_cells,n_failed")
        assert "energy_total_kwh_mean" in header


class TestSummaryTable:
    def test_table_shape_and_sections(self):
        cfg = small_config()
        res = ev.run_experiment(
            ev.ExperimentSpec(config=cfg, policies=("greedy", "random"), seeds=(0,))
        )
        text = ev.format_summary_table(res.aggregates)
        for section in ("QoS", "Thermal", "Energy"):
            assert section in text
        for label in ("cpu util [%]", "temp max [C]", "cost [$]"):
            assert label in text
        header = text.splitlines()[1]
        assert "greedy" in header and "random" in header
        assert "+-" in text

    def test_table_marks_failed_groups(self):
        cfg = small_config()
        res = ev.run_experiment(
            ev.ExperimentSpec(config=cfg, policies=("greedy", "nosuch"), seeds=(0,))
        )
        text = ev.format_summary_table(res.aggregates)
        assert "(1 failed)" in text


class TestFrontierAndKnee:
    def test_sweep_emits_one_row_per_scale_and_policy(self, tmp_path):
        cfg = small_config(episode_length=12)
        spec = ev.ExperimentSpec(
            config=cfg,
            policies=("greedy", "random"),
            seeds=(0,),
            arrival_scales=(0.5, 2.0),
            out_dir=str(tmp_path),
        )
        _, frontier = ev.saturation_sweep(spec)
        assert len(frontier) == 4
        assert [(r["arrival_scale"], r["policy"]) for r in frontier] == [
            (0.5, "greedy"),
            (0.5, "random"),
            (2.0, "greedy"),
            (2.0, "random"),
        ]
        lines = (tmp_path / "frontier.csv").read_text().splitlines()
        assert lines[0] == (
            "arrival_scale,policy,util_mean_fleet_pct,backlog_mean,"
            "temp_max_c,throttle_pct"
        )
        assert len(lines) == 5
        util = {
            (r["arrival_scale"], r["policy"]): r["util_mean_fleet_pct"]
            for r in frontier
        }
        assert util[(2.0, "greedy")] > util[(0.5, "greedy")]

    def test_knee_on_hockey_stick(self):
        xs = [0.5, 1.0, 1.5, 2.0, 2.5]
        ys = [0.0, 0.05, 0.10, 2.0, 4.0]
        report = ev.detect_knee(xs, ys)
        assert report.ratio > 5.0
        assert report.knee_x == 2.0

    def test_no_knee_on_linear_growth(self):
        xs = [0.5, 1.0, 1.5, 2.0]
        ys = [1.0, 2.0, 3.0, 4.0]
        report = ev.detect_knee(xs, ys)
        assert report.ratio == pytest.approx(1.0)
        assert report.knee_x is None

    def test_flat_start_cannot_hide_a_knee(self):
        xs = [0.5, 1.0, 1.5, 2.0, 2.5]
        ys = [0.0, 0.0, 0.0, 1.0, 2.0]
        report = ev.detect_knee(xs, ys)
        assert report.knee_x == 2.0

    def test_short_grids_degenerate_cleanly(self):
        report = ev.detect_knee([1.0], [3.0])
        assert report.knee_x is None and report.ratio == 0.0
