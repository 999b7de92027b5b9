import csv
import json
import math

import numpy as np
import pytest

from smolsim import harness
from smolsim.harness import (
    bump_decay_oracle,
    config_from_dict,
    ConfigError,
    csv_columns,
    default_scenario,
    diffusion_scenario,
    homogeneous_scenario,
    load_config,
    metric_bound_check,
    read_report,
    replica_seed,
    run_regressions,
    run_single,
    run_study,
    snapshot_grid,
)
from smolsim.particles import read_particle_dump
from smolsim.pde import ode_oracle


def _smoke(tmp_path, **ov):
    raw = default_scenario(N_sweep=[300, 600], replicas=2, t_end=0.05, snapshots=3,
                           output_dir=str(tmp_path / "out"))
    raw.update(ov)
    return config_from_dict(raw)


def test_default_scenario_is_valid():
    cfg = config_from_dict(default_scenario())
    assert cfg.validate().ok
    assert cfg.N_sweep == [1000, 4000, 16000] and cfg.replicas == 30
    assert len(cfg.snapshot_times) == 20 and cfg.snapshot_times[-1] == 1.0


def test_config_round_trips_through_json(tmp_path):
    cfg = config_from_dict(default_scenario())
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()


def test_schema_version_is_enforced():
    with pytest.raises(ConfigError):
        config_from_dict(default_scenario(schema_version=2))


def test_malformed_config_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    raw = default_scenario()
    del raw["N_sweep"]
    p.write_text(json.dumps(raw))
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize("override,fragment", [
    ({"N_sweep": [4000, 1000]}, "strictly increasing"),
    ({"replicas": 0}, "replicas"),
    ({"dt": 0.05}, "max_event_prob"),
    ({"scaling": {"beta": 0.2, "beta_hat": 0.3}}, "scaling"),
])
def test_validation_problems(override, fragment):
    rep = config_from_dict(default_scenario(**override)).validate()
    assert not rep.ok and any(fragment in p for p in rep.problems)


def test_snapshot_grid_lands_on_time_steps():
    times = snapshot_grid(1.0, 7, 1e-3)
    assert len(times) == 7 and times[0] == 0.0 and times[-1] == 1.0
    assert all(abs(t / 1e-3 - round(t / 1e-3)) < 1e-9 for t in times)


def test_replica_seeds_are_distinct_and_stable():
    a = replica_seed(5, 1000, 0).generate_state(2)
    assert np.array_equal(a, replica_seed(5, 1000, 0).generate_state(2))
    assert not np.array_equal(a, replica_seed(5, 1000, 1).generate_state(2))
    assert not np.array_equal(a, replica_seed(5, 4000, 0).generate_state(2))


def test_single_row_smoke_study(tmp_path):
    raw = default_scenario(N_sweep=[1000], replicas=1, t_end=0.05, snapshots=2,
                           rate={"kind": "constant", "value": 0.0}, output_dir=str(tmp_path))
    report = run_study(config_from_dict(raw))
    assert len(report.rows) == 1
    row = report.rows[0]
    assert math.isfinite(row.mean_max_d2) and math.isfinite(row.mean_D)
    assert row.se_flagged and math.isnan(row.se_max_d2)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "complete" and len(summary["rows"]) == 1


def test_scaling_violation_aborts_before_simulating(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("simulated despite invalid scaling")

    monkeypatch.setattr(harness, "solve_reference", boom)
    cfg = _smoke(tmp_path, scaling={"beta": 0.2, "beta_hat": 0.3})
    with pytest.raises(ConfigError):
        run_study(cfg)
    assert not (tmp_path / "out").exists()


def test_report_columns_and_contents(tmp_path):
    cfg = _smoke(tmp_path)
    report = run_study(cfg)
    with open(report.report_path) as fh:
        header = next(csv.reader(fh))
    assert header == csv_columns(2) == ["N", "replica", "t", "d2_1", "d2_2", "D_est", "mass", "clip_frac"]
    rows = read_report(report.report_path)
    assert len(rows) == 2 * 2 * 3
    assert [(r["N"], r["replica"]) for r in rows] == sorted((r["N"], r["replica"]) for r in rows)
    assert all(r["mass"] == r["N"] for r in rows)
    summary = json.loads(report.summary_path.read_text())
    assert summary["seeds"]["jobs"] == [[300, 0], [300, 1], [600, 0], [600, 1]]
    assert summary["metric_D"].startswith("lower bound")


def test_identical_config_gives_identical_csv_bytes(tmp_path):
    a = run_study(_smoke(tmp_path / "a"))
    b = run_study(_smoke(tmp_path / "b"), workers=2)
    assert a.report_path.read_bytes() == b.report_path.read_bytes()
    c = run_study(_smoke(tmp_path / "c", master_seed=1))
    assert a.report_path.read_bytes() != c.report_path.read_bytes()


def test_mid_run_failure_leaves_aborted_summary(tmp_path, monkeypatch):
    real = harness._replica_job

    def flaky(cfg, fields0, traj, dictionary, N, replica):
        if N == 600:
            raise RuntimeError("injected")
        return real(cfg, fields0, traj, dictionary, N, replica)

    monkeypatch.setattr(harness, "_replica_job", flaky)
    cfg = _smoke(tmp_path)
    with pytest.raises(RuntimeError):
        run_study(cfg)
    summary = json.loads((cfg.out_dir / "summary.json").read_text())
    assert summary["status"] == "aborted" and "injected" in summary["error"]
    assert len(summary["rows"]) == 1
    assert {r["N"] for r in read_report(cfg.out_dir / "report.csv")} == {300}


def test_run_single_at_time_zero_dumps_initial_state(tmp_path):
    cfg = config_from_dict(default_scenario(t_end=0.0, snapshots=1, N_sweep=[500]))
    res = run_single(cfg, out_dir=tmp_path)
    assert [p.name for p in res.dump_paths] == ["particles_0000.csv"]
    back = read_particle_dump(res.dump_paths[0])
    assert back.t == 0.0 and back.total_atoms == back.N


def test_run_single_homogeneous_trace_follows_oracle(tmp_path):
    cfg = config_from_dict(homogeneous_scenario(snapshots=5))
    N = 4000
    res = run_single(cfg, N=N, out_dir=tmp_path, dumps=False)
    oracle = ode_oracle(cfg.table, [0.0, 0.5], cfg.t_end, 1e-4, times=[r["t"] for r in res.mass_trace])
    for row, s in zip(res.mass_trace, oracle):
        # one replica: binomial-scale noise on the particle fraction
        assert abs(row["frac_2"] - s[1]) < 5 * math.sqrt(0.25 / N)
        assert row["pde_2"] == pytest.approx(s[1], abs=1e-6)
    assert res.final_state.total_atoms == res.final_state.N
    with open(res.mass_trace_path) as fh:
        assert next(csv.reader(fh)) == ["t", "frac_1", "frac_2", "pde_1", "pde_2"]


def test_run_single_final_total_equals_N(tmp_path):
    cfg = config_from_dict(default_scenario(t_end=0.1, snapshots=3))
    res = run_single(cfg, N=800, out_dir=tmp_path, dumps=False)
    last = res.records[-1]
    assert last.total_atoms == res.final_state.N
    assert (tmp_path / "distances.csv").exists() and (tmp_path / "pde_final.csv").exists()


def test_metric_bound_check_on_synthetic_rows():
    cfg = config_from_dict(default_scenario())
    rows = []
    for N, D in ((1000, 0.1), (4000, 0.05)):
        a_hat = cfg.scaling.with_N(N).alpha_hat
        rows.append({"N": N, "d2_1": 0.0, "d2_2": 0.0, "D_est": D * (1 / a_hat)})
    chk = metric_bound_check(rows, cfg)
    assert chk.C == pytest.approx(0.1) and chk.violations == 0 and chk.rows_checked == 1
    rows[1]["D_est"] *= 3
    assert metric_bound_check(rows, cfg).violations == 1


def test_decay_oracle_matches_frozen_closed_form():
    # same closed-form values as the kernel tests, approached by the periodic series
    from test_kernels import DECAY_ORACLE
    assert np.allclose(bump_decay_oracle(1.0, 10.0, [4, 8, 16, 32]), DECAY_ORACLE, rtol=1e-8)


def test_empty_regression_list_passes_vacuously():
    rep = run_regressions([])
    assert rep.passed and rep.results == [] and rep.warnings


def test_kernel_normalization_fault_is_detected():
    rep = run_regressions(["kernel_decay"], kernel_norm=1.05)
    assert not rep.passed
    assert run_regressions(["kernel_decay"]).passed


def test_unknown_regression_check_fails():
    rep = run_regressions(["no_such_check"])
    assert not rep.passed and rep.results[0].detail == "unknown check"


@pytest.mark.slow
def test_default_regressions_pass():
    rep = run_regressions()
    assert rep.passed, [(r.name, r.detail) for r in rep.results if not r.passed]
    assert json.loads(json.dumps(rep.to_dict()))["passed"] is True


def test_diffusion_scenario_is_collisionless():
    cfg = config_from_dict(diffusion_scenario())
    assert cfg.validate().ok and cfg.table.R == 1 and cfg.table.rates_vanish
