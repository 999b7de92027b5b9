"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one ``CRITERION k: PASS|FAIL`` line, printed in the
terminal summary. Criteria 4 and 9 share one default-scenario study.
"""
import math
import time

import numpy as np
import pytest

from smolsim.grid import GridField, gaussian_bump, grid_for_resolution
from smolsim.harness import (
    build_replica,
    check_dt_halving,
    check_fluctuation,
    config_from_dict,
    default_scenario,
    diffusion_refinement,
    metric_bound_check,
    pde_ode_gap,
    reaction_conservation,
    run_regressions,
    run_study,
)
from smolsim.kernels import Kernel, convolve_empirical, kernel_approx_decay
from smolsim.observables import mass_report
from smolsim.particles import run

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

# dimer fraction at t = 1 of homogeneous binary shattering from (0, 1/2)
S2_AT_ONE = 1.0 / (1.0 + math.e)


def _record(k: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_exact_mass_conservation():
    t0 = time.perf_counter()
    cfg = config_from_dict(default_scenario(N_sweep=[10_000]))
    fields0 = cfg.initial.fields(cfg.table, cfg.d, cfg.grid_nodes(), cfg.L)
    state, kernel = build_replica(cfg, fields0, 10_000, 0)
    run(state, cfg.table, kernel, cfg.step_config(), cfg.t_end)
    rep = mass_report(state, cfg.table)
    wall = time.perf_counter() - t0
    ok = rep.total_atoms == state.N and state.t == pytest.approx(1.0) and wall < 60
    _record(1, ok, f"sum m_r N_r = {rep.total_atoms}, N = {state.N}, t = {state.t:g}, {wall:.1f}s")


def test_criterion_2_count_bound_in_regressions():
    rep = run_regressions()
    steps = sum(r.metrics.get("steps", 0) for r in rep.results)
    bad = sum(r.metrics.get("violations", 0) for r in rep.results)
    monitored = [r.name for r in rep.results if "steps" in r.metrics]
    ok = bad == 0 and steps > 0 and set(monitored) == {"dt_halving", "fluctuation", "mass_conservation"}
    _record(2, ok, f"{bad} violations over {steps} monitored steps in {monitored}")


def test_criterion_3_homogeneous_oracle_and_dt_halving():
    t0 = time.perf_counter()
    res = check_dt_halving(N=10_000, replicas=30)
    m = res.metrics
    wall = time.perf_counter() - t0
    near = abs(m["mean_dt"] - S2_AT_ONE) < 3 * m["se_dt"]
    shift = abs(m["mean_dt"] - m["mean_half_dt"])
    pooled = math.hypot(m["se_dt"], m["se_half_dt"])
    ok = near and shift < 2 * pooled and m["violations"] == 0 and wall < 600
    _record(3, ok, f"mean {m['mean_dt']:.5f} +- {m['se_dt']:.1e} vs {S2_AT_ONE:.6f}; "
                   f"dt/2 shift {shift:.1e} < 2 SE {2 * pooled:.1e}; {wall:.0f}s")


@pytest.fixture(scope="module")
def default_study(tmp_path_factory):
    cfg = config_from_dict(default_scenario(output_dir=str(tmp_path_factory.mktemp("default_study"))))
    t0 = time.perf_counter()
    report = run_study(cfg)
    return cfg, report, time.perf_counter() - t0


def test_criterion_4_convergence_trend(default_study):
    cfg, report, wall = default_study
    means = [r.mean_max_d2 for r in report.rows]
    drops = report.decreases()
    ok = (cfg.N_sweep == [1000, 4000, 16000] and all(r.replicas == 30 for r in report.rows)
          and report.trend_ok() and wall < 1800)
    _record(4, ok, "mean max d2 " + ", ".join(f"{m:.3e}" for m in means)
            + "; drops/SE " + ", ".join(f"{d:.1e}/{s:.1e}" for d, s in drops) + f"; {wall:.0f}s")


def test_criterion_5_fluctuation_scaling():
    t0 = time.perf_counter()
    res = check_fluctuation(N=1000, replicas=100)
    wall = time.perf_counter() - t0
    ratio = res.metrics["ratio"]
    ok = 2.5 <= ratio <= 6.0 and wall < 300
    _record(5, ok, f"variance ratio N/4N = {ratio:.3f}; {wall:.0f}s")


def test_criterion_6_kernel_decay_exponent():
    t0 = time.perf_counter()
    L, alphas = 10.0, [4.0, 8.0, 16.0, 32.0]
    n = grid_for_resolution(L, 1, max(alphas))
    f = GridField(1, n, L, gaussian_bump(1, n, L, [L / 2], 1.0)[None])
    fit = kernel_approx_decay(f, alphas)
    wall = time.perf_counter() - t0
    ok = -2.3 <= fit.slope <= -1.7 and wall < 10
    _record(6, ok, f"fitted exponent of the squared L2 error {fit.slope:.4f} (band [-2.3, -1.7]); {wall:.2f}s")


def test_criterion_7_pde_order():
    t0 = time.perf_counter()
    errs = diffusion_refinement()
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    drift = reaction_conservation(100)
    gap = pde_ode_gap()
    wall = time.perf_counter() - t0
    ok = all(3.5 <= r <= 4.5 for r in ratios) and drift <= 1e-12 and gap <= 1e-8 and wall < 60
    _record(7, ok, f"refinement ratios {[round(r, 3) for r in ratios]}, reaction drift {drift:.1e}, "
                   f"PDE-ODE gap {gap:.1e}; {wall:.1f}s")


def test_criterion_8_cell_list_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(1, 2001))
        L = float(rng.uniform(1.0, 10.0))
        alpha = float(rng.uniform(0.5, 20.0))
        pts = rng.uniform(0, L, (n, d))
        k = Kernel(d, alpha, L)
        q_idx = rng.choice(n, size=min(n, 200), replace=False)
        fast = convolve_empirical(pts, n, k, pts[q_idx], exclude=q_idx)
        slow = convolve_empirical(pts, n, k, pts[q_idx], exclude=q_idx, method="naive")
        scale = np.maximum(np.abs(slow), 1e-300)
        worst = max(worst, float(np.max(np.abs(fast - slow) / scale, initial=0.0)))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-12 and wall < 10
    _record(8, ok, f"worst relative deviation {worst:.1e} over 100 configurations; {wall:.1f}s")


def test_criterion_9_metric_bound_consistency(default_study):
    cfg, report, _ = default_study
    chk = metric_bound_check(report.csv_rows, cfg)
    ok = chk.violations == 0 and chk.rows_checked > 0
    _record(9, ok, f"C = {chk.C:.3g} from N={cfg.N_sweep[0]}, {chk.violations} violations in "
                   f"{chk.rows_checked} rows (worst ratio {chk.worst_ratio:.3g})")
