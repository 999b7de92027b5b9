"""Scenario configs, replica scheduling, convergence studies and regressions.

A study solves the macroscopic system once on a grid that resolves the
smoothing kernel of the largest N, then runs independent particle replicas
for every N of the sweep against that shared trajectory. Replica random
streams come from ``SeedSequence(master_seed, spawn_key=(N, replica))`` so
results do not depend on scheduling order or worker count.
"""
from __future__ import annotations

import copy
import csv
import datetime as _dt
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from ._validation import ValidationReport
from .grid import GridField, gaussian_bump, grid_for_resolution
from .kernels import Kernel, ScalingParams, kernel_approx_decay, validate_scaling
from .material import (
    ConstantMatrix,
    FragTable,
    SpeciesTable,
    ZeroVelocity,
    shattering_table,
    species_table_from_dict,
    species_table_to_dict,
    validate_species_table,
)
from .observables import (
    DistanceRecord,
    TestDictionary,
    distance_record,
    empirical_mass,
    fluctuation_probe,
    mass_report,
)
from .particles import ParticleState, StepConfig, run, sample_initial_state, write_particle_dump
from .pde import PdeConfig, PdeTrajectory, _Operators, ode_oracle, solve

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_CLIP_THRESHOLD = 1e-4


class ConfigError(ValueError):
    """Study configuration failed validation; nothing was simulated."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class InitialCondition:
    """Initial densities before normalization to unit total mass.

    ``kind`` is ``"gaussian_bump"`` (one bump per species, shared centre and
    width, species integral ``masses[r]``) or ``"uniform"``.
    """

    kind: str
    masses: tuple[float, ...]
    center: tuple[float, ...] = ()
    width: float = 1.0

    def fields(self, table: SpeciesTable, d: int, n: int, L: float) -> GridField:
        if len(self.masses) != table.R:
            raise ValueError(f"initial condition lists {len(self.masses)} species, table has {table.R}")
        vals = np.zeros((table.R,) + (n,) * d)
        for r, mass in enumerate(self.masses):
            if mass == 0:
                continue
            if self.kind == "gaussian_bump":
                vals[r] = gaussian_bump(d, n, L, self.center, self.width, mass)
            elif self.kind == "uniform":
                vals[r] = mass / L**d
            else:
                raise ValueError(f"unknown initial condition kind {self.kind!r}")
        grid = GridField(d, n, L, vals)
        total = float(table.mass_array @ grid.integrals())
        if total <= 0:
            raise ValueError("initial densities carry no mass")
        return grid.like(vals / total)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "masses": list(self.masses)}
        if self.kind == "gaussian_bump":
            out.update(center=list(self.center), width=self.width)
        return out


@dataclass
class StudyConfig:
    name: str
    table: SpeciesTable
    L: float
    scaling: ScalingParams
    N_sweep: list[int]
    replicas: int
    dt: float
    pde: PdeConfig
    snapshot_times: list[float]
    out_dir: Path
    master_seed: int
    initial: InitialCondition
    grid_n: int | None = None
    method: str = "thinning"
    max_event_prob: float = 0.1
    clip_threshold: float = DEFAULT_CLIP_THRESHOLD
    dict_modes: int = 4
    dict_bumps: int = 8
    dumps: bool = False
    workers: int = 1
    kernel_norm: float = 1.0  # fault-injection hook

    @property
    def d(self) -> int:
        return self.table.d

    @property
    def t_end(self) -> float:
        return self.pde.t_end

    def grid_nodes(self) -> int:
        if self.grid_n is not None:
            return self.grid_n
        alpha_max = self.scaling.with_N(max(self.N_sweep)).alpha_hat
        return grid_for_resolution(self.L, self.d, alpha_max)

    def step_config(self, dt: float | None = None) -> StepConfig:
        return StepConfig(dt or self.dt, self.max_event_prob, None, self.method)

    def validate(self) -> ValidationReport:
        rep = ValidationReport()
        rep.extend(validate_species_table(self.table), "species table: ")
        rep.extend(validate_scaling(self.d, self.scaling.beta, self.scaling.beta_hat), "scaling: ")
        if not self.N_sweep:
            rep.add("N sweep is empty")
        if any(b <= a for a, b in zip(self.N_sweep, self.N_sweep[1:])):
            rep.add(f"N sweep {self.N_sweep} is not strictly increasing")
        if any(n < 1 for n in self.N_sweep):
            rep.add("N values must be positive")
        if self.replicas < 1:
            rep.add(f"replicas must be >= 1, got {self.replicas}")
        if not self.dt > 0:
            rep.add(f"dt must be > 0, got {self.dt}")
        elif self.dt * self.table.R * self.table.C_a > self.max_event_prob * (1 + 1e-12):
            rep.add(f"dt*R*C_a = {self.dt * self.table.R * self.table.C_a:.4g} exceeds "
                    f"max_event_prob = {self.max_event_prob}")
        if any(t < 0 or t > self.t_end + 1e-12 for t in self.snapshot_times):
            rep.add("snapshot times must lie in [0, t_end]")
        if len(self.initial.masses) != self.table.R:
            rep.add("initial condition species count does not match the table")
        if self.initial.kind not in ("gaussian_bump", "uniform"):
            rep.add(f"unknown initial condition kind {self.initial.kind!r}")
        if self.grid_n is not None and self.N_sweep:
            h = self.L / self.grid_n
            a = self.scaling.with_N(max(self.N_sweep)).alpha_hat
            if h > 0.25 / a * (1 + 1e-12):
                rep.add(f"grid_n={self.grid_n} does not resolve the smoothing kernel at N={max(self.N_sweep)}")
        return rep

    def to_dict(self) -> dict[str, Any]:
        out = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "d": self.d,
            "L": self.L,
            **species_table_to_dict(self.table),
            "initial": self.initial.to_dict(),
            "scaling": {"beta": self.scaling.beta, "beta_hat": self.scaling.beta_hat},
            "N_sweep": list(self.N_sweep),
            "replicas": self.replicas,
            "dt": self.dt,
            "t_end": self.t_end,
            "snapshot_times": list(self.snapshot_times),
            "pde": {"dt": self.pde.dt, "reaction": self.pde.reaction, "grid_n": self.grid_n},
            "method": self.method,
            "max_event_prob": self.max_event_prob,
            "clip_threshold": self.clip_threshold,
            "dictionary": {"modes": self.dict_modes, "bumps": self.dict_bumps},
            "dumps": self.dumps,
            "master_seed": self.master_seed,
            "output_dir": str(self.out_dir),
        }
        return out


def snapshot_grid(t_end: float, count: int, dt: float) -> list[float]:
    """``count`` equispaced times in ``[0, t_end]``, rounded onto the ``dt`` grid."""
    raw = np.linspace(0.0, t_end, max(1, count)) if count > 1 else np.array([t_end])
    return sorted({round(round(t / dt) * dt, 12) for t in raw})


def config_from_dict(raw: dict[str, Any], base_dir: Path | None = None) -> StudyConfig:
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    raw = copy.deepcopy(raw)
    d, L = int(raw.get("d", 1)), float(raw["L"])
    if raw.get("fragmentation") == "shattering":
        masses = [int(s["mass"]) for s in raw["species"]]
        raw["fragmentation"] = shattering_table(masses).entries()
    try:
        table = species_table_from_dict(raw, d, L)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid species table: {exc}") from exc
    sweep = [int(n) for n in raw["N_sweep"]]
    sc = raw.get("scaling", {})
    scaling = ScalingParams(d, float(sc.get("beta", 0.1)), float(sc.get("beta_hat", 0.3)), sweep[0] if sweep else 1)
    t_end = float(raw["t_end"])
    dt = float(raw["dt"])
    if "snapshot_times" in raw:
        times = sorted({round(round(float(t) / dt) * dt, 12) for t in raw["snapshot_times"]})
    else:
        times = snapshot_grid(t_end, int(raw.get("snapshots", 20)), dt)
    pde_raw = raw.get("pde", {})
    init = raw.get("initial", {"kind": "uniform", "masses": [1.0] * table.R})
    out_dir = Path(raw.get("output_dir", f"out/{raw.get('name', 'study')}"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    dictionary = raw.get("dictionary", {})
    return StudyConfig(
        name=str(raw.get("name", "study")),
        table=table,
        L=L,
        scaling=scaling,
        N_sweep=sweep,
        replicas=int(raw.get("replicas", 1)),
        dt=dt,
        pde=PdeConfig(t_end, pde_raw.get("dt"), pde_raw.get("reaction", "rk4")),
        snapshot_times=times,
        out_dir=out_dir,
        master_seed=int(raw.get("master_seed", 0)),
        initial=InitialCondition(
            kind=init.get("kind", "uniform"),
            masses=tuple(float(m) for m in init["masses"]),
            center=tuple(float(c) for c in init.get("center", [L / 2] * d)),
            width=float(init.get("width", 1.0)),
        ),
        grid_n=pde_raw.get("grid_n"),
        method=raw.get("method", "thinning"),
        max_event_prob=float(raw.get("max_event_prob", 0.1)),
        clip_threshold=float(raw.get("clip_threshold", DEFAULT_CLIP_THRESHOLD)),
        dict_modes=int(dictionary.get("modes", 4)),
        dict_bumps=int(dictionary.get("bumps", 8)),
        dumps=bool(raw.get("dumps", False)),
        workers=int(raw.get("workers", 1)),
    )


def load_config(path: str | Path) -> StudyConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return config_from_dict(raw)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: missing or malformed field {exc}") from exc


def validate_config(cfg: StudyConfig) -> ValidationReport:
    return cfg.validate()


# ---------------------------------------------------------------------------
# shipped scenarios (artifact choices, not taken from any reference setup)


def default_scenario(**overrides) -> dict[str, Any]:
    """Binary shattering of a Gaussian bump in d=1 on a box of side 10."""
    raw = {
        "schema_version": SCHEMA_VERSION,
        "name": "default_shattering",
        "d": 1,
        "L": 10.0,
        "species": [
            {"mass": 1, "sigma": 1.0, "velocity": {"kind": "zero"}},
            {"mass": 2, "sigma": 0.5, "velocity": {"kind": "constant", "vector": [0.5]}},
        ],
        "rate": {"kind": "constant", "value": 1.0},
        "fragmentation": "shattering",
        "C_a": 5.0,
        "initial": {"kind": "gaussian_bump", "center": [5.0], "width": 1.0, "masses": [0.0, 0.5]},
        "scaling": {"beta": 0.1, "beta_hat": 0.3},
        "N_sweep": [1000, 4000, 16000],
        "replicas": 30,
        "dt": 1e-3,
        "t_end": 1.0,
        "snapshots": 20,
        "pde": {"dt": None, "reaction": "rk4", "grid_n": None},
        "master_seed": 20240601,
        "output_dir": "out/default_shattering",
    }
    raw.update(overrides)
    return raw


def homogeneous_scenario(**overrides) -> dict[str, Any]:
    """Binary shattering from uniform data on the unit box, logistic species-2 decay."""
    raw = default_scenario(
        name="homogeneous_shattering",
        L=1.0,
        species=[
            {"mass": 1, "sigma": 0.1, "velocity": {"kind": "zero"}},
            {"mass": 2, "sigma": 0.1, "velocity": {"kind": "zero"}},
        ],
        C_a=1.0,
        initial={"kind": "uniform", "masses": [0.0, 0.5]},
        N_sweep=[10000],
        output_dir="out/homogeneous_shattering",
    )
    raw.update(overrides)
    return raw


def diffusion_scenario(**overrides) -> dict[str, Any]:
    """A single species diffusing without collisions."""
    raw = default_scenario(
        name="pure_diffusion",
        species=[{"mass": 1, "sigma": 1.0, "velocity": {"kind": "zero"}}],
        rate={"kind": "constant", "value": 0.0},
        fragmentation=[[1, 1, 1, 1]],
        C_a=1.0,
        initial={"kind": "gaussian_bump", "center": [5.0], "width": 1.0, "masses": [1.0]},
        N_sweep=[1000, 4000],
        replicas=100,
        dt=0.05,
        t_end=0.5,
        snapshots=2,
        output_dir="out/pure_diffusion",
    )
    raw.update(overrides)
    return raw


# ---------------------------------------------------------------------------
# replicas


def replica_seed(master_seed: int, N: int, replica: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(int(N), int(replica)))


def build_replica(cfg: StudyConfig, fields0: GridField, N: int, replica: int) -> tuple[ParticleState, Kernel]:
    """Initial particle state and interaction kernel of one replica."""
    rng = np.random.default_rng(replica_seed(cfg.master_seed, N, replica))
    scaling = cfg.scaling.with_N(N)
    state = sample_initial_state(cfg.table, fields0, N, scaling, rng)
    kernel = Kernel(cfg.d, scaling.alpha, cfg.L, cfg.kernel_norm)
    return state, kernel


class StepMonitor:
    """Counts per-step violations of the atom-count and particle-count invariants."""

    def __init__(self):
        self.steps = 0
        self.violations = 0

    def __call__(self, state: ParticleState) -> None:
        self.steps += 1
        counts = state.counts
        if int(counts @ state.masses) != state.N or int(counts.sum()) > state.N:
            self.violations += 1


@dataclass
class ReplicaResult:
    N: int
    replica: int
    records: list[DistanceRecord]
    wall_time: float
    clip_fraction: float
    N_eff: int


def _replica_job(cfg: StudyConfig, fields0: GridField, traj: PdeTrajectory,
                 dictionary: TestDictionary, N: int, replica: int) -> ReplicaResult:
    t0 = time.perf_counter()
    state, kernel = build_replica(cfg, fields0, N, replica)
    k_hat = Kernel(cfg.d, cfg.scaling.with_N(N).alpha_hat, cfg.L)
    records: list[DistanceRecord] = []

    def observe(snap: ParticleState) -> None:
        records.append(distance_record(snap, traj.at(snap.t), k_hat, dictionary, cfg.table))

    run(state, cfg.table, kernel, cfg.step_config(), cfg.t_end, cfg.snapshot_times, callback=observe)
    return ReplicaResult(N, replica, records, time.perf_counter() - t0, state.clip_fraction, state.N)


def _map_jobs(fn: Callable, args: list[tuple], workers: int) -> Iterable:
    if workers <= 1 or len(args) <= 1:
        return (fn(*a) for a in args)
    pool = ProcessPoolExecutor(max_workers=workers)
    try:
        return list(pool.map(fn, *zip(*args)))
    finally:
        pool.shutdown()


# ---------------------------------------------------------------------------
# studies


@dataclass
class ConvergenceRow:
    N: int
    replicas: int
    mean_max_d2: float
    se_max_d2: float
    mean_D: float
    clip_fraction: float
    wall_time: float
    se_flagged: bool = False

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class ConvergenceReport:
    rows: list[ConvergenceRow]
    csv_rows: list[dict[str, Any]] = field(default_factory=list)
    clip_threshold: float = DEFAULT_CLIP_THRESHOLD
    report_path: Path | None = None
    summary_path: Path | None = None

    @property
    def clip_healthy(self) -> bool:
        return all(r.clip_fraction < self.clip_threshold for r in self.rows)

    def decreases(self) -> list[tuple[float, float]]:
        """``(drop in mean, pooled standard error)`` between consecutive N."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            out.append((a.mean_max_d2 - b.mean_max_d2, math.hypot(a.se_max_d2, b.se_max_d2)))
        return out

    def trend_ok(self) -> bool:
        return all(drop > se for drop, se in self.decreases())


def csv_columns(R: int) -> list[str]:
    return ["N", "replica", "t"] + [f"d2_{r + 1}" for r in range(R)] + ["D_est", "mass", "clip_frac"]


def _csv_row(res: ReplicaResult, rec: DistanceRecord) -> dict[str, Any]:
    row: dict[str, Any] = {"N": res.N_eff, "replica": res.replica, "t": rec.t}
    for r, v in enumerate(rec.d2):
        row[f"d2_{r + 1}"] = float(v)
    row.update(D_est=rec.D_total, mass=rec.total_atoms, clip_frac=rec.clip_fraction)
    return row


def _fmt(v: Any) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _aggregate(N: int, results: list[ReplicaResult]) -> ConvergenceRow:
    maxes = np.array([max(rec.d2_total for rec in res.records) for res in results])
    Ds = np.array([np.mean([rec.D_total for rec in res.records]) for res in results])
    n = len(results)
    se = float(maxes.std(ddof=1) / math.sqrt(n)) if n >= 2 else float("nan")
    return ConvergenceRow(
        N=N,
        replicas=n,
        mean_max_d2=float(maxes.mean()),
        se_max_d2=se,
        mean_D=float(Ds.mean()),
        clip_fraction=float(np.mean([r.clip_fraction for r in results])),
        wall_time=float(sum(r.wall_time for r in results)),
        se_flagged=n < 2,
    )


def solve_reference(cfg: StudyConfig) -> tuple[GridField, PdeTrajectory]:
    n = cfg.grid_nodes()
    fields0 = cfg.initial.fields(cfg.table, cfg.d, n, cfg.L)
    times = sorted(set(cfg.snapshot_times))
    traj = solve(fields0, cfg.table, cfg.pde, times)
    return fields0, traj


def run_study(cfg: StudyConfig, workers: int | None = None) -> ConvergenceReport:
    """Run every (N, replica) job and write ``report.csv`` and ``summary.json``.

    Rows are written in (N, replica, t) order as each N completes. A failure
    after validation still leaves the rows written so far plus a summary
    marked ``aborted``.
    """
    rep = cfg.validate()
    if not rep:
        raise ConfigError("; ".join(rep.problems))
    workers = workers if workers is not None else cfg.workers
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t_start = time.perf_counter()
    report = ConvergenceReport([], clip_threshold=cfg.clip_threshold,
                               report_path=out / "report.csv", summary_path=out / "summary.json")
    cols = csv_columns(cfg.table.R)
    status, error = "complete", None
    pde_diag: dict[str, Any] = {}
    try:
        with open(report.report_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            fh.flush()
            fields0, traj = solve_reference(cfg)
            pde_diag = dict(traj.diagnostics.__dict__, grid_n=fields0.n)
            dictionary = TestDictionary(cfg.d, cfg.L, cfg.dict_modes, cfg.dict_bumps)
            for N in cfg.N_sweep:
                log.info("study %s: N=%d, %d replicas", cfg.name, N, cfg.replicas)
                args = [(cfg, fields0, traj, dictionary, N, i) for i in range(cfg.replicas)]
                results = list(_map_jobs(_replica_job, args, workers))
                for res in results:
                    for rec in res.records:
                        row = _csv_row(res, rec)
                        report.csv_rows.append(row)
                        writer.writerow([_fmt(row[c]) for c in cols])
                fh.flush()
                report.rows.append(_aggregate(N, results))
    except Exception as exc:
        status, error = "aborted", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        summary = {
            "schema_version": SCHEMA_VERSION,
            "status": status,
            "error": error,
            "scenario": cfg.name,
            "started": started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_time": time.perf_counter() - t_start,
            "workers": workers,
            "config": cfg.to_dict(),
            "seeds": {"master_seed": cfg.master_seed,
                      "derivation": "SeedSequence(master_seed, spawn_key=(N, replica))",
                      "jobs": [[N, i] for N in cfg.N_sweep for i in range(cfg.replicas)]},
            "pde": pde_diag,
            "metric_D": "lower bound from a finite test-function dictionary",
            "clip_threshold": cfg.clip_threshold,
            "clip_healthy": report.clip_healthy,
            "rows": [r.to_dict() for r in report.rows],
        }
        with open(report.summary_path, "w") as fh:
            json.dump(summary, fh, indent=2, default=_json_default)
    return report


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_report(path: str | Path) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        conv = {k: float(v) for k, v in row.items()}
        conv["N"], conv["replica"], conv["mass"] = int(row["N"]), int(row["replica"]), int(row["mass"])
        out.append(conv)
    return out


# ---------------------------------------------------------------------------
# metric bound consistency


@dataclass
class MetricBoundCheck:
    C: float
    violations: int
    worst_ratio: float
    rows_checked: int


def metric_bound_check(rows: Sequence[dict[str, Any]], cfg: StudyConfig) -> MetricBoundCheck:
    """Fit ``C`` on the smallest-N rows, then count rows with ``D_est > C (1/alpha_hat + sum ||d_r||_2)``."""
    R = cfg.table.R

    def ratio(row):
        a_hat = cfg.scaling.with_N(row["N"]).alpha_hat
        bound = 1.0 / a_hat + sum(math.sqrt(row[f"d2_{r + 1}"]) for r in range(R))
        return row["D_est"] / bound

    n_min = min(row["N"] for row in rows)
    C = max(ratio(row) for row in rows if row["N"] == n_min)
    others = [ratio(row) for row in rows if row["N"] != n_min]
    bad = sum(1 for x in others if x > C)
    return MetricBoundCheck(C, bad, max(others, default=0.0), len(others))


# ---------------------------------------------------------------------------
# single runs


@dataclass
class SingleRunResult:
    records: list[DistanceRecord]
    final_state: ParticleState
    dump_paths: list[Path]
    distances_path: Path
    mass_trace_path: Path
    mass_trace: list[dict[str, float]]


def distance_columns(R: int) -> list[str]:
    return (["t"] + [f"d2_{r + 1}" for r in range(R)] + [f"D_{r + 1}" for r in range(R)]
            + [f"mass_{r + 1}" for r in range(R)] + ["total_atoms", "clip_frac"])


def run_single(cfg: StudyConfig, N: int | None = None, replica: int = 0,
               out_dir: str | Path | None = None, dumps: bool = True) -> SingleRunResult:
    """One replica with particle dumps, distance records and a species-mass trace."""
    rep = cfg.validate()
    if not rep:
        raise ConfigError("; ".join(rep.problems))
    N = N or cfg.N_sweep[0]
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields0, traj = solve_reference(cfg)
    dictionary = TestDictionary(cfg.d, cfg.L, cfg.dict_modes, cfg.dict_bumps)
    state, kernel = build_replica(cfg, fields0, N, replica)
    k_hat = Kernel(cfg.d, cfg.scaling.with_N(N).alpha_hat, cfg.L)
    records: list[DistanceRecord] = []
    dumps_out: list[Path] = []
    trace: list[dict[str, float]] = []

    def observe(snap: ParticleState) -> None:
        pde_field = traj.at(snap.t)
        records.append(distance_record(snap, pde_field, k_hat, dictionary, cfg.table))
        row = {"t": snap.t}
        for r, v in enumerate(empirical_mass(snap)):
            row[f"frac_{r + 1}"] = float(v)
        for r, v in enumerate(pde_field.integrals()):
            row[f"pde_{r + 1}"] = float(v)
        trace.append(row)
        if dumps:
            path = out / f"particles_{len(dumps_out):04d}.csv"
            write_particle_dump(snap, path)
            dumps_out.append(path)

    run(state, cfg.table, kernel, cfg.step_config(), cfg.t_end, cfg.snapshot_times, callback=observe)
    final = mass_report(state, cfg.table)
    if not final.ok:
        raise RuntimeError(f"final mass report failed: {final}")

    R = cfg.table.R
    dist_path = out / "distances.csv"
    with open(dist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(distance_columns(R))
        for rec in records:
            w.writerow([_fmt(rec.t)] + [_fmt(v) for v in rec.d2] + [_fmt(v) for v in rec.D]
                       + [str(m) for m in rec.species_mass] + [str(rec.total_atoms), _fmt(rec.clip_fraction)])
    trace_path = out / "mass_trace.csv"
    with open(trace_path, "w", newline="") as fh:
        cols = ["t"] + [f"frac_{r + 1}" for r in range(R)] + [f"pde_{r + 1}" for r in range(R)]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([_fmt(row[c]) for c in cols])
    if traj.fields:
        traj.fields[-1].to_csv(out / "pde_final.csv")
    return SingleRunResult(records, state, dumps_out, dist_path, trace_path, trace)


# ---------------------------------------------------------------------------
# ensembles used by the regression suite and the acceptance tests


def species_fractions(cfg: StudyConfig, N: int, replicas: int, dt: float | None = None,
                      monitor: StepMonitor | None = None, seed_offset: int = 0) -> np.ndarray:
    """Final ``N_r / N`` of independent replicas, shape ``(replicas, R)``."""
    n = cfg.grid_nodes() if cfg.initial.kind != "uniform" else 16
    fields0 = cfg.initial.fields(cfg.table, cfg.d, n, cfg.L)
    step = cfg.step_config(dt)
    out = np.zeros((replicas, cfg.table.R))
    for i in range(replicas):
        state, kernel = build_replica(cfg, fields0, N, seed_offset + i)
        run(state, cfg.table, kernel, step, cfg.t_end, on_step=monitor)
        out[i] = empirical_mass(state)
    return out


def fluctuation_variances(cfg: StudyConfig, Ns: Sequence[int], replicas: int,
                          f: Callable[[np.ndarray], np.ndarray], r: int = 0, t: float | None = None,
                          monitor: StepMonitor | None = None):
    """``fluctuation_probe`` results for each N at time ``t`` (default ``t_end``)."""
    t = cfg.t_end if t is None else t
    n = cfg.grid_nodes()
    fields0 = cfg.initial.fields(cfg.table, cfg.d, n, cfg.L)
    results = []
    for N in Ns:
        snaps = []
        for i in range(replicas):
            state, kernel = build_replica(cfg, fields0, N, i)
            snaps += run(state, cfg.table, kernel, cfg.step_config(), t, [t], on_step=monitor)
        results.append(fluctuation_probe(snaps, f, r))
    return results


def centered_bump(L: float, d: int, width: float) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth test function: a Gaussian bump of height 1 at the box centre."""
    c = np.full(d, L / 2)

    def f(x):
        dx = np.atleast_2d(x) - c
        dx -= L * np.round(dx / L)
        return np.exp(-0.5 * np.sum(dx * dx, axis=-1) / width**2)

    return f


def bump_decay_oracle(width: float, L: float, alphas: Sequence[float], modes: int = 4096) -> np.ndarray:
    """``||f - f*W_alpha||_2^2`` for a unit-mass periodized Gaussian in d=1, by Fourier series."""
    k = 2 * np.pi * np.arange(-modes, modes + 1) / L
    f_hat = np.exp(-0.5 * (width * k) ** 2)
    out = []
    for a in alphas:
        w_hat = np.exp(-0.5 * (k / a) ** 2)
        out.append(float(np.sum((f_hat * (1 - w_hat)) ** 2) / L))
    return np.array(out)


# ---------------------------------------------------------------------------
# regression suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    metrics: dict[str, Any] = field(default_factory=dict)


@dataclass
class RegressionReport:
    results: list[CheckResult]
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "warnings": self.warnings,
            "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail, "metrics": r.metrics}
                       for r in self.results],
        }


def check_kernel_decay(kernel_norm: float = 1.0, width: float = 1.0) -> CheckResult:
    """Grid decay norms against the Fourier-series oracle (1% relative) and slope <= -1.7."""
    L, alphas = 10.0, [4.0, 8.0, 16.0, 32.0]
    n = grid_for_resolution(L, 1, max(alphas))
    f = GridField(1, n, L, gaussian_bump(1, n, L, [L / 2], width)[None])
    fit = kernel_approx_decay(f, alphas, kernel_norm)
    oracle = bump_decay_oracle(width, L, alphas)
    rel = np.abs(fit.norms_sq / oracle - 1)
    ok = bool(np.all(rel < 0.01) and fit.slope <= -1.7)
    return CheckResult("kernel_decay", ok, f"slope {fit.slope:.4f}, max rel. deviation from oracle {rel.max():.2e}",
                       {"slope": fit.slope, "norms_sq": fit.norms_sq.tolist(), "oracle": oracle.tolist()})


def diffusion_refinement(ns: Sequence[int] = (32, 64, 128), t_end: float = 0.05) -> list[float]:
    """Max-norm errors of the diffusion solver against an exact decaying mode."""
    sigma = 1.0
    table = SpeciesTable((1,), (sigma,), (ZeroVelocity(1),), ConstantMatrix(np.zeros((1, 1))),
                         FragTable(np.ones((1, 1, 1), dtype=int)), 1.0, 1)
    errs = []
    for n in ns:
        x = np.arange(n) / n
        f0 = GridField(1, n, 1.0, (1 + 0.5 * np.sin(2 * np.pi * x))[None])
        traj = solve(f0, table, PdeConfig(t_end), [t_end])
        decay = math.exp(-0.5 * sigma**2 * (2 * np.pi) ** 2 * t_end)
        exact = 1 + 0.5 * decay * np.sin(2 * np.pi * x)
        errs.append(float(np.abs(traj.fields[-1].values[0] - exact).max()))
    return errs


def random_frag_table(rng: np.random.Generator, R: int) -> tuple[SpeciesTable, np.ndarray]:
    """Random valid table with masses ``1..R`` and a random rate matrix."""
    masses = tuple(range(1, R + 1))
    e = np.zeros((R, R, R), dtype=np.int64)
    for r in range(R):
        for q in range(R):
            left = masses[r]
            while left > 0:
                part = int(rng.integers(1, left + 1))
                e[r, q, part - 1] += 1
                left -= part
    a = rng.uniform(0.1, 2.0, (R, R))
    a = 0.5 * (a + a.T)
    table = SpeciesTable(masses, (0.0,) * R, tuple(ZeroVelocity(1) for _ in range(R)),
                         ConstantMatrix(a), FragTable(e), float(a.max()) + 1.0, 1)
    return table, a


def reaction_conservation(count: int, seed: int = 0) -> float:
    """Worst relative change of the mass functional over one reaction substep."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        R = int(rng.integers(1, 6))
        table, _ = random_frag_table(rng, R)
        n = 16
        s = GridField(1, n, 1.0, rng.uniform(0.0, 2.0, (R, n)))
        ops = _Operators(table, s)
        before = float(table.mass_array @ s.integrals())
        for scheme in ("euler", "rk4"):
            after_vals = ops.react(s.values, 0.01, scheme)
            after = float(table.mass_array @ s.like(after_vals).integrals())
            worst = max(worst, abs(after - before) / before)
    return worst


def pde_ode_gap(t_end: float = 1.0, dt: float = 1e-3) -> float:
    """Max per-node gap between the grid solver and the scalar oracle on uniform data."""
    cfg = config_from_dict(homogeneous_scenario(t_end=t_end))
    n = 8
    f0 = cfg.initial.fields(cfg.table, 1, n, cfg.L)
    s0 = f0.values[:, 0]
    traj = solve(f0, cfg.table, PdeConfig(t_end, dt), [t_end])
    oracle = ode_oracle(cfg.table, s0, t_end, dt)
    return float(np.abs(traj.fields[-1].values - oracle[:, None]).max())


def check_pde_order() -> CheckResult:
    errs = diffusion_refinement()
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    cons = reaction_conservation(20)
    gap = pde_ode_gap()
    ok = all(3.5 <= r <= 4.5 for r in ratios) and cons <= 1e-12 and gap <= 1e-8
    return CheckResult("pde_order", ok,
                       f"refinement ratios {[round(r, 3) for r in ratios]}, reaction drift {cons:.1e}, PDE-ODE gap {gap:.1e}",
                       {"errors": errs, "ratios": ratios, "reaction_drift": cons, "pde_ode_gap": gap})


def check_dt_halving(N: int = 2000, replicas: int = 12, kernel_norm: float = 1.0,
                     master_seed: int = 7) -> CheckResult:
    """Homogeneous shattering at dt and dt/2: oracle match and bias, with per-step invariant monitoring."""
    cfg = config_from_dict(homogeneous_scenario(master_seed=master_seed))
    cfg.kernel_norm = kernel_norm
    target = float(ode_oracle(cfg.table, [0.0, 0.5], cfg.t_end, 1e-4)[1])
    mon = StepMonitor()
    a = species_fractions(cfg, N, replicas, cfg.dt, mon)[:, 1]
    b = species_fractions(cfg, N, replicas, cfg.dt / 2, mon, seed_offset=replicas)[:, 1]
    se_a, se_b = a.std(ddof=1) / math.sqrt(replicas), b.std(ddof=1) / math.sqrt(replicas)
    shift = abs(a.mean() - b.mean())
    pooled = math.hypot(se_a, se_b)
    ok = shift < 2 * pooled and abs(a.mean() - target) < 3 * se_a and mon.violations == 0
    return CheckResult("dt_halving", ok,
                       f"means {a.mean():.5f}/{b.mean():.5f} vs oracle {target:.6f}, shift {shift:.2e} "
                       f"(2 SE = {2 * pooled:.2e}), invariant violations {mon.violations}/{mon.steps} steps",
                       {"mean_dt": float(a.mean()), "mean_half_dt": float(b.mean()),
                        "se_dt": float(se_a), "se_half_dt": float(se_b),
                        "oracle": target, "violations": mon.violations, "steps": mon.steps})


def check_fluctuation(N: int = 1000, replicas: int = 100, master_seed: int = 11) -> CheckResult:
    cfg = config_from_dict(diffusion_scenario(master_seed=master_seed, N_sweep=[N, 4 * N]))
    f = centered_bump(cfg.L, cfg.d, 1.0)
    mon = StepMonitor()
    res = fluctuation_variances(cfg, [N, 4 * N], replicas, f, monitor=mon)
    ratio = res[0].variance / res[1].variance
    ok = 2.5 <= ratio <= 6.0 and mon.violations == 0
    return CheckResult("fluctuation", ok, f"variance ratio N/4N = {ratio:.3f}",
                       {"variances": [r.variance for r in res], "ratio": ratio,
                        "violations": mon.violations, "steps": mon.steps})


def check_mass_conservation(N: int = 2000, t_end: float = 0.2, master_seed: int = 3) -> CheckResult:
    cfg = config_from_dict(default_scenario(master_seed=master_seed, t_end=t_end, N_sweep=[N]))
    mon = StepMonitor()
    species_fractions(cfg, N, 1, monitor=mon)
    ok = mon.violations == 0 and mon.steps > 0
    return CheckResult("mass_conservation", ok, f"{mon.violations} violations in {mon.steps} steps",
                       {"violations": mon.violations, "steps": mon.steps})


REGRESSION_CHECKS = ("kernel_decay", "pde_order", "dt_halving", "fluctuation", "mass_conservation")


def run_regressions(checks: Sequence[str] | None = None, kernel_norm: float = 1.0) -> RegressionReport:
    """Run the named checks (all by default). Failures are results, not exceptions.

    ``kernel_norm`` perturbs the normalization of every kernel the checks
    build; it exists to confirm that the suite detects such faults.
    """
    names = list(REGRESSION_CHECKS if checks is None else checks)
    report = RegressionReport([])
    if not names:
        msg = "no regression checks selected; passing vacuously"
        log.warning(msg)
        report.warnings.append(msg)
        return report
    runners = {
        "kernel_decay": lambda: check_kernel_decay(kernel_norm),
        "pde_order": check_pde_order,
        "dt_halving": lambda: check_dt_halving(kernel_norm=kernel_norm),
        "fluctuation": check_fluctuation,
        "mass_conservation": check_mass_conservation,
    }
    for name in names:
        if name not in runners:
            report.results.append(CheckResult(name, False, "unknown check"))
            continue
        t0 = time.perf_counter()
        try:
            res = runners[name]()
        except Exception as exc:  # failures are results
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        res.metrics["seconds"] = time.perf_counter() - t0
        log.info("regression %s: %s (%s)", name, "PASS" if res.passed else "FAIL", res.detail)
        report.results.append(res)
    return report
