"""Finite-difference solver for the macroscopic reaction-diffusion system.

Each step is Lie-split into first-order upwind advection, explicit central
diffusion and a reaction substep. The reaction substep is one RK4 step by
default (``reaction="euler"`` gives forward Euler). Both conserve the mass
functional exactly in exact arithmetic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import GridField
from .material import ConstantMatrix, SpeciesTable

log = logging.getLogger(__name__)

DIFFUSION_CFL = 0.5
ADVECTION_CFL = 0.9
CLIP_ABORT_MASS = 1e-10


class CFLViolation(ValueError):
    pass


class NegativityError(RuntimeError):
    """Accumulated negativity clipping exceeded the abort threshold."""


@dataclass(frozen=True)
class PdeConfig:
    t_end: float
    dt: float | None = None
    reaction: str = "rk4"
    safety: float = 0.9

    def __post_init__(self):
        if self.reaction not in ("rk4", "euler"):
            raise ValueError(f"unknown reaction scheme {self.reaction!r}")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")


@dataclass
class PdeDiagnostics:
    clipped_mass: float = 0.0
    clip_steps: int = 0
    max_clip_rel: float = 0.0
    steps: int = 0


class _Operators:
    """Per-node coefficients of a table on a grid; velocities are time independent."""

    def __init__(self, table: SpeciesTable, grid: GridField):
        self.table = table
        self.d, self.n, self.h = grid.d, grid.n, grid.h
        self.R = table.R
        nodes = grid.node_coords()
        self.face_v: list[list[np.ndarray] | None] = []
        max_speed = 0.0
        for r in range(self.R):
            v = table.velocity[r]
            if v.is_zero:
                self.face_v.append(None)
                continue
            per_axis = []
            for a in range(self.d):
                shift = np.zeros(self.d)
                shift[a] = 0.5 * self.h
                va = v(nodes + shift, 0.0)[:, a].reshape((self.n,) * self.d)
                per_axis.append(va)
                max_speed = max(max_speed, float(np.abs(va).max()))
            self.face_v.append(per_axis)
        self.max_speed = max_speed
        self.diff = np.array([0.5 * s * s for s in table.sigma])
        if isinstance(table.rate_spec, ConstantMatrix):
            self.A = np.array([[table.rate(r, q, np.zeros(self.d), 0.0) for q in range(self.R)]
                               for r in range(self.R)])
            self.A_nodes = None
        else:
            self.A = None
            self.A_nodes = np.stack([np.stack([np.asarray(table.rate(r, q, nodes, 0.0))
                                               for q in range(self.R)]) for r in range(self.R)])
        self.e_hat = np.asarray(table.frag.e_hat, dtype=float)

    def check_cfl(self, dt: float) -> None:
        diff = float(self.diff.max()) * dt * 2 * self.d / self.h**2
        if diff > DIFFUSION_CFL * (1 + 1e-12):
            raise CFLViolation(f"diffusion CFL {diff:.4g} > {DIFFUSION_CFL}")
        adv = self.max_speed * dt / self.h
        if adv > ADVECTION_CFL * (1 + 1e-12):
            raise CFLViolation(f"advection CFL {adv:.4g} > {ADVECTION_CFL}")

    def stable_dt(self, safety: float = 0.9) -> float:
        limits = []
        if self.diff.max() > 0:
            limits.append(DIFFUSION_CFL * self.h**2 / (2 * self.d * self.diff.max()))
        if self.max_speed > 0:
            limits.append(ADVECTION_CFL * self.h / self.max_speed)
        return safety * min(limits) if limits else math.inf

    def advect(self, s: np.ndarray, dt: float) -> np.ndarray:
        out = s.copy()
        for r, faces in enumerate(self.face_v):
            if faces is None:
                continue
            for a, v in enumerate(faces):
                ax = a
                right = np.roll(s[r], -1, axis=ax)
                flux = np.maximum(v, 0.0) * s[r] + np.minimum(v, 0.0) * right
                out[r] -= dt / self.h * (flux - np.roll(flux, 1, axis=ax))
        return out

    def diffuse(self, s: np.ndarray, dt: float) -> np.ndarray:
        out = s.copy()
        for r in range(self.R):
            if self.diff[r] == 0:
                continue
            lap = -2.0 * self.d * s[r]
            for a in range(self.d):
                lap = lap + np.roll(s[r], 1, axis=a) + np.roll(s[r], -1, axis=a)
            out[r] += dt * self.diff[r] / self.h**2 * lap
        return out

    def reaction_rhs(self, s: np.ndarray) -> np.ndarray:
        flat = s.reshape(self.R, -1)
        if self.A is not None:
            loss = flat * (self.A @ flat)
            gain = 0.5 * np.einsum("ql,qlr,qm,lm->rm", self.A, self.e_hat, flat, flat, optimize=True)
        else:
            A = self.A_nodes
            loss = flat * np.einsum("rqm,qm->rm", A, flat)
            gain = 0.5 * np.einsum("qlm,qlr,qm,lm->rm", A, self.e_hat, flat, flat, optimize=True)
        return (gain - loss).reshape(s.shape)

    def react(self, s: np.ndarray, dt: float, scheme: str) -> np.ndarray:
        if self.A is not None and not np.any(self.A):
            return s.copy()
        f = self.reaction_rhs
        if scheme == "euler":
            return s + dt * f(s)
        k1 = f(s)
        k2 = f(s + 0.5 * dt * k1)
        k3 = f(s + 0.5 * dt * k2)
        k4 = f(s + dt * k3)
        return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _clip(values: np.ndarray, masses: np.ndarray, cell_volume: float,
          diag: PdeDiagnostics | None) -> np.ndarray:
    neg = values < 0
    if not neg.any():
        return values
    deficit = np.where(neg, -values, 0.0).reshape(values.shape[0], -1).sum(axis=1)
    lost = float(masses.astype(float) @ deficit) * cell_volume
    values = np.where(neg, 0.0, values)
    if diag is not None:
        diag.clipped_mass += lost
        diag.clip_steps += 1
        if diag.clipped_mass > CLIP_ABORT_MASS:
            raise NegativityError(
                f"negativity clipping removed {diag.clipped_mass:.3g} mass (limit {CLIP_ABORT_MASS})"
            )
    return values


def pde_step(fields: GridField, table: SpeciesTable, dt: float, reaction: str = "rk4",
             diag: PdeDiagnostics | None = None, ops: _Operators | None = None) -> GridField:
    """Advance all species densities by one split step of length ``dt``."""
    ops = ops or _Operators(table, fields)
    ops.check_cfl(dt)
    s = ops.advect(fields.values, dt)
    s = ops.diffuse(s, dt)
    s = ops.react(s, dt, reaction)
    if diag is not None:
        neg = np.minimum(s, 0.0)
        peak = float(np.abs(s).max()) or 1.0
        diag.max_clip_rel = max(diag.max_clip_rel, float(-neg.min()) / peak)
        diag.steps += 1
    s = _clip(s, table.mass_array, fields.cell_volume, diag)
    return fields.like(s)


@dataclass
class PdeTrajectory:
    times: list[float]
    fields: list[GridField]
    diagnostics: PdeDiagnostics = field(default_factory=PdeDiagnostics)

    def at(self, t: float, tol: float = 1e-9) -> GridField:
        for ti, f in zip(self.times, self.fields):
            if abs(ti - t) <= tol:
                return f
        raise KeyError(f"no PDE snapshot at t={t}")


def solve(fields0: GridField, table: SpeciesTable, cfg: PdeConfig,
          snapshot_times: Sequence[float] = ()) -> PdeTrajectory:
    """Integrate to ``cfg.t_end``, capturing fields at ``snapshot_times``.

    Each interval between consecutive snapshots is split into equal steps no
    longer than ``cfg.dt`` (or the CFL-limited step if ``cfg.dt`` is None).
    """
    times = sorted(set(float(t) for t in snapshot_times))
    if times and (times[0] < 0 or times[-1] > cfg.t_end + 1e-12):
        raise ValueError("snapshot times must lie in [0, t_end]")
    ops = _Operators(table, fields0)
    dt_max = cfg.dt if cfg.dt is not None else ops.stable_dt(cfg.safety)
    if not math.isfinite(dt_max):
        dt_max = max(cfg.t_end, 1.0) / 1000
    ops.check_cfl(dt_max)
    diag = PdeDiagnostics()
    traj = PdeTrajectory([], [], diag)
    cur, t = fields0.copy(), 0.0
    stops = times + ([cfg.t_end] if not times or times[-1] < cfg.t_end else [])
    for stop in stops:
        span = stop - t
        if span > 1e-14:
            k = max(1, math.ceil(span / dt_max - 1e-9))
            h = span / k
            for _ in range(k):
                cur = pde_step(cur, table, h, cfg.reaction, diag, ops)
        t = stop
        if times and any(abs(stop - ts) <= 1e-12 for ts in times):
            traj.times.append(stop)
            traj.fields.append(cur.copy())
    if diag.clip_steps:
        log.warning("PDE clipped negative values in %d steps (mass %.3g)", diag.clip_steps, diag.clipped_mass)
    return traj


def stable_dt(table: SpeciesTable, grid: GridField, safety: float = 0.9) -> float:
    return _Operators(table, grid).stable_dt(safety)


def mass_functional(fields: GridField, table: SpeciesTable) -> float:
    return float(table.mass_array.astype(float) @ fields.integrals())


# ---------------------------------------------------------------------------
# homogeneous oracle


def ode_oracle(table: SpeciesTable, s0: Sequence[float], t_end: float, dt: float = 1e-4,
               times: Sequence[float] | None = None, x=None):
    """Classic RK4 for the spatially homogeneous reaction system.

    Written with explicit index loops so it shares no code with the grid
    solver. Returns the densities at ``t_end``, or an array of shape
    ``(len(times), R)`` when ``times`` is given.
    """
    R = table.R
    x = np.zeros(table.d) if x is None else np.asarray(x, dtype=float)
    a = [[float(table.rate(r, q, x, 0.0)) for q in range(R)] for r in range(R)]
    e = table.frag.e
    eh = [[[int(e[q][l][r] + e[l][q][r]) for r in range(R)] for l in range(R)] for q in range(R)]

    def rhs(s):
        out = []
        for r in range(R):
            loss = s[r] * sum(a[r][q] * s[q] for q in range(R))
            gain = 0.0
            for q in range(R):
                for l in range(R):
                    gain += a[q][l] * eh[q][l][r] * s[q] * s[l]
            out.append(0.5 * gain - loss)
        return out

    def advance(s, span):
        n = max(1, math.ceil(span / dt - 1e-9)) if span > 0 else 0
        h = span / n if n else 0.0
        for _ in range(n):
            k1 = rhs(s)
            k2 = rhs([s[i] + 0.5 * h * k1[i] for i in range(R)])
            k3 = rhs([s[i] + 0.5 * h * k2[i] for i in range(R)])
            k4 = rhs([s[i] + h * k3[i] for i in range(R)])
            s = [s[i] + h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(R)]
        return s

    s = [float(v) for v in s0]
    if times is None:
        return np.array(advance(s, t_end))
    out, t = [], 0.0
    for ti in times:
        s = advance(s, ti - t)
        t = ti
        out.append(list(s))
    return np.array(out)
