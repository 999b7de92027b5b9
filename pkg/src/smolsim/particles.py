"""Microscopic particle system: drift-diffusion plus effective-field shattering.

Time is discretized on a fixed grid. Each step applies the interaction step
against rates frozen at the start of the step, then moves all particles by
one Euler-Maruyama increment. At most one event fires per particle per step,
so the event probability cap ``dt * R * C_a <= max_event_prob`` bounds the
discretization bias.
"""
from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridField
from .kernels import CellList, Kernel, ScalingParams
from .material import SpeciesTable

log = logging.getLogger(__name__)

DUMP_VERSION = 1


class ConservationError(RuntimeError):
    """Atom count or particle-count bound violated; indicates a bug."""


@dataclass
class ParticleState:
    positions: list[np.ndarray]
    masses: np.ndarray
    N: int
    L: float
    d: int
    t: float = 0.0
    rng: np.random.Generator | None = None
    events: np.ndarray = field(default=None)  # type: ignore[assignment]
    rate_evals: int = 0
    clipped: int = 0

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.int64)
        self.positions = [np.asarray(p, dtype=float).reshape(-1, self.d) for p in self.positions]
        if self.events is None:
            self.events = np.zeros((self.R, self.R), dtype=np.int64)

    @property
    def R(self) -> int:
        return len(self.positions)

    @property
    def counts(self) -> np.ndarray:
        return np.array([p.shape[0] for p in self.positions], dtype=np.int64)

    @property
    def total_atoms(self) -> int:
        return int(self.counts @ self.masses)

    @property
    def clip_fraction(self) -> float:
        return self.clipped / self.rate_evals if self.rate_evals else 0.0

    def snapshot(self) -> "ParticleState":
        """Deep copy without the random stream."""
        snap = copy.copy(self)
        snap.positions = [p.copy() for p in self.positions]
        snap.events = self.events.copy()
        snap.rng = None
        return snap

    def check_invariants(self) -> None:
        total = self.total_atoms
        if total != self.N:
            raise ConservationError(f"atom count {total} != N = {self.N} at t={self.t}")
        if self.counts.sum() > self.N:
            raise ConservationError(f"particle count {self.counts.sum()} exceeds N = {self.N}")


@dataclass(frozen=True)
class StepConfig:
    dt: float
    max_event_prob: float = 0.1
    seed: int | None = None
    method: str = "thinning"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.max_event_prob <= 1:
            raise ValueError("max_event_prob must lie in (0, 1]")
        if self.method not in ("thinning", "full"):
            raise ValueError(f"unknown interaction method {self.method!r}")

    def check(self, table: SpeciesTable) -> None:
        bound = self.dt * table.R * table.C_a
        if bound > self.max_event_prob * (1 + 1e-12):
            raise ValueError(
                f"dt*R*C_a = {bound:.6g} exceeds max_event_prob = {self.max_event_prob}"
            )


def _wrap(x: np.ndarray, L: float) -> np.ndarray:
    x = np.mod(x, L)
    x[x >= L] = 0.0
    return x


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# initial data


def sample_initial_state(table: SpeciesTable, s0: GridField, N: int,
                         scaling: ScalingParams | None = None, seed=None) -> ParticleState:
    """Draw i.i.d. particle positions from the initial densities ``s0``.

    ``s0`` is rescaled so the total mass ``sum_r m_r * int s0_r`` is one; then
    ``N_r = round(N * int s0_r)``. The realized atom count
    ``sum_r m_r N_r`` becomes the state's exact ``N``. Nodal values are
    treated as piecewise constant over the cell centered on each node.
    """
    rng = _as_rng(seed)
    vals = np.asarray(s0.values, dtype=float)
    if np.any(vals < 0):
        raise ValueError("initial densities must be nonnegative")
    if scaling is not None and scaling.d != s0.d:
        raise ValueError("scaling dimension does not match the grid")
    m = table.mass_array
    integrals = s0.integrals()
    mass = float(m @ integrals)
    if mass <= 0:
        raise ValueError("initial densities are identically zero")
    integrals = integrals / mass
    counts = np.floor(N * integrals + 0.5).astype(np.int64)
    positions = []
    for r in range(table.R):
        positions.append(_sample_density(vals[r], s0, int(counts[r]), rng))
    n_eff = int(counts @ m)
    if n_eff != N:
        log.info("rounded initial counts give N' = %d (requested %d)", n_eff, N)
    state = ParticleState(positions, m, n_eff, s0.L, s0.d, 0.0, rng)
    state.check_invariants()
    return state


def _sample_density(dens: np.ndarray, grid: GridField, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    d, n, h = grid.d, grid.n, grid.h
    if count == 0:
        return np.zeros((0, d))
    if d == 1:
        cdf = np.cumsum(dens.ravel())
        cdf /= cdf[-1]
        cell = np.searchsorted(cdf, rng.random(count), side="right")
        cell = np.minimum(cell, n - 1)
        x = (cell + rng.random(count) - 0.5) * h
        return _wrap(x, grid.L).reshape(-1, 1)
    top = dens.max()
    out = []
    have = 0
    while have < count:
        batch = max(64, 2 * (count - have))
        x = rng.random((batch, d)) * grid.L
        node = np.floor(x / h + 0.5).astype(np.int64) % n
        val = dens[tuple(node.T)]
        keep = x[rng.random(batch) * top < val]
        out.append(keep)
        have += keep.shape[0]
    return np.concatenate(out)[:count]


# ---------------------------------------------------------------------------
# dynamics


def sde_step(state: ParticleState, table: SpeciesTable, dt: float) -> None:
    """One Euler-Maruyama increment ``v dt + sigma sqrt(dt) xi`` for every particle."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    rng = state.rng
    for r, pos in enumerate(state.positions):
        if pos.shape[0] == 0:
            continue
        v = table.velocity[r]
        step = np.zeros_like(pos) if v.is_zero else v(pos, state.t) * dt
        sig = table.sigma[r]
        if sig:
            step += sig * math.sqrt(dt) * rng.standard_normal(pos.shape)
        state.positions[r] = _wrap(pos + step, state.L)


class _FrozenCells:
    """Cell lists of the start-of-step configuration, built on demand."""

    def __init__(self, state: ParticleState, kernel: Kernel):
        self.state = state
        self.kernel = kernel
        self._cells: dict[int, CellList] = {}

    def __getitem__(self, q: int) -> CellList:
        if q not in self._cells:
            self._cells[q] = CellList(self.state.positions[q], self.state.L, self.kernel.r_cut)
        return self._cells[q]


def interaction_rate(state: ParticleState, table: SpeciesTable, kernel: Kernel,
                     r: int, k, q: int, cells: _FrozenCells | None = None) -> np.ndarray:
    """Effective-field rate of particles ``k`` (species ``r``) in channel ``q``.

    ``min(C_a, a_rq(X_k, t) * (1/N) sum_{l != k} W_N(X_k - X_l))``. The
    self pair, with all its periodic images, is left out of the sum.
    """
    if kernel.L is None or not math.isclose(kernel.L, state.L):
        raise ValueError("interaction kernel must be periodized on the state's box")
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if k.size == 0 or state.positions[q].shape[0] == 0:
        return np.zeros(k.size)
    cells = cells or _FrozenCells(state, kernel)
    x = state.positions[r][k]
    exclude = k if r == q else None
    field_ = cells[q].kernel_sums(kernel, x, exclude) / state.N
    a = np.broadcast_to(table.rate(r, q, x, state.t), (k.size,))
    raw = np.maximum(a * field_, 0.0)
    state.rate_evals += k.size
    state.clipped += int(np.count_nonzero(raw > table.C_a))
    return np.minimum(raw, table.C_a)


def interaction_step(state: ParticleState, table: SpeciesTable, kernel: Kernel,
                     dt: float, method: str = "thinning",
                     max_event_prob: float = 0.1) -> int:
    """Sample and apply one step of shattering events; returns the event count.

    Per particle, an event fires with probability ``1 - exp(-dt sum_q a_q)``
    in channel ``q`` with probability ``a_q / sum_q a_q``. The ``"full"``
    method evaluates every rate. ``"thinning"`` draws candidate clock ticks
    at the bound ``C_a`` per channel and accepts with ``a_q / C_a``, which
    yields the same law while evaluating rates only at candidates.
    """
    if dt * table.R * table.C_a > max_event_prob * (1 + 1e-12):
        raise ValueError("dt*R*C_a exceeds the event probability cap")
    if table.rates_vanish:
        return 0
    rng = state.rng
    cells = _FrozenCells(state, kernel)
    fired: list[tuple[int, np.ndarray, np.ndarray]] = []
    for r in range(state.R):
        n_r = state.positions[r].shape[0]
        if n_r == 0:
            continue
        if method == "full":
            k, q = _events_full(state, table, kernel, r, dt, cells, rng)
        elif method == "thinning":
            k, q = _events_thinning(state, table, kernel, r, dt, cells, rng)
        else:
            raise ValueError(f"unknown interaction method {method!r}")
        if k.size:
            fired.append((r, k, q))
    _apply_events(state, table, fired)
    state.check_invariants()
    return sum(k.size for _, k, _ in fired)


def _events_full(state, table, kernel, r, dt, cells, rng):
    n_r = state.positions[r].shape[0]
    idx = np.arange(n_r)
    rates = np.stack([interaction_rate(state, table, kernel, r, idx, q, cells)
                      for q in range(table.R)], axis=1)
    total = rates.sum(axis=1)
    u = rng.random(n_r)
    hit = u < -np.expm1(-total * dt)
    k = np.nonzero(hit)[0]
    if k.size == 0:
        return k, k
    cum = np.cumsum(rates[k], axis=1)
    pick = rng.random(k.size) * total[k]
    q = np.minimum((cum <= pick[:, None]).sum(axis=1), table.R - 1)
    return k, q


def _events_thinning(state, table, kernel, r, dt, cells, rng):
    n_r = state.positions[r].shape[0]
    R, C_a = table.R, table.C_a
    ticks = rng.poisson(R * C_a * dt, size=n_r)
    owner = np.repeat(np.arange(n_r), ticks)
    if owner.size == 0:
        return owner, owner
    chan = rng.integers(0, R, size=owner.size)
    u = rng.random(owner.size)
    accept = np.zeros(owner.size, dtype=bool)
    for q in range(R):
        sel = np.nonzero(chan == q)[0]
        if sel.size:
            a = interaction_rate(state, table, kernel, r, owner[sel], q, cells)
            accept[sel] = u[sel] * C_a < a
    acc = np.nonzero(accept)[0]
    if acc.size == 0:
        return acc, acc
    # owner is nondecreasing, so the first accepted tick per particle wins
    first = np.unique(owner[acc], return_index=True)[1]
    return owner[acc][first], chan[acc][first]


def _apply_events(state: ParticleState, table: SpeciesTable, fired) -> None:
    e = table.frag.e
    new_parts: list[list[np.ndarray]] = [[] for _ in range(state.R)]
    removals: dict[int, np.ndarray] = {}
    for r, k, q in fired:
        np.add.at(state.events, (r, q), 1)
        origin = state.positions[r][k]
        removals[r] = k
        for l in range(state.R):
            mult = e[r, q, l]
            if np.any(mult):
                new_parts[l].append(np.repeat(origin, mult, axis=0))
    for r in range(state.R):
        pos = state.positions[r]
        if r in removals:
            keep = np.ones(pos.shape[0], dtype=bool)
            keep[removals[r]] = False
            pos = pos[keep]
        if new_parts[r]:
            pos = np.concatenate([pos] + new_parts[r])
        state.positions[r] = pos


def run(state: ParticleState, table: SpeciesTable, kernel: Kernel, cfg: StepConfig,
        t_end: float, snapshot_times: Sequence[float] = (), callback=None,
        on_step=None) -> list[ParticleState]:
    """Advance to ``t_end`` and return snapshots at the requested times.

    Snapshot times are mapped to the nearest step of the ``dt`` grid. The
    state is modified in place. ``callback(snapshot)`` is invoked for every
    snapshot as it is taken; ``on_step(state)`` after every step (the live
    state, not a copy).
    """
    cfg.check(table)
    times = list(snapshot_times)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshot times must be sorted")
    if times and times[-1] > t_end + 1e-12:
        raise ValueError("snapshot times must not exceed t_end")
    if state.rng is None:
        state.rng = _as_rng(cfg.seed)
    dt = cfg.dt
    t0 = state.t
    n_steps = int(round((t_end - t0) / dt))
    snap_steps = [int(round((t - t0) / dt)) for t in times]
    out: list[ParticleState] = []

    def take():
        snap = state.snapshot()
        out.append(snap)
        if callback is not None:
            callback(snap)

    j = 0
    while j < len(snap_steps) and snap_steps[j] <= 0:
        take()
        j += 1
    for step in range(1, n_steps + 1):
        interaction_step(state, table, kernel, dt, cfg.method, cfg.max_event_prob)
        sde_step(state, table, dt)
        state.t = t0 + step * dt
        if on_step is not None:
            on_step(state)
        while j < len(snap_steps) and snap_steps[j] == step:
            take()
            j += 1
    return out


# ---------------------------------------------------------------------------
# particle dumps


def write_particle_dump(state: ParticleState, path: str | Path) -> None:
    """CSV dump: a ``#`` metadata line, then ``species,x1..xd`` (species 1-based)."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# smolsim-particles v{DUMP_VERSION} t={state.t!r} N={state.N} L={state.L!r} "
                 f"d={state.d} masses={','.join(str(int(m)) for m in state.masses)}\n")
        fh.write("species," + ",".join(f"x{a + 1}" for a in range(state.d)) + "\n")
        for r, pos in enumerate(state.positions):
            for row in pos:
                fh.write(f"{r + 1}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_particle_dump(path: str | Path) -> ParticleState:
    with open(path) as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("# smolsim-particles"):
            raise ValueError(f"{path}: not a particle dump")
        meta = dict(tok.split("=", 1) for tok in meta_line.split()[3:])
        version = int(meta_line.split()[2].lstrip("v"))
        if version != DUMP_VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        fh.readline()
        body = fh.read()
    rows = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2) if body.strip() else np.zeros((0, 0))
    d = int(meta["d"])
    masses = np.array([int(m) for m in meta["masses"].split(",")])
    species = rows[:, 0].astype(int) - 1 if rows.size else np.zeros(0, dtype=int)
    pos = [rows[species == r, 1:].reshape(-1, d) if rows.size else np.zeros((0, d))
           for r in range(masses.size)]
    return ParticleState(pos, masses, int(meta["N"]), float(meta["L"]), d, float(meta["t"]))
