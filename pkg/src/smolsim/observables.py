"""Quantities compared between particle snapshots and macroscopic densities.

Empirical measures carry weight ``1/N`` per particle. All L2 norms and
pairings with grid fields are rectangle-rule quadratures on the torus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import GridField
from .kernels import Kernel, convolve_grid, smooth_to_grid
from .material import SpeciesTable
from .particles import ParticleState

MIN_REPLICAS = 30


def pairing(state: ParticleState, f: Callable[[np.ndarray], np.ndarray], r: int) -> float:
    """``<S_{N,r}, f> = (1/N) sum_k f(X_k)``."""
    pos = state.positions[r]
    if pos.shape[0] == 0:
        return 0.0
    return float(np.sum(f(pos)) / state.N)


def empirical_mass(state: ParticleState) -> np.ndarray:
    """``<S_{N,r}, 1> = N_r / N`` per species."""
    return state.counts / state.N


def grid_pairing(fields: GridField, values: np.ndarray) -> np.ndarray:
    """``<s_r, f>`` for every species, with ``f`` sampled at the nodes."""
    flat = fields.values.reshape(fields.R, -1)
    return flat @ np.asarray(values).reshape(-1) * fields.cell_volume


def smoothed_densities(state: ParticleState, kernel_hat: Kernel, grid: GridField) -> GridField:
    return smooth_to_grid(state.positions, state.N, kernel_hat, grid)


def l2_distance_sq(state: ParticleState, pde_field: GridField, kernel_hat: Kernel,
                   h: GridField | None = None) -> np.ndarray:
    """Per-species ``||h_{N,r} - s_r||_2^2`` on the PDE grid."""
    h = h if h is not None else smoothed_densities(state, kernel_hat, pde_field)
    diff = (h.values - pde_field.values).reshape(pde_field.R, -1)
    return np.einsum("rm,rm->r", diff, diff) * pde_field.cell_volume


def l2_decomposition(h: GridField, s: GridField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(||h||^2, <h, s>, ||s||^2)`` per species."""
    hv = h.values.reshape(h.R, -1)
    sv = s.values.reshape(s.R, -1)
    w = s.cell_volume
    return (np.einsum("rm,rm->r", hv, hv) * w, np.einsum("rm,rm->r", hv, sv) * w,
            np.einsum("rm,rm->r", sv, sv) * w)


# ---------------------------------------------------------------------------
# test-function dictionary


class TestFunction:
    """Scaled smooth periodic function with an analytic gradient."""

    __test__ = False  # not a pytest class

    name: str
    scale: float = 1.0

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.scale * self.value(np.atleast_2d(x))


class FourierMode(TestFunction):
    def __init__(self, k, L: float, kind: str, name: str):
        if kind not in ("cos", "sin"):
            raise ValueError(f"unknown mode kind {kind!r}")
        self.w = 2 * math.pi * np.asarray(k, dtype=float) / L
        self.kind, self.name, self.scale = kind, name, 1.0

    def value(self, x):
        ph = x @ self.w
        return np.cos(ph) if self.kind == "cos" else np.sin(ph)

    def grad(self, x):
        ph = x @ self.w
        g = -np.sin(ph) if self.kind == "cos" else np.cos(ph)
        return g[:, None] * self.w[None, :]


class Bump(TestFunction):
    """Gaussian of height one; the periodic seam error is negligible for width << L."""

    def __init__(self, center, width: float, L: float, name: str):
        self.center = np.asarray(center, dtype=float)
        self.width, self.L, self.name, self.scale = width, L, name, 1.0

    def _disp(self, x):
        dx = x - self.center
        return dx - self.L * np.round(dx / self.L)

    def value(self, x):
        dx = self._disp(x)
        return np.exp(-0.5 * np.sum(dx * dx, axis=-1) / self.width**2)

    def grad(self, x):
        dx = self._disp(x)
        return -dx / self.width**2 * self.value(x)[:, None]


class TestDictionary:
    """Finite family of test functions with ``||f||_inf + ||grad f||_inf + ||f||_2 <= 1``.

    Defaults: cosine and sine modes with wavenumbers 1..4 along each axis and
    8 Gaussian bumps per axis. Norms are measured on a fine grid at
    construction and each member is scaled to combined norm 1. Sup-norms
    taken on a grid slightly underestimate the true sup; the bound is checked
    with the same grid, so the scaling is exact up to that sampling.
    """

    __test__ = False  # not a pytest class

    def __init__(self, d: int, L: float, modes: int = 4, bumps: int = 8,
                 bump_width: float | None = None, check_n: int | None = None):
        self.d, self.L = d, L
        self.members: list[TestFunction] = []
        width = bump_width if bump_width is not None else L / (2 * max(bumps, 1))
        for a in range(d):
            for k in range(1, modes + 1):
                vec = np.zeros(d)
                vec[a] = k
                for kind in ("cos", "sin"):
                    self.members.append(FourierMode(vec, L, kind, f"{kind}{k}_ax{a + 1}"))
        centers_1d = (np.arange(bumps) + 0.5) * L / bumps
        if d == 1:
            centers = centers_1d[:, None]
        else:
            # bumps placed along the main diagonal keep the count at `bumps` per axis
            centers = np.stack([centers_1d] * d, axis=-1)
        for i, c in enumerate(centers):
            self.members.append(Bump(c, width, L, f"bump{i + 1}"))
        self.check_n = check_n or (512 if d == 1 else 96 if d == 2 else 32)
        self._raw_norms = [self._norms(m) for m in self.members]
        for m, norms in zip(self.members, self._raw_norms):
            m.scale = 1.0 / sum(norms)

    def _norms(self, m: TestFunction) -> tuple[float, float, float]:
        n = self.check_n
        ax = np.arange(n) * self.L / n
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        x = np.stack([c.ravel() for c in mesh], axis=-1)
        v = m.value(x)
        g = m.grad(x)
        sup = float(np.abs(v).max())
        gsup = float(np.sqrt(np.sum(g * g, axis=-1)).max())
        l2 = float(np.sqrt(np.sum(v * v) * (self.L / n) ** self.d))
        return sup, gsup, l2

    def combined_norm(self, i: int) -> float:
        """Combined norm of the scaled member, re-measured on the check grid."""
        m = self.members[i]
        return m.scale * sum(self._norms(m))

    def l2_norm(self, i: int) -> float:
        return self.members[i].scale * self._raw_norms[i][2]

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


@dataclass
class MetricEstimate:
    """Lower bound of the metric D per species, from a finite dictionary."""

    values: np.ndarray
    argmax: list[str]
    lower_bound: bool = True


def metric_D(state: ParticleState, pde_field: GridField, dictionary: TestDictionary) -> MetricEstimate:
    """``max_f |<S_{N,r} - s_r, f>|`` over the dictionary (a lower bound of D)."""
    if len(dictionary) == 0:
        raise ValueError("test dictionary is empty")
    nodes = pde_field.node_coords()
    best = np.zeros(state.R)
    names = [""] * state.R
    for f in dictionary:
        grid_vals = grid_pairing(pde_field, f(nodes))
        for r in range(state.R):
            diff = abs(pairing(state, f, r) - grid_vals[r])
            if diff > best[r] or not names[r]:
                best[r], names[r] = diff, f.name
    return MetricEstimate(best, names)


def metric_D_empirical(a: ParticleState, b: ParticleState, dictionary: TestDictionary) -> MetricEstimate:
    """Dictionary lower bound of D between two empirical measures."""
    if len(dictionary) == 0:
        raise ValueError("test dictionary is empty")
    best = np.zeros(a.R)
    names = [""] * a.R
    for f in dictionary:
        for r in range(a.R):
            diff = abs(pairing(a, f, r) - pairing(b, f, r))
            if diff > best[r] or not names[r]:
                best[r], names[r] = diff, f.name
    return MetricEstimate(best, names)


def metric_member_bounds(state: ParticleState, pde_field: GridField, kernel_hat: Kernel,
                            dictionary: TestDictionary, h: GridField | None = None):
    """Per-member check of ``|<S-s,f>| <= <S,1> ||f - f*W||_inf + ||f||_2 ||d||_2``.

    Returns arrays ``(lhs, rhs)`` of shape ``(len(dictionary), R)``.
    """
    nodes = pde_field.node_coords()
    d2 = l2_distance_sq(state, pde_field, kernel_hat, h)
    mass = empirical_mass(state)
    lhs = np.zeros((len(dictionary), state.R))
    rhs = np.zeros_like(lhs)
    for i, f in enumerate(dictionary):
        fv = f(nodes).reshape((pde_field.n,) * pde_field.d)
        probe = GridField(pde_field.d, pde_field.n, pde_field.L, fv[None])
        smooth_err = float(np.abs(fv - convolve_grid(probe, kernel_hat).values[0]).max())
        grid_vals = grid_pairing(pde_field, fv)
        for r in range(state.R):
            lhs[i, r] = abs(pairing(state, f, r) - grid_vals[r])
            rhs[i, r] = mass[r] * smooth_err + dictionary.l2_norm(i) * math.sqrt(d2[r])
    return lhs, rhs


# ---------------------------------------------------------------------------
# conservation bookkeeping


@dataclass
class MassReport:
    N: int
    total_atoms: int
    counts: list[int]
    species_mass: list[int]
    mass_ok: bool
    count_bound_ok: bool

    @property
    def ok(self) -> bool:
        return self.mass_ok and self.count_bound_ok


def mass_report(state: ParticleState, table: SpeciesTable) -> MassReport:
    counts = state.counts
    per = counts * table.mass_array
    total = int(per.sum())
    return MassReport(
        N=state.N,
        total_atoms=total,
        counts=[int(c) for c in counts],
        species_mass=[int(p) for p in per],
        mass_ok=total == state.N,
        count_bound_ok=int(counts.sum()) <= state.N,
    )


# ---------------------------------------------------------------------------
# fluctuations


@dataclass
class FluctuationResult:
    N: int
    replicas: int
    mean: float
    variance: float


def fluctuation_probe(snapshots: Sequence[ParticleState], f: Callable[[np.ndarray], np.ndarray],
                      r: int = 0) -> FluctuationResult:
    """Sample variance of ``<S_{N,r}(t), f>`` across independent replicas."""
    if len(snapshots) < MIN_REPLICAS:
        raise ValueError(f"fluctuation probe needs >= {MIN_REPLICAS} replicas, got {len(snapshots)}")
    vals = np.array([pairing(s, f, r) for s in snapshots])
    return FluctuationResult(snapshots[0].N, len(vals), float(vals.mean()), float(vals.var(ddof=1)))


def variance_ratios(results: Sequence[FluctuationResult]) -> list[float]:
    """``var(N_i) / var(N_{i+1})`` along an increasing N sequence."""
    out = []
    for a, b in zip(results, results[1:]):
        out.append(a.variance / b.variance if b.variance > 0 else math.inf)
    return out


# ---------------------------------------------------------------------------
# records


@dataclass
class DistanceRecord:
    t: float
    d2: np.ndarray
    D: np.ndarray
    species_mass: list[int]
    total_atoms: int
    clip_fraction: float
    extra: dict = field(default_factory=dict)

    @property
    def d2_total(self) -> float:
        return float(np.sum(self.d2))

    @property
    def D_total(self) -> float:
        return float(np.sum(self.D))


def distance_record(state: ParticleState, pde_field: GridField, kernel_hat: Kernel,
                    dictionary: TestDictionary, table: SpeciesTable) -> DistanceRecord:
    h = smoothed_densities(state, kernel_hat, pde_field)
    d2 = l2_distance_sq(state, pde_field, kernel_hat, h)
    D = metric_D(state, pde_field, dictionary).values
    rep = mass_report(state, table)
    return DistanceRecord(state.t, d2, D, rep.species_mass, rep.total_atoms, state.clip_fraction)
