"""Gaussian interaction/smoothing kernels and their convolutions.

The unscaled kernel is the standard Gaussian density. A kernel with scale
``alpha`` evaluates ``alpha**d * W1(alpha * x)`` and is truncated at
``r_cut = 6 / alpha``. On a periodic box the kernel is periodized: every
image of a displacement within the cutoff contributes. When the cutoff is at
most half the box side this is exactly the minimum-image rule.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._validation import ValidationReport
from .grid import GridField

CUTOFF_SIGMAS = 6.0


class GridTooCoarse(ValueError):
    """Grid spacing does not resolve the smoothing kernel."""


@dataclass(frozen=True)
class ScalingParams:
    d: int
    beta: float
    beta_hat: float
    N: int

    @property
    def alpha(self) -> float:
        return self.N ** (self.beta / self.d)

    @property
    def alpha_hat(self) -> float:
        return self.N ** (self.beta_hat / self.d)

    def with_N(self, N: int) -> "ScalingParams":
        return ScalingParams(self.d, self.beta, self.beta_hat, int(N))


def validate_scaling(d: int, beta: float, beta_hat: float) -> ValidationReport:
    """Admissible exponents: 0 < beta_hat < d/(d+2) and 0 < beta < beta_hat/(d+1)."""
    rep = ValidationReport()
    if d not in (1, 2, 3):
        rep.add(f"dimension d={d} not in {{1, 2, 3}}")
        return rep
    if not 0 < beta_hat < d / (d + 2):
        rep.add(f"beta_hat={beta_hat} outside (0, {d / (d + 2):.6g})")
    if not 0 < beta < beta_hat / (d + 1):
        rep.add(f"beta={beta} outside (0, beta_hat/(d+1) = {beta_hat / (d + 1):.6g})")
    return rep


@dataclass(frozen=True)
class Kernel:
    """Scaled, truncated Gaussian on ``R^d`` (``L=None``) or on the torus.

    ``norm_factor`` exists only as a fault-injection hook for the regression
    suite; physical kernels keep it at 1.
    """

    d: int
    alpha: float
    L: float | None = None
    norm_factor: float = 1.0

    @property
    def r_cut(self) -> float:
        return CUTOFF_SIGMAS / self.alpha

    @property
    def peak(self) -> float:
        return self.norm_factor * self.alpha**self.d * (2 * math.pi) ** (-self.d / 2)

    def image_shifts(self) -> np.ndarray:
        """Lattice translations that can bring a minimum image within cutoff."""
        if self.L is None:
            return np.zeros((1, self.d))
        m = int(math.floor(self.r_cut / self.L + 0.5))
        rng = range(-m, m + 1)
        return self.L * np.array(list(itertools.product(rng, repeat=self.d)), dtype=float)

    def radial(self, r2: np.ndarray) -> np.ndarray:
        """Kernel value as a function of squared distance."""
        r2 = np.asarray(r2, dtype=float)
        out = np.array(np.exp(r2 * (-0.5 * self.alpha**2)))
        out[r2 > self.r_cut**2] = 0.0
        out *= self.peak
        return out

    @functools.cached_property
    def self_value(self) -> float:
        """Periodized kernel at zero displacement, including all images."""
        return float(self(np.zeros(self.d)))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if self.L is None:
            return self.radial(np.sum(x * x, axis=-1))
        x = x - self.L * np.round(x / self.L)
        out = np.zeros(x.shape[:-1])
        for shift in self.image_shifts():
            y = x + shift
            out += self.radial(np.sum(y * y, axis=-1))
        return out


def kernel_eval(k: Kernel, x) -> np.ndarray | float:
    val = k(x)
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# empirical convolutions


def _sq_dists(kernel: Kernel, q: np.ndarray, p: np.ndarray):
    """Yield squared distance matrices, one per contributing image shift."""
    shifts = kernel.image_shifts()
    if kernel.d == 1:
        diff = q[:, 0, None] - p[None, :, 0]
        if kernel.L is not None:
            diff -= kernel.L * np.round(diff / kernel.L)
        for shift in shifts[:, 0]:
            y = diff + shift if shift else diff
            yield y * y
        return
    diff = q[:, None, :] - p[None, :, :]
    if kernel.L is not None:
        diff -= kernel.L * np.round(diff / kernel.L)
    for shift in shifts:
        y = diff + shift if np.any(shift) else diff
        yield np.einsum("ijk,ijk->ij", y, y)


def _pair_sum(kernel: Kernel, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row sums of the kernel matrix between queries ``q`` and points ``p``."""
    out = np.zeros(q.shape[0])
    if p.shape[0] == 0 or q.shape[0] == 0:
        return out
    for r2 in _sq_dists(kernel, q, p):
        out += kernel.radial(r2).sum(axis=1)
    return out


def _pair_sum_excluding(kernel: Kernel, q: np.ndarray, p: np.ndarray,
                        q_ids: np.ndarray, p_ids: np.ndarray) -> np.ndarray:
    out = np.zeros(q.shape[0])
    if p.shape[0] == 0 or q.shape[0] == 0:
        return out
    # zeroed rather than subtracted: subtraction cancels when the self term dominates
    skip = q_ids[:, None] == p_ids[None, :]
    for r2 in _sq_dists(kernel, q, p):
        w = kernel.radial(r2)
        w[skip] = 0.0
        out += w.sum(axis=1)
    return out


class CellList:
    """Spatial binning of points on the torus with cell side >= ``r_cut``.

    With fewer than three cells per axis every query scans all points, which
    is the only correct choice once the cutoff reaches a third of the box.
    """

    def __init__(self, points: np.ndarray, L: float, r_cut: float):
        self.points = np.asarray(points, dtype=float).reshape(-1, points.shape[-1] if np.ndim(points) > 1 else 1)
        self.d = self.points.shape[1]
        self.L = L
        self.ncell = max(1, int(math.floor(L / r_cut)))
        self.degenerate = self.ncell < 3
        if self.degenerate:
            return
        self.cell_side = L / self.ncell
        ids = self.cell_ids(self.points)
        self.order = np.argsort(ids, kind="stable")
        sorted_ids = ids[self.order]
        ncells = self.ncell**self.d
        self.starts = np.searchsorted(sorted_ids, np.arange(ncells + 1))
        offs = list(itertools.product((-1, 0, 1), repeat=self.d))
        self.offsets = np.array(offs, dtype=np.int64)

    def cell_coords(self, x: np.ndarray) -> np.ndarray:
        c = np.floor(np.mod(x, self.L) / self.cell_side).astype(np.int64)
        return np.minimum(c, self.ncell - 1)

    def cell_ids(self, x: np.ndarray) -> np.ndarray:
        c = self.cell_coords(x)
        ids = np.zeros(c.shape[0], dtype=np.int64)
        for a in range(self.d):
            ids = ids * self.ncell + c[:, a]
        return ids

    def neighbors(self, cell: np.ndarray) -> np.ndarray:
        """Indices of all points in the 3^d cells around integer ``cell``."""
        nb = np.mod(cell[None, :] + self.offsets, self.ncell)
        ids = np.zeros(nb.shape[0], dtype=np.int64)
        for a in range(self.d):
            ids = ids * self.ncell + nb[:, a]
        ids = np.unique(ids)
        chunks = [self.order[self.starts[i]:self.starts[i + 1]] for i in ids]
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)

    def kernel_sums(self, kernel: Kernel, queries: np.ndarray,
                    exclude: np.ndarray | None = None) -> np.ndarray:
        """``sum_l W(query - X_l)``, skipping point ``exclude[i]`` for query ``i``."""
        queries = np.asarray(queries, dtype=float).reshape(-1, self.d)
        if self.degenerate:
            if exclude is None:
                return _pair_sum(kernel, queries, self.points)
            return _pair_sum_excluding(kernel, queries, self.points, exclude,
                                       np.arange(self.points.shape[0]))
        nq = queries.shape[0]
        out = np.zeros(nq)
        if nq == 0 or self.points.shape[0] == 0:
            return out
        qcells = self.cell_coords(queries)
        densest = int(np.diff(self.starts).max())
        chunk = max(1, 2_000_000 // max(1, densest * self.offsets.shape[0]))
        for s in range(0, nq, chunk):
            sl = slice(s, s + chunk)
            ex = None if exclude is None else exclude[sl]
            out[sl] = self._chunk_sums(kernel, queries[sl], qcells[sl], ex)
        return out

    def _chunk_sums(self, kernel, q, qcells, exclude):
        nq = q.shape[0]
        out = np.zeros(nq)
        L = self.L
        for off in self.offsets:
            nb = np.mod(qcells + off, self.ncell)
            ids = np.zeros(nq, dtype=np.int64)
            for a in range(self.d):
                ids = ids * self.ncell + nb[:, a]
            lo, hi = self.starts[ids], self.starts[ids + 1]
            cnt = hi - lo
            total = int(cnt.sum())
            if total == 0:
                continue
            qi = np.repeat(np.arange(nq), cnt)
            first = np.cumsum(cnt) - cnt
            pj = self.order[np.arange(total) - np.repeat(first - lo, cnt)]
            diff = q[qi] - self.points[pj]
            diff -= L * np.round(diff / L)
            w = kernel.radial(np.einsum("ij,ij->i", diff, diff))
            if exclude is not None:
                w[pj == exclude[qi]] = 0.0
            out += np.bincount(qi, weights=w, minlength=nq)
        return out


def convolve_empirical(positions: np.ndarray, N: int, kernel: Kernel, queries,
                       exclude: np.ndarray | None = None, method: str = "cells",
                       cells: CellList | None = None) -> np.ndarray:
    """``(1/N) * sum_l W(query - X_l)`` at each query point.

    ``exclude[i]`` names a point index left out of the sum for query ``i``
    (self-exclusion); ``-1`` excludes nothing. ``method`` is ``"cells"`` or
    the brute-force ``"naive"`` reference.
    """
    d = kernel.d
    positions = np.asarray(positions, dtype=float).reshape(-1, d)
    queries = np.asarray(queries, dtype=float).reshape(-1, d)
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64).reshape(-1)
    if positions.shape[0] == 0:
        return np.zeros(queries.shape[0])
    if method == "naive":
        out = np.zeros(queries.shape[0])
        step = max(1, 2_000_000 // max(1, positions.shape[0] * kernel.image_shifts().shape[0]))
        ids = np.arange(positions.shape[0])
        for s in range(0, queries.shape[0], step):
            sl = slice(s, s + step)
            if exclude is None:
                out[sl] = _pair_sum(kernel, queries[sl], positions)
            else:
                out[sl] = _pair_sum_excluding(kernel, queries[sl], positions, exclude[sl], ids)
        return out / N
    if method != "cells":
        raise ValueError(f"unknown method {method!r}")
    if kernel.L is None:
        raise ValueError("cell lists need a periodic kernel")
    if cells is None:
        cells = CellList(positions, kernel.L, kernel.r_cut)
    return cells.kernel_sums(kernel, queries, exclude) / N


# ---------------------------------------------------------------------------
# grid smoothing


def check_resolution(grid_h: float, alpha: float) -> None:
    if grid_h > 0.25 / alpha * (1 + 1e-12):
        raise GridTooCoarse(
            f"grid spacing {grid_h:.6g} exceeds kernel resolution limit 1/(4*alpha) = {0.25 / alpha:.6g}"
        )


def smooth_to_grid(positions: Sequence[np.ndarray], N: int, kernel: Kernel,
                   grid: GridField) -> GridField:
    """Kernel-smoothed empirical densities ``(1/N) sum_k W(x - X_k)`` at grid nodes.

    ``grid`` only supplies the geometry; one output component per entry of
    ``positions``.
    """
    if kernel.L is None or not math.isclose(kernel.L, grid.L):
        raise ValueError("kernel must be periodized on the grid's box")
    check_resolution(grid.h, kernel.alpha)
    d, n, h = grid.d, grid.n, grid.h
    out = np.zeros((len(positions),) + (n,) * d)
    m = int(math.ceil(kernel.r_cut / h)) + 1
    offs = np.arange(-m, m + 1)
    rc2 = kernel.r_cut**2
    a2 = kernel.alpha**2
    chunk = max(1, 4_000_000 // (offs.size**d))
    for r, pos in enumerate(positions):
        pos = np.asarray(pos, dtype=float).reshape(-1, d)
        flat = out[r].reshape(-1)
        for s in range(0, pos.shape[0], chunk):
            p = pos[s:s + chunk]
            base = np.floor(p / h).astype(np.int64)
            # per-axis displacement node - particle, unwrapped
            disp = (base[:, :, None] + offs[None, None, :]) * h - p[:, :, None]
            idx = np.mod(base[:, :, None] + offs[None, None, :], n)
            r2 = disp[:, 0, :] ** 2
            lin = idx[:, 0, :]
            for a in range(1, d):
                r2 = r2[..., None] + (disp[:, a, :] ** 2).reshape((p.shape[0],) + (1,) * a + (offs.size,))
                lin = lin[..., None] * n + idx[:, a, :].reshape((p.shape[0],) + (1,) * a + (offs.size,))
            w = np.where(r2 <= rc2, np.exp(-0.5 * a2 * r2), 0.0)
            flat += np.bincount(lin.ravel(), weights=w.ravel(), minlength=n**d)
    out *= kernel.peak / N
    return grid.like(out)


# ---------------------------------------------------------------------------
# approximation property of the kernel family


@dataclass
class DecayFit:
    alphas: np.ndarray
    norms_sq: np.ndarray
    slope: float
    exact_zero: bool = False


def convolve_grid(field: GridField, kernel: Kernel) -> GridField:
    """Circular convolution of grid values with the periodized kernel."""
    disp = field.node_coords()
    ker = kernel(disp).reshape((field.n,) * field.d) * field.cell_volume
    axes = tuple(range(1, field.d + 1))
    kf = np.fft.rfftn(ker)
    res = np.fft.irfftn(np.fft.rfftn(field.values, axes=axes) * kf, s=(field.n,) * field.d, axes=axes)
    return field.like(res)


def kernel_approx_decay(f: GridField, alphas: Sequence[float], norm_factor: float = 1.0) -> DecayFit:
    """Fit the log-log slope of ``||f - f * W_alpha||_2^2`` against ``alpha``.

    ``norm_factor`` is forwarded to the kernels (fault injection only).
    """
    alphas = np.asarray(sorted(alphas), dtype=float)
    if alphas.size < 3:
        raise ValueError("need at least three alpha values for a decay fit")
    check_resolution(f.h, alphas.max())
    ref = float(np.sum(f.values**2) * f.cell_volume)
    norms = []
    for a in alphas:
        diff = f.values - convolve_grid(f, Kernel(f.d, a, f.L, norm_factor)).values
        norms.append(float(np.sum(diff**2) * f.cell_volume))
    norms = np.asarray(norms)
    # truncation leaves ~1e-9 relative residue on constants; treat as zero
    if ref == 0.0 or np.all(norms <= 1e-14 * ref):
        return DecayFit(alphas, np.zeros_like(norms), float("nan"), exact_zero=True)
    slope = float(np.polyfit(np.log(alphas), np.log(norms), 1)[0])
    return DecayFit(alphas, norms, slope)
