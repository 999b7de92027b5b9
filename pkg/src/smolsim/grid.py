"""Uniform periodic grids holding per-species densities."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class GridField:
    """Node values on a periodic box ``[0, L)^d`` with ``n`` nodes per axis.

    Node ``i`` along an axis sits at ``i * L / n``. ``values`` has shape
    ``(R, n, ..., n)`` with one leading axis per species (or per vector
    component, for sampled velocity fields).
    """

    d: int
    n: int
    L: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[1:] != (self.n,) * self.d:
            raise ValueError(
                f"values shape {self.values.shape} does not match d={self.d}, n={self.n}"
            )

    @classmethod
    def zeros(cls, R: int, d: int, n: int, L: float) -> "GridField":
        return cls(d, n, L, np.zeros((R,) + (n,) * d))

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def R(self) -> int:
        return self.values.shape[0]

    def axis(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def node_coords(self) -> np.ndarray:
        """Node positions, shape ``(n**d, d)`` in C order of ``values[r]``."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def integrals(self) -> np.ndarray:
        """Rectangle-rule integral of each component over the torus."""
        return self.values.reshape(self.R, -1).sum(axis=1) * self.cell_volume

    def copy(self) -> "GridField":
        return GridField(self.d, self.n, self.L, self.values.copy())

    def like(self, values: np.ndarray) -> "GridField":
        return GridField(self.d, self.n, self.L, values)

    def interpolate(self, x: np.ndarray) -> np.ndarray:
        """Periodic multilinear interpolation at points ``x`` of shape (m, d).

        Returns shape ``(R, m)``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.mod(x, self.L) / self.h
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        out = np.zeros((self.R, x.shape[0]))
        flat = self.values.reshape(self.R, -1)
        strides = self.n ** np.arange(self.d - 1, -1, -1)
        for corner in range(2**self.d):
            bits = [(corner >> a) & 1 for a in range(self.d)]
            w = np.ones(x.shape[0])
            idx = np.zeros(x.shape[0], dtype=np.int64)
            for a, b in enumerate(bits):
                w *= frac[:, a] if b else 1.0 - frac[:, a]
                idx += ((i0[:, a] + b) % self.n) * strides[a]
            out += flat[:, idx] * w
        return out

    def to_csv(self, path: str | Path, names: list[str] | None = None) -> None:
        """Write node coordinates plus one density column per component."""
        names = names or [f"s{r + 1}" for r in range(self.R)]
        coords = self.node_coords()
        cols = self.values.reshape(self.R, -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{a + 1}" for a in range(self.d)] + names)
            for i in range(coords.shape[0]):
                w.writerow([repr(float(c)) for c in coords[i]] + [repr(float(v)) for v in cols[:, i]])

    @classmethod
    def from_csv(cls, path: str | Path, L: float) -> "GridField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        d = sum(1 for h in header if h.startswith("x"))
        n = round(body.shape[0] ** (1.0 / d))
        values = body[:, d:].T.reshape((-1,) + (n,) * d)
        return cls(d, n, L, values)


def grid_for_resolution(L: float, d: int, alpha: float, min_nodes: int = 16) -> int:
    """Smallest power-of-two node count with spacing <= 1/(4*alpha)."""
    need = 4.0 * alpha * L
    n = min_nodes
    while n < need:
        n *= 2
    return n


def gaussian_bump(d: int, n: int, L: float, center, width: float, mass: float = 1.0) -> np.ndarray:
    """Periodized Gaussian density with total ``mass`` sampled at the nodes."""
    ax = np.arange(n) * (L / n)
    center = np.broadcast_to(np.asarray(center, dtype=float), (d,))
    out = np.ones((n,) * d)
    for a in range(d):
        dx = ax - center[a]
        dx -= L * np.round(dx / L)
        prof = np.exp(-0.5 * (dx / width) ** 2) / (np.sqrt(2 * np.pi) * width)
        shape = [1] * d
        shape[a] = n
        out = out * prof.reshape(shape)
    total = out.sum() * (L / n) ** d
    return out * (mass / total)
