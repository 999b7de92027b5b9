"""Model coefficients: species, velocity fields, collision rates, fragmentation.

Species are indexed from 0 in the Python API. Configuration files use the
1-based indices customary in the literature and are converted on load.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ._validation import ValidationReport
from .grid import GridField

# ---------------------------------------------------------------------------
# velocity fields


class VelocityField:
    """Bounded drift field ``v(x, t)``; call with positions of shape (m, d)."""

    d: int

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    def validate(self, d: int) -> ValidationReport:
        rep = ValidationReport()
        if self.d != d:
            rep.add(f"velocity dimension {self.d} != {d}")
        return rep

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroVelocity(VelocityField):
    d: int

    def __call__(self, x, t):
        return np.zeros((np.atleast_2d(x).shape[0], self.d))

    @property
    def is_zero(self) -> bool:
        return True

    def to_dict(self):
        return {"kind": "zero"}


@dataclass(frozen=True)
class ConstantVelocity(VelocityField):
    vector: tuple[float, ...]

    @property
    def d(self) -> int:  # type: ignore[override]
        return len(self.vector)

    def __call__(self, x, t):
        m = np.atleast_2d(x).shape[0]
        return np.broadcast_to(np.asarray(self.vector, dtype=float), (m, self.d)).copy()

    @property
    def is_zero(self) -> bool:
        return not any(self.vector)

    def to_dict(self):
        return {"kind": "constant", "vector": list(self.vector)}


@dataclass(frozen=True)
class RotationalVelocity(VelocityField):
    """Rigid rotation about ``center`` (d=2 only).

    The displacement from the center uses the minimum image, so the field is
    bounded on the torus but not smooth across the seam opposite the center.
    """

    center: tuple[float, float]
    omega: float
    L: float
    d: int = 2

    def __call__(self, x, t):
        x = np.atleast_2d(x)
        dx = x - np.asarray(self.center)
        dx -= self.L * np.round(dx / self.L)
        return self.omega * np.stack([-dx[:, 1], dx[:, 0]], axis=-1)

    def validate(self, d):
        rep = super().validate(d)
        if d != 2:
            rep.add("rotational velocity requires d=2")
        return rep

    def to_dict(self):
        return {"kind": "rotational", "center": list(self.center), "omega": self.omega}


@dataclass
class GridSampledVelocity(VelocityField):
    """Velocity sampled on a grid (components on the leading axis)."""

    grid: GridField

    @property
    def d(self) -> int:  # type: ignore[override]
        return self.grid.d

    def __call__(self, x, t):
        return self.grid.interpolate(x).T

    def validate(self, d):
        rep = super().validate(d)
        if self.grid.R != self.grid.d:
            rep.add("sampled velocity needs one component per axis")
        if not np.all(np.isfinite(self.grid.values)):
            rep.add("sampled velocity has non-finite values")
        return rep

    def to_dict(self):
        return {"kind": "grid", "n": self.grid.n, "values": self.grid.values.tolist()}


# ---------------------------------------------------------------------------
# collision rates


@dataclass(frozen=True)
class SpeedLaw:
    """Relative-speed dependence ``g(s)`` of the cross-section rate."""

    kind: str = "constant"
    c0: float = 1.0
    c1: float = 0.0
    table_s: tuple[float, ...] = ()
    table_g: tuple[float, ...] = ()

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "constant":
            return np.full_like(s, self.c0)
        if self.kind == "linear":
            return self.c0 + self.c1 * s
        if self.kind == "table":
            return np.interp(s, self.table_s, self.table_g)
        raise ValueError(f"unknown speed law {self.kind!r}")

    def validate(self) -> ValidationReport:
        rep = ValidationReport()
        if self.kind == "constant":
            if self.c0 < 0:
                rep.add("speed law constant must be >= 0")
        elif self.kind == "linear":
            if self.c0 < 0 or self.c1 < 0:
                rep.add("linear speed law needs c0, c1 >= 0")
        elif self.kind == "table":
            s, g = np.asarray(self.table_s), np.asarray(self.table_g)
            if s.size < 2 or s.size != g.size:
                rep.add("speed table needs >= 2 matching (s, g) pairs")
            elif np.any(np.diff(s) <= 0):
                rep.add("speed table abscissae must increase")
            if g.size and np.any(g < 0):
                rep.add("speed table values must be >= 0")
        else:
            rep.add(f"unknown speed law {self.kind!r}")
        return rep


class CollisionRateSpec:
    R: int


@dataclass
class ConstantMatrix(CollisionRateSpec):
    a_hat: np.ndarray

    def __post_init__(self):
        self.a_hat = np.atleast_2d(np.asarray(self.a_hat, dtype=float))

    @property
    def R(self) -> int:  # type: ignore[override]
        return self.a_hat.shape[0]


@dataclass
class CrossSection(CollisionRateSpec):
    """``a_rq ~ (l_r + l_q)^(d-1) * g(|v_r - v_q|)``."""

    radii: tuple[float, ...]
    speed_law: SpeedLaw
    d: int

    @property
    def R(self) -> int:  # type: ignore[override]
        return len(self.radii)


def eval_macroscopic_rate(spec: CollisionRateSpec, r: int, q: int, x, t: float,
                          velocities: Sequence[VelocityField] | None = None):
    """Macroscopic collision rate of species ``r`` and ``q`` at ``(x, t)``.

    ``x`` is a single position or an (m, d) array; the result is a float or an
    (m,) array accordingly. Cross-section rates need the species velocity
    fields.
    """
    R = spec.R
    if not (0 <= r < R and 0 <= q < R):
        raise IndexError(f"species index out of range: ({r}, {q}) with R={R}")
    xa = np.asarray(x, dtype=float)
    single = xa.ndim <= 1
    pts = np.atleast_2d(xa) if xa.ndim else xa.reshape(1, 1)
    if isinstance(spec, ConstantMatrix):
        # symmetrized so both index orders agree even for slightly asymmetric input
        val = 0.5 * (spec.a_hat[r, q] + spec.a_hat[q, r])
        out = np.full(pts.shape[0], val)
    elif isinstance(spec, CrossSection):
        if velocities is None:
            raise ValueError("cross-section rate needs velocity fields")
        rel = velocities[r](pts, t) - velocities[q](pts, t)
        speed = np.linalg.norm(rel, axis=-1)
        out = (spec.radii[r] + spec.radii[q]) ** (spec.d - 1) * spec.speed_law(speed)
    else:
        raise TypeError(f"unsupported rate spec {type(spec).__name__}")
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# fragmentation


@dataclass
class FragTable:
    """Microscopic fragment counts ``e[r, q, l]`` and derived ``e_hat``."""

    e: np.ndarray
    e_hat: np.ndarray | None = None

    def __post_init__(self):
        self.e = np.asarray(self.e)
        if self.e_hat is None:
            self.e_hat = derive_e_hat(self.e)

    @property
    def R(self) -> int:
        return self.e.shape[0]

    @classmethod
    def from_entries(cls, R: int, entries: Sequence[Sequence[int]], one_based: bool = True) -> "FragTable":
        """Build from ``(r, q, l, count)`` tuples; unlisted entries are 0."""
        e = np.zeros((R, R, R), dtype=np.int64)
        off = 1 if one_based else 0
        for r, q, l, c in entries:
            e[r - off, q - off, l - off] = c
        return cls(e)

    def entries(self, one_based: bool = True) -> list[list[int]]:
        off = 1 if one_based else 0
        return [[int(r + off), int(q + off), int(l + off), int(self.e[r, q, l])]
                for r, q, l in zip(*np.nonzero(self.e))]


def derive_e_hat(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e)
    return e + e.transpose(1, 0, 2)


def shattering_table(masses: Sequence[int]) -> FragTable:
    """Every collision breaks the focal particle into unit atoms."""
    R = len(masses)
    e = np.zeros((R, R, R), dtype=np.int64)
    e[:, :, 0] = np.asarray(masses)[:, None]
    return FragTable(e)


# ---------------------------------------------------------------------------
# species table


@dataclass
class SpeciesTable:
    masses: tuple[int, ...]
    sigma: tuple[float, ...]
    velocity: tuple[VelocityField, ...]
    rate_spec: CollisionRateSpec
    frag: FragTable
    C_a: float
    d: int = 1

    @property
    def R(self) -> int:
        return len(self.masses)

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=np.int64)

    def rate(self, r: int, q: int, x, t: float):
        return eval_macroscopic_rate(self.rate_spec, r, q, x, t, self.velocity)

    @property
    def rates_vanish(self) -> bool:
        """True when every channel is switched off identically."""
        if isinstance(self.rate_spec, ConstantMatrix):
            return not np.any(self.rate_spec.a_hat)
        if isinstance(self.rate_spec, CrossSection):
            law = self.rate_spec.speed_law
            if law.kind == "constant":
                return law.c0 == 0
            if law.kind == "table":
                return not np.any(law.table_g)
        return False


def validate_species_table(table: SpeciesTable) -> ValidationReport:
    """Check every coefficient invariant; recomputes ``frag.e_hat`` from ``e``."""
    rep = ValidationReport()
    R = table.R
    m = np.asarray(table.masses)

    if R < 1:
        rep.add("need at least one species")
        return rep
    if not all(isinstance(v, (int, np.integer)) and v > 0 for v in table.masses):
        rep.add("masses must be positive integers")
    if m[0] != 1:
        rep.add(f"m[0] must be 1, got {m[0]}")
    for r in range(R - 1):
        if not m[r] < m[r + 1]:
            rep.add(f"masses not strictly increasing at index {r}: {m[r]} >= {m[r + 1]}")

    if len(table.sigma) != R:
        rep.add(f"sigma has {len(table.sigma)} entries, expected {R}")
    for r, s in enumerate(table.sigma):
        if not s > 0:
            rep.add(f"sigma[{r}] = {s} must be > 0")

    if len(table.velocity) != R:
        rep.add(f"velocity has {len(table.velocity)} entries, expected {R}")
    for r, v in enumerate(table.velocity):
        rep.extend(v.validate(table.d), prefix=f"velocity[{r}]: ")

    if not table.C_a > 0:
        rep.add(f"C_a = {table.C_a} must be > 0")

    rep.extend(_validate_rates(table))
    rep.extend(_validate_frag(table.frag, m))
    return rep


def _validate_rates(table: SpeciesTable) -> ValidationReport:
    rep = ValidationReport()
    spec = table.rate_spec
    if spec.R != table.R:
        rep.add(f"rate spec covers {spec.R} species, expected {table.R}")
        return rep
    if isinstance(spec, ConstantMatrix):
        a = spec.a_hat
        if a.shape != (table.R, table.R):
            rep.add(f"rate matrix shape {a.shape} != ({table.R}, {table.R})")
            return rep
        for r, q in zip(*np.nonzero(a < 0)):
            rep.add(f"a_hat[{r}][{q}] = {a[r, q]} is negative")
        for r, q in zip(*np.nonzero(~np.isclose(a, a.T, rtol=0, atol=0))):
            if r < q:
                rep.add(f"a_hat not symmetric at ({r}, {q})")
        if not np.all(np.isfinite(a)):
            rep.add("a_hat has non-finite entries")
    elif isinstance(spec, CrossSection):
        if spec.d != table.d:
            rep.add(f"cross-section dimension {spec.d} != {table.d}")
        for r, l in enumerate(spec.radii):
            if not l > 0:
                rep.add(f"radius[{r}] = {l} must be > 0")
        rep.extend(spec.speed_law.validate())
    else:
        rep.add(f"unsupported rate spec {type(spec).__name__}")
    return rep


def _validate_frag(frag: FragTable, m: np.ndarray) -> ValidationReport:
    rep = ValidationReport()
    R = m.size
    e = frag.e
    if e.shape != (R, R, R):
        rep.add(f"fragmentation tensor shape {e.shape} != {(R, R, R)}")
        return rep
    if not np.issubdtype(e.dtype, np.integer):
        if np.any(e != np.round(e)):
            rep.add("fragment counts must be integers")
        e = np.round(e).astype(np.int64)
        frag.e = e
    for r, q, l in zip(*np.nonzero(e < 0)):
        rep.add(f"e[{r}][{q}][{l}] = {e[r, q, l]} is negative")
    out_mass = np.einsum("rql,l->rq", e, m)
    for r in range(R):
        for q in range(R):
            if out_mass[r, q] != m[r]:
                rep.add(f"sum_l m_l e[{r}][{q}][l] = {out_mass[r, q]} != m[{r}] = {m[r]}")
    frag.e_hat = derive_e_hat(e)
    hat_mass = np.einsum("rql,l->rq", frag.e_hat, m)
    for r in range(R):
        for q in range(r, R):
            if hat_mass[r, q] != m[r] + m[q]:
                rep.add(f"sum_l m_l e_hat[{r}][{q}][l] = {hat_mass[r, q]} != {m[r] + m[q]}")
    return rep


# ---------------------------------------------------------------------------
# JSON (de)serialization


def velocity_from_dict(spec: dict[str, Any] | None, d: int, L: float) -> VelocityField:
    if not spec or spec.get("kind", "zero") == "zero":
        return ZeroVelocity(d)
    kind = spec["kind"]
    if kind == "constant":
        return ConstantVelocity(tuple(float(v) for v in spec["vector"]))
    if kind == "rotational":
        return RotationalVelocity(tuple(spec["center"]), float(spec["omega"]), L)
    if kind == "grid":
        values = np.asarray(spec["values"], dtype=float)
        return GridSampledVelocity(GridField(d, int(spec["n"]), L, values))
    raise ValueError(f"unknown velocity kind {kind!r}")


def rate_from_dict(spec: dict[str, Any], R: int, d: int) -> CollisionRateSpec:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        a = spec.get("matrix", spec.get("value", 1.0))
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            a = np.full((R, R), float(a))
        return ConstantMatrix(a)
    if kind == "cross_section":
        law = spec.get("speed_law", {"kind": "constant", "c0": 1.0})
        return CrossSection(
            tuple(float(x) for x in spec["radii"]),
            SpeedLaw(
                kind=law.get("kind", "constant"),
                c0=float(law.get("c0", 1.0)),
                c1=float(law.get("c1", 0.0)),
                table_s=tuple(law.get("s", ())),
                table_g=tuple(law.get("g", ())),
            ),
            d,
        )
    raise ValueError(f"unknown rate kind {kind!r}")


def species_table_from_dict(cfg: dict[str, Any], d: int, L: float) -> SpeciesTable:
    """Parse the ``species``/``rate``/``fragmentation``/``C_a`` config keys."""
    species = cfg["species"]
    R = len(species)
    return SpeciesTable(
        masses=tuple(int(s["mass"]) for s in species),
        sigma=tuple(float(s["sigma"]) for s in species),
        velocity=tuple(velocity_from_dict(s.get("velocity"), d, L) for s in species),
        rate_spec=rate_from_dict(cfg.get("rate", {}), R, d),
        frag=FragTable.from_entries(R, cfg["fragmentation"]),
        C_a=float(cfg["C_a"]),
        d=d,
    )


def species_table_to_dict(table: SpeciesTable) -> dict[str, Any]:
    spec = table.rate_spec
    if isinstance(spec, ConstantMatrix):
        rate: dict[str, Any] = {"kind": "constant", "matrix": spec.a_hat.tolist()}
    else:
        law = spec.speed_law
        rate = {"kind": "cross_section", "radii": list(spec.radii),
                "speed_law": {"kind": law.kind, "c0": law.c0, "c1": law.c1,
                              "s": list(law.table_s), "g": list(law.table_g)}}
    return {
        "species": [{"mass": int(m), "sigma": float(s), "velocity": v.to_dict()}
                    for m, s, v in zip(table.masses, table.sigma, table.velocity)],
        "rate": rate,
        "fragmentation": table.frag.entries(),
        "C_a": table.C_a,
    }
