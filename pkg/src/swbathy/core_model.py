"""Grid, bathymetry, boundary forcing and scenario configuration.

Everything here is immutable after construction. Bed profiles are always
evaluated at cell interfaces first; cell-center values are the mean of the
two bounding interfaces so that the forward scheme stays well balanced.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

GRAVITY = 9.812
SANDBAR_B = 3.0 * math.pi / 5.0


class ConfigError(ValueError):
    """Raised for invalid grids, bed specs, forcing laws or scenarios."""


# --------------------------------------------------------------------------- #
# Grid                                                                        #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Grid:
    """Uniform cell partition of the channel interval (a1, a2)."""

    a1: float
    a2: float
    n_cells: int

    def __post_init__(self):
        if not (math.isfinite(self.a1) and math.isfinite(self.a2)) or self.a2 <= self.a1:
            raise ConfigError(f"need a2 > a1, got a1={self.a1}, a2={self.a2}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 4:
            raise ConfigError(f"need n_cells >= 4, got {self.n_cells}")

    @property
    def dx(self) -> float:
        return (self.a2 - self.a1) / self.n_cells

    @property
    def interfaces(self) -> np.ndarray:
        x = self.a1 + self.dx * np.arange(self.n_cells + 1)
        x[-1] = self.a2
        return x

    @property
    def centers(self) -> np.ndarray:
        xi = self.interfaces
        return 0.5 * (xi[:-1] + xi[1:])

    @property
    def length(self) -> float:
        return self.a2 - self.a1


def build_grid(a1: float, a2: float, n_cells: int) -> Grid:
    if int(n_cells) != n_cells:
        raise ConfigError(f"n_cells must be an integer, got {n_cells}")
    return Grid(float(a1), float(a2), int(n_cells))


# --------------------------------------------------------------------------- #
# Bathymetry                                                                  #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class BathymetryField:
    """Bed elevation at interfaces (n+1) and centers (n)."""

    b_iface: np.ndarray
    b_center: np.ndarray

    def __post_init__(self):
        bi = np.array(self.b_iface, dtype=float)
        bc = np.array(self.b_center, dtype=float)
        if bi.ndim != 1 or bc.shape != (bi.size - 1,):
            raise ConfigError("b_center must have one entry fewer than b_iface")
        if not (np.all(np.isfinite(bi)) and np.all(np.isfinite(bc))):
            raise ConfigError("bathymetry contains non-finite values")
        if np.any(bc != 0.5 * (bi[1:] + bi[:-1])):
            raise ConfigError("b_center must be the mean of the bounding interface values")
        bi.setflags(write=False)
        bc.setflags(write=False)
        object.__setattr__(self, "b_iface", bi)
        object.__setattr__(self, "b_center", bc)

    @classmethod
    def from_interfaces(cls, b_iface) -> "BathymetryField":
        bi = np.array(b_iface, dtype=float)
        return cls(bi, 0.5 * (bi[1:] + bi[:-1]))

    @property
    def b_a1(self) -> float:
        """Bed elevation at the upstream end.

        The inverse march is anchored at the first cell center, so this is the
        first center value.
        """
        return float(self.b_center[0])


def _bump(x, center=10.0, height=0.2, coeff=0.05):
    half = math.sqrt(height / coeff)
    b = height - coeff * (x - center) ** 2
    return np.where(np.abs(x - center) < half, b, 0.0)


def _sandbar(x, amplitude=0.1, length=25.0):
    if amplitude <= 0:
        raise ConfigError("sandbar amplitude must be positive")
    s = 6.0 * x / length - 3.0
    return amplitude * (np.tanh(2.0 * (s + SANDBAR_B)) - np.tanh(2.0 * (s - SANDBAR_B)))


def _sech(x, amplitude=0.2, length=25.0):
    s = 2.0 * (6.0 * x / length - 3.0)
    return amplitude / np.cosh(s)


def _cosine_hump(x, center=19.0, width=4.0, amplitude=0.05):
    inside = np.abs(x - center) < width / 2.0
    return np.where(inside, amplitude * (1.0 + np.cos(2.0 * math.pi * (x - center) / width)), 0.0)


def _composite(x, bump_centers=(6.0, 14.0), height=0.2, coeff=0.05,
               cos_center=19.0, cos_width=4.0, cos_amplitude=0.05):
    b = _cosine_hump(x, cos_center, cos_width, cos_amplitude)
    for c in bump_centers:
        b = b + _bump(x, c, height, coeff)
    return b


BED_GENERATORS = {
    "flat": lambda x, level=0.0: np.full_like(x, float(level)),
    "bump": _bump,
    "sandbar": _sandbar,
    "sech": _sech,
    "composite": _composite,
}


def evaluate_bed(spec: Mapping[str, Any], x: np.ndarray) -> np.ndarray:
    """Evaluate an analytic bed spec at arbitrary positions."""
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind == "tabulated":
        raise ConfigError("tabulated beds can only be sampled on their own grid")
    if kind not in BED_GENERATORS:
        raise ConfigError(f"unknown bed generator {kind!r}")
    try:
        return np.asarray(BED_GENERATORS[kind](np.asarray(x, dtype=float), **params), dtype=float)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for bed {kind!r}: {exc}") from exc


def sample_bed(spec: Mapping[str, Any], grid: Grid) -> BathymetryField:
    """Sample a bed generator on ``grid``.

    ``spec`` is a mapping with a ``kind`` key (flat, bump, sandbar, sech,
    composite, tabulated) plus generator parameters. Tabulated beds carry
    ``x`` and ``b`` lists (or a ``path`` to a two-column CSV) whose abscissae
    must coincide with the grid interfaces.
    """
    kind = spec.get("kind")
    xi = grid.interfaces
    if kind == "tabulated":
        if "path" in spec:
            x_tab, b_tab = read_bed_csv(spec["path"])
        else:
            x_tab = np.asarray(spec["x"], dtype=float)
            b_tab = np.asarray(spec["b"], dtype=float)
        if x_tab.shape != xi.shape or not np.allclose(x_tab, xi, rtol=0, atol=1e-9 * grid.length):
            raise ConfigError("tabulated bed samples do not match the grid interfaces")
        return BathymetryField.from_interfaces(b_tab)
    return BathymetryField.from_interfaces(evaluate_bed(spec, xi))


def read_bed_csv(path) -> tuple[np.ndarray, np.ndarray]:
    xs, bs = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                xs.append(float(row[0]))
                bs.append(float(row[1]))
            except ValueError:
                continue  # header line
    return np.array(xs), np.array(bs)


# --------------------------------------------------------------------------- #
# Boundary forcing                                                            #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Law:
    """``mean + amplitude * sin(2 pi t / period)``; amplitude 0 is a constant."""

    mean: float
    amplitude: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        for v in (self.mean, self.amplitude, self.period):
            if not math.isfinite(v):
                raise ConfigError("forcing law parameters must be finite")
        if self.amplitude != 0.0 and self.period <= 0:
            raise ConfigError("sinusoidal laws need period > 0")

    def __call__(self, t):
        if self.amplitude == 0.0:
            return self.mean + 0.0 * np.asarray(t, dtype=float)
        return self.mean + self.amplitude * np.sin(2.0 * math.pi * np.asarray(t, dtype=float) / self.period)

    @classmethod
    def from_obj(cls, obj) -> "Law | None":
        if obj is None:
            return None
        if isinstance(obj, (int, float)):
            return cls(float(obj))
        return cls(float(obj["mean"]), float(obj.get("amplitude", 0.0)), float(obj.get("period", 1.0)))

    def to_obj(self):
        if self.amplitude == 0.0:
            return self.mean
        return {"mean": self.mean, "amplitude": self.amplitude, "period": self.period}


@dataclass(frozen=True)
class BoundaryForcing:
    """Inlet discharge law plus either an outlet depth or an inlet depth law.

    With only ``inlet_q`` and ``outlet_h`` the outlet carries a depth
    condition. With ``inlet_h`` set both inlet quantities are prescribed and
    the outlet is transmissive. With neither depth law the outlet is
    transmissive and the inlet carries discharge only.
    """

    inlet_q: Law
    inlet_h: Law | None = None
    outlet_h: Law | None = None

    def __post_init__(self):
        if self.inlet_h is not None and self.outlet_h is not None:
            raise ConfigError("prescribe depth either at the inlet or at the outlet, not both")

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "BoundaryForcing":
        return cls(Law.from_obj(obj["inlet_q"]), Law.from_obj(obj.get("inlet_h")),
                   Law.from_obj(obj.get("outlet_h")))

    def to_obj(self) -> dict:
        out = {"inlet_q": self.inlet_q.to_obj()}
        if self.inlet_h is not None:
            out["inlet_h"] = self.inlet_h.to_obj()
        if self.outlet_h is not None:
            out["outlet_h"] = self.outlet_h.to_obj()
        return out


def evaluate_forcing(bf: BoundaryForcing, t: float) -> tuple[dict, dict]:
    """Boundary quantities at time ``t`` as ``(inlet, outlet)`` dicts."""
    inlet = {"q": float(bf.inlet_q(t))}
    outlet = {}
    if bf.inlet_h is not None:
        inlet["h"] = float(bf.inlet_h(t))
    if bf.outlet_h is not None:
        outlet["h"] = float(bf.outlet_h(t))
    return inlet, outlet


# --------------------------------------------------------------------------- #
# Flow state                                                                  #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class FlowField:
    zeta: np.ndarray
    q: np.ndarray
    t: float = 0.0

    def depth(self, bed: BathymetryField) -> np.ndarray:
        return self.zeta - bed.b_center


@dataclass(eq=False)
class FlowHistory:
    """Stored time levels ``times`` (N+1,) with ``zeta``/``q`` arrays (N+1, n_cells)."""

    times: np.ndarray
    zeta: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.zeta.shape != self.q.shape or self.zeta.shape[0] != self.times.size:
            raise ConfigError("history arrays have inconsistent shapes")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigError("history times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def level(self, n: int) -> FlowField:
        return FlowField(self.zeta[n], self.q[n], float(self.times[n]))

    def index_of(self, t: float, rtol: float = 1e-12) -> int:
        n = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[n] - t) > rtol * max(1.0, abs(t)):
            raise ConfigError(f"time {t} is not a stored level")
        return n

    def window(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Indices of stored levels with t_lo <= t <= t_hi."""
        return np.flatnonzero((self.times >= t_lo) & (self.times <= t_hi))


# --------------------------------------------------------------------------- #
# Scenario configuration                                                      #
# --------------------------------------------------------------------------- #


def evaluate_profile(spec, x: np.ndarray) -> np.ndarray:
    """Initial-condition profiles: a number, ``constant`` or ``gaussian``."""
    if isinstance(spec, (int, float)):
        return np.full_like(x, float(spec))
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return np.full_like(x, float(spec["value"]))
    if kind == "gaussian":
        return spec["base"] + spec["amplitude"] * np.exp(-((x - spec["center"]) / spec["width"]) ** 2)
    raise ConfigError(f"unknown initial profile {kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    grid: Grid
    bed: dict
    initial: dict
    boundary: BoundaryForcing
    t_final: float
    cfl_c: float = 0.9
    theta: float = 1.0
    gravity: float = GRAVITY
    t_star: Any = "last"
    name: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.cfl_c < 1.0:
            raise ConfigError("cfl_c must lie in (0, 1)")
        if not 1.0 <= self.theta <= 2.0:
            raise ConfigError("theta must lie in [1, 2]")
        if not self.t_final > 0:
            raise ConfigError("t_final must be positive")
        if not self.gravity > 0:
            raise ConfigError("gravity must be positive")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioConfig":
        g = d["grid"]
        return cls(
            grid=build_grid(g.get("a1", 0.0), g["a2"], g["n_cells"]),
            bed=dict(d["bed"]),
            initial=dict(d["initial"]),
            boundary=BoundaryForcing.from_obj(d["boundary"]),
            t_final=float(d["t_final"]),
            cfl_c=float(d.get("cfl_c", 0.9)),
            theta=float(d.get("theta", 1.0)),
            gravity=float(d.get("gravity", GRAVITY)),
            t_star=d.get("t_star", "last"),
            name=d.get("name", ""),
            extras=dict(d.get("extras", {})),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": {"a1": self.grid.a1, "a2": self.grid.a2, "n_cells": self.grid.n_cells},
            "bed": self.bed,
            "initial": self.initial,
            "boundary": self.boundary.to_obj(),
            "t_final": self.t_final,
            "cfl_c": self.cfl_c,
            "theta": self.theta,
            "gravity": self.gravity,
            "t_star": self.t_star,
            "extras": self.extras,
        }

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ScenarioConfig":
        d = self.to_dict()
        if "n_cells" in kw:
            d["grid"]["n_cells"] = int(kw.pop("n_cells"))
        d.update(kw)
        return ScenarioConfig.from_dict(d)

    def sample_bed(self) -> BathymetryField:
        return sample_bed(self.bed, self.grid)

    def initial_field(self) -> FlowField:
        x = self.grid.centers
        return FlowField(evaluate_profile(self.initial["zeta"], x),
                         evaluate_profile(self.initial["q"], x), 0.0)


__all__ = [
    "GRAVITY", "ConfigError", "Grid", "build_grid", "BathymetryField", "sample_bed",
    "evaluate_bed", "Law", "BoundaryForcing", "evaluate_forcing", "FlowField", "FlowHistory",
    "ScenarioConfig",
]
