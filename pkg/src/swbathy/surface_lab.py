"""Surface measurements from a flow history: derivatives, noise and smoothing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import linalg, optimize

from .core_model import BathymetryField, BoundaryForcing, FlowHistory, Grid


class MeasurementError(ValueError):
    """Bad spacing, missing time level or malformed measurement data."""


# --------------------------------------------------------------------------- #
# Finite-difference stencils                                                  #
# --------------------------------------------------------------------------- #


def dt_nonuniform(f_prev, f_curr, f_next, dm, dp):
    """Second-order central derivative on a nonuniform mesh.

    ``dm`` is the spacing to the previous sample and ``dp`` to the next one.
    Exact for polynomials of degree <= 2.
    """
    dm = np.asarray(dm, dtype=float)
    dp = np.asarray(dp, dtype=float)
    if np.any(dm <= 0) or np.any(dp <= 0):
        raise MeasurementError("stencil spacings must be positive")
    f_curr = np.asarray(f_curr)
    # difference form: exactly zero on constant samples
    num = dp * dp * (f_curr - np.asarray(f_prev)) + dm * dm * (np.asarray(f_next) - f_curr)
    return num / (dm * dp * (dm + dp))


def ghost_extrapolate(t3, f3, t_ghost):
    """Evaluate the quadratic through three samples at ``t_ghost``.

    ``t3`` holds the three abscissae; ``f3`` stacks the matching samples
    along its first axis (extra axes are carried through).
    """
    t0, t1, t2 = (float(v) for v in t3)
    if len({t0, t1, t2}) < 3:
        raise MeasurementError("ghost extrapolation needs three distinct times")
    l0 = (t_ghost - t1) * (t_ghost - t2) / ((t0 - t1) * (t0 - t2))
    l1 = (t_ghost - t0) * (t_ghost - t2) / ((t1 - t0) * (t1 - t2))
    l2 = (t_ghost - t0) * (t_ghost - t1) / ((t2 - t0) * (t2 - t1))
    f3 = np.asarray(f3, dtype=float)
    return l0 * f3[0] + l1 * f3[1] + l2 * f3[2]


def derivative_series(t, f):
    """Derivative of ``f`` (first axis indexed like ``t``) at every sample.

    End samples use a single ghost point one spacing beyond the boundary,
    filled by quadratic extrapolation from the three adjacent samples.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    if t.size < 3:
        raise MeasurementError("need at least three samples")
    if np.any(np.diff(t) <= 0):
        raise MeasurementError("sample positions must be strictly increasing")
    out = np.empty_like(f)
    shape = (-1,) + (1,) * (f.ndim - 1)
    dm = np.diff(t)[:-1].reshape(shape)
    dp = np.diff(t)[1:].reshape(shape)
    out[1:-1] = dt_nonuniform(f[:-2], f[1:-1], f[2:], dm, dp)
    tg = t[0] - (t[1] - t[0])
    g0 = ghost_extrapolate(t[:3], f[:3], tg)
    out[0] = dt_nonuniform(g0, f[0], f[1], t[0] - tg, t[1] - t[0])
    tg = t[-1] + (t[-1] - t[-2])
    g1 = ghost_extrapolate(t[-3:], f[-3:], tg)
    out[-1] = dt_nonuniform(f[-2], f[-1], g1, t[-1] - t[-2], tg - t[-1])
    return out


def dx_spatial(f, dx):
    """Spatial derivative on the uniform grid; both ends via ghost extrapolation."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] < 3:
        raise MeasurementError("need at least three cells")
    return derivative_series(dx * np.arange(f.shape[0]), f)


def _local_derivative(times, values, n, radius):
    """Derivative series restricted to levels n-radius..n+radius.

    Ghosting only happens at the true ends of the history, so the result at
    level ``n`` equals the full-series derivative.
    """
    lo = max(0, n - radius)
    hi = min(times.size, n + radius + 1)
    d = np.empty((hi - lo,) + values.shape[1:])
    for k in range(lo, hi):
        if k == 0:
            d[k - lo] = derivative_series(times[:3], values[:3])[0]
        elif k == times.size - 1:
            d[k - lo] = derivative_series(times[-3:], values[-3:])[-1]
        else:
            d[k - lo] = dt_nonuniform(values[k - 1], values[k], values[k + 1],
                                      times[k] - times[k - 1], times[k + 1] - times[k])
    return lo, d


def second_time_derivative(times, values, n):
    """First-derivative stencil applied twice, evaluated at level ``n``."""
    lo, d1 = _local_derivative(times, values, n, 3)
    t_loc = times[lo:lo + d1.shape[0]]
    k = n - lo
    return derivative_series(t_loc, d1)[k] if k in (0, d1.shape[0] - 1) else dt_nonuniform(
        d1[k - 1], d1[k], d1[k + 1], t_loc[k] - t_loc[k - 1], t_loc[k + 1] - t_loc[k])


# --------------------------------------------------------------------------- #
# Snapshot                                                                    #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SurfaceSnapshot:
    """Single-instant measurement set plus the upstream data it needs."""

    t_star: float
    x: np.ndarray
    zeta: np.ndarray
    dzeta_dt: np.ndarray
    d2zeta_dt2: np.ndarray
    q_in: float
    dq_in_dt: float
    b_a1: float

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in (self.x, self.zeta, self.dzeta_dt, self.d2zeta_dt2)]
        n = arrays[0].size
        if any(a.shape != (n,) for a in arrays):
            raise MeasurementError("snapshot arrays must share one length")
        scalars = (self.t_star, self.q_in, self.dq_in_dt, self.b_a1)
        if not all(np.all(np.isfinite(a)) for a in arrays) or not all(math.isfinite(s) for s in scalars):
            raise MeasurementError("snapshot contains non-finite values")
        for name, a in zip(("x", "zeta", "dzeta_dt", "d2zeta_dt2"), arrays):
            object.__setattr__(self, name, a)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def h_a1(self) -> float:
        return float(self.zeta[0] - self.b_a1)

    def with_zeta(self, zeta) -> "SurfaceSnapshot":
        return replace(self, zeta=np.asarray(zeta, dtype=float))

    # -- CSV + JSON header --------------------------------------------------

    def header(self) -> dict:
        return {"t_star": self.t_star, "q_in": self.q_in, "dq_in_dt": self.dq_in_dt, "b_a1": self.b_a1}

    def save(self, json_path) -> Path:
        """Write ``<stem>.json`` (header) and ``<stem>.csv`` (columns)."""
        json_path = Path(json_path)
        csv_path = json_path.with_suffix(".csv")
        head = self.header() | {"csv": csv_path.name}
        json_path.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
        cols = np.column_stack([self.x, self.zeta, self.dzeta_dt, self.d2zeta_dt2])
        np.savetxt(csv_path, cols, delimiter=",", header="x,zeta,dzeta_dt,d2zeta_dt2", comments="", fmt="%.17g")
        return csv_path

    @classmethod
    def load(cls, json_path) -> "SurfaceSnapshot":
        json_path = Path(json_path)
        head = json.loads(json_path.read_text())
        csv_path = json_path.parent / head.get("csv", json_path.with_suffix(".csv").name)
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 4:
            raise MeasurementError("snapshot CSV needs columns x,zeta,dzeta_dt,d2zeta_dt2")
        return cls(float(head["t_star"]), data[:, 0], data[:, 1], data[:, 2], data[:, 3],
                   float(head["q_in"]), float(head["dq_in_dt"]), float(head["b_a1"]))


def resolve_t_star(hist: FlowHistory, t_star) -> int:
    if t_star is None or t_star == "last":
        return len(hist) - 1
    return hist.index_of(float(t_star))


def extract_snapshot(hist: FlowHistory, t_star, bed: BathymetryField, forcing: BoundaryForcing,
                     grid: Grid | None = None) -> SurfaceSnapshot:
    """Build the measurement set at a stored level ``t_star`` (``"last"`` = t_f)."""
    if len(hist) < 3:
        raise MeasurementError("history needs at least three time levels")
    try:
        n = resolve_t_star(hist, t_star)
    except ValueError as exc:
        raise MeasurementError(str(exc)) from exc
    times = hist.times
    lo, d1 = _local_derivative(times, hist.zeta, n, 0)
    dz = d1[0]
    d2z = second_time_derivative(times, hist.zeta, n)
    q_series = forcing.inlet_q(times)
    dq_in = _local_derivative(times, q_series, n, 0)[1][0]
    x = grid.centers if grid is not None else np.arange(hist.zeta.shape[1], dtype=float)
    return SurfaceSnapshot(float(times[n]), x, hist.zeta[n].copy(), dz, d2z,
                           float(forcing.inlet_q(times[n])), float(dq_in), bed.b_a1)


# --------------------------------------------------------------------------- #
# Noise                                                                       #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseSpec:
    relative_amplitude: float = 0.02
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.relative_amplitude < 0:
            raise MeasurementError("noise amplitude must be non-negative")
        if self.distribution != "uniform":
            raise MeasurementError("only zero-mean uniform noise is supported")


def add_noise(values, spec: NoiseSpec, depth):
    """Add i.i.d. uniform noise on [-r h, r h] per sample; deterministic in the seed."""
    values = np.asarray(values, dtype=float)
    if spec.relative_amplitude == 0:
        return values.copy()
    bound = spec.relative_amplitude * np.broadcast_to(np.abs(np.asarray(depth, dtype=float)), values.shape)
    rng = np.random.default_rng(spec.seed)
    return values + rng.uniform(-1.0, 1.0, size=values.shape) * bound


# --------------------------------------------------------------------------- #
# Smoothing spline (Reinsch)                                                  #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SmootherSpec:
    """Residual budget ``S`` for ``sum w_i (y_i - s_i)^2 <= S``.

    ``budget=None`` means "derive from the data": the expected residual of
    uniform noise on ``[-r h, r h]``, i.e. ``n * (noise_level * mean depth)^2 / 3``.
    """

    budget: float | None = None
    weights: tuple | None = None
    noise_level: float = 0.02

    def __post_init__(self):
        if self.budget is not None and self.budget < 0:
            raise MeasurementError("smoothing budget must be non-negative")

    def resolve_budget(self, n: int, mean_depth: float | None = None) -> float:
        if self.budget is not None:
            return float(self.budget)
        if mean_depth is None:
            raise MeasurementError("default budget needs the mean depth")
        return n * (self.noise_level * mean_depth) ** 2 / 3.0


def _spline_matrices(x):
    h = np.diff(x)
    n = x.size
    # banded forms (upper/lower bandwidth 1) of R (n-2 square) and Q (n x n-2)
    r_diag = (h[:-1] + h[1:]) / 3.0
    r_off = h[1:-1] / 6.0
    q = np.zeros((n, n - 2))
    idx = np.arange(n - 2)
    q[idx, idx] = 1.0 / h[:-1]
    q[idx + 1, idx] = -1.0 / h[:-1] - 1.0 / h[1:]
    q[idx + 2, idx] = 1.0 / h[1:]
    return r_diag, r_off, q


def _penalized_fit(x, y, w, lam, mats=None):
    """Natural cubic smoothing spline minimizing sum w (y-s)^2 + lam * int s''^2."""
    r_diag, r_off, q = mats if mats is not None else _spline_matrices(x)
    a = q.T @ (q / w[:, None])
    m = a.shape[0]
    ab = np.zeros((5, m))
    for k in range(-2, 3):
        d = np.diagonal(a, k) * lam
        if k == 0:
            d = d + r_diag
        elif abs(k) == 1:
            d = d + r_off
        if k >= 0:
            ab[2 - k, k:] = d
        else:
            ab[2 - k, :m + k] = d
    gamma = linalg.solve_banded((2, 2), ab, q.T @ y)
    return y - lam * (q @ gamma) / w


def smooth_spline(x, y, spec: SmootherSpec | None = None, budget: float | None = None):
    """Reinsch smoothing: the natural cubic spline of least curvature whose
    weighted residual ``sum w_i (y_i - s(x_i))^2`` does not exceed the budget.

    Returns the spline values at ``x``. A zero budget reproduces ``y``; a
    budget larger than the straight-line residual returns the weighted
    least-squares line.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    spec = spec or SmootherSpec(budget=budget)
    s_budget = spec.resolve_budget(x.size) if budget is None else float(budget)
    if s_budget < 0:
        raise MeasurementError("smoothing budget must be non-negative")
    if x.size < 4 or y.shape != x.shape:
        raise MeasurementError("need at least four samples with matching shapes")
    if np.any(np.diff(x) <= 0):
        raise MeasurementError("x must be strictly increasing")
    w = np.ones_like(x) if spec.weights is None else np.asarray(spec.weights, dtype=float)
    if s_budget == 0:
        return y.copy()
    # straight-line limit
    vand = np.column_stack([np.ones_like(x), x - x.mean()])
    coef = np.linalg.lstsq(vand * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    line = vand @ coef
    if np.sum(w * (y - line) ** 2) <= s_budget:
        return line
    mats = _spline_matrices(x)

    def excess(log_lam):
        s = _penalized_fit(x, y, w, math.exp(log_lam), mats)
        return np.sum(w * (y - s) ** 2) - s_budget

    lo, hi = -40.0, 0.0
    while excess(hi) < 0:
        hi += 10.0
        if hi > 200:
            return line
    log_lam = optimize.brentq(excess, lo, hi, xtol=1e-10)
    return _penalized_fit(x, y, w, math.exp(log_lam), mats)
