"""Flow-regime checks, nondegeneracy certificates, stability constants, error norms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core_model import GRAVITY, BathymetryField, FlowField, FlowHistory, Grid
from .forward_solver import EPS_DRY
from .inverse_core import ReconstructionResult, reconstruct
from .surface_lab import SmootherSpec, SurfaceSnapshot, dx_spatial


class HypothesisError(ValueError):
    """A flow hypothesis needed by a checker does not hold on the window."""


def froude_field(field: FlowField, bed: BathymetryField, g: float = GRAVITY) -> np.ndarray:
    h = field.zeta - bed.b_center
    if np.any(h <= EPS_DRY):
        raise HypothesisError(f"dry cell at index {int(np.argmax(h <= EPS_DRY))}")
    return field.q / h / np.sqrt(g * h)


def froude_crossings(fr) -> int:
    """Number of sign changes of ``Fr - 1`` along the channel."""
    s = np.sign(np.asarray(fr) - 1.0)
    s = s[s != 0]
    return int(np.count_nonzero(np.diff(s)))


def characteristic_speeds(hist: FlowHistory, bed: BathymetryField, g: float = GRAVITY, levels=None):
    """``(lambda1, lambda2) = u +- sqrt(g h)`` on the selected levels (all by default)."""
    z = hist.zeta if levels is None else hist.zeta[levels]
    q = hist.q if levels is None else hist.q[levels]
    h = z - bed.b_center
    c = np.sqrt(g * np.maximum(h, 0.0))
    u = np.where(h > EPS_DRY, q / np.where(h > EPS_DRY, h, 1.0), 0.0)
    return u + c, u - c


@dataclass
class RegimeReport:
    t_lo: float
    t_hi: float
    c1: float
    c2: float
    strong_subcritical: bool

    def to_dict(self):
        return asdict(self)


def _window_levels(hist: FlowHistory, window) -> np.ndarray:
    t_lo, t_hi = (hist.times[0], hist.times[-1]) if window is None else window
    idx = hist.window(t_lo, t_hi)
    if idx.size == 0:
        raise HypothesisError(f"no stored level in window ({t_lo}, {t_hi})")
    return idx


def estimate_wave_bounds(hist: FlowHistory, bed: BathymetryField, window=None,
                         g: float = GRAVITY) -> RegimeReport:
    """``c1 = min lambda1`` and ``c2 = -max lambda2`` over stored levels in the window."""
    idx = _window_levels(hist, window)
    l1, l2 = characteristic_speeds(hist, bed, g, idx)
    c1 = float(l1.min())
    c2 = float(-l2.max())
    return RegimeReport(float(hist.times[idx[0]]), float(hist.times[idx[-1]]), c1, c2, c1 > 0 and c2 > 0)


def max_lambda2_series(hist: FlowHistory, bed: BathymetryField, g: float = GRAVITY):
    """``(t, max_x lambda2(t, x))`` for every stored level."""
    _, l2 = characteristic_speeds(hist, bed, g)
    return hist.times.copy(), l2.max(axis=1)


def zero_crossing_times(t, y):
    """Linearly interpolated times where ``y`` changes sign."""
    t = np.asarray(t)
    y = np.asarray(y)
    k = np.flatnonzero(np.sign(y[:-1]) * np.sign(y[1:]) < 0)
    return t[k] - y[k] * (t[k + 1] - t[k]) / (y[k + 1] - y[k])


def nondegeneracy(q, beta: float):
    """``(holds, min q, argmin)`` for ``q >= beta`` across the channel."""
    q = np.asarray(q, dtype=float)
    j = int(np.argmin(q))
    return bool(q[j] >= beta), float(q[j]), j


def bed_rise_sum(bed: BathymetryField | np.ndarray, tol: float | None = None) -> float:
    """Total rise of the bed over its maximal strictly increasing runs.

    Works on interface values; differences below ``tol`` (default
    ``1e-12 * max|b|``) count as flat.
    """
    b = np.asarray(bed.b_iface if isinstance(bed, BathymetryField) else bed, dtype=float)
    if tol is None:
        tol = 1e-12 * float(np.max(np.abs(b))) if b.size else 0.0
    d = np.diff(b)
    return float(np.sum(d[d > tol]))


@dataclass
class ConditionReport:
    condition: str
    holds: bool
    rho: float | None
    margin_inf: float
    bed_rise_sum: float
    c1: float
    c2: float | None
    min_depth: float
    max_depth: float
    window: tuple
    certified_interval: tuple | None = None
    certified_q_lower: float | None = None
    notes: str = ""

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window)
        d["certified_interval"] = None if self.certified_interval is None else list(self.certified_interval)
        return d


@dataclass(eq=False)
class LevelStats:
    """Per-level reductions from which every window quantity follows.

    Both margins separate into inlet and outlet terms, so window infima are
    minima of these series.
    """

    times: np.ndarray
    l1_min: np.ndarray
    l2_max: np.ndarray
    h_min: np.ndarray
    h_max: np.ndarray
    r_in: np.ndarray   # u(a1) + 2 sqrt(g h(a1))
    r_out: np.ndarray  # u(a2) - 2 sqrt(g h(a2))

    @classmethod
    def from_history(cls, hist: FlowHistory, bed: BathymetryField, g: float = GRAVITY) -> "LevelStats":
        l1, l2 = characteristic_speeds(hist, bed, g)
        h = hist.zeta - bed.b_center
        if np.any(h[:, [0, -1]] <= EPS_DRY):
            raise HypothesisError("dry boundary cell in history")
        sg = 2.0 * math.sqrt(g)
        u_in, u_out = hist.q[:, 0] / h[:, 0], hist.q[:, -1] / h[:, -1]
        return cls(hist.times, l1.min(axis=1), l2.max(axis=1), h.min(axis=1), h.max(axis=1),
                   u_in + sg * np.sqrt(h[:, 0]), u_out - sg * np.sqrt(h[:, -1]))

    def span(self, window) -> slice:
        t_lo, t_hi = (self.times[0], self.times[-1]) if window is None else window
        idx = np.flatnonzero((self.times >= t_lo) & (self.times <= t_hi))
        if idx.size == 0:
            raise HypothesisError(f"no stored level in window ({t_lo}, {t_hi})")
        return slice(idx[0], idx[-1] + 1)


def _stats(source, bed, g) -> LevelStats:
    return source if isinstance(source, LevelStats) else LevelStats.from_history(source, bed, g)


def _theorem_report(st: LevelStats, sl: slice, rise: float, length: float, g: float) -> ConditionReport:
    c1 = float(st.l1_min[sl].min())
    c2 = float(-st.l2_max[sl].max())
    t_lo, t_hi = float(st.times[sl.start]), float(st.times[sl.stop - 1])
    if not (c1 > 0 and c2 > 0):
        raise HypothesisError(f"strong subcriticality fails on window: c1={c1:.4g}, c2={c2:.4g}")
    c0 = min(c1, c2)
    if t_hi - t_lo <= length / c0:
        raise HypothesisError(f"window length {t_hi - t_lo:.4g} s does not exceed L/c0 = {length / c0:.4g} s")
    margin = float(st.r_in[sl].min() + st.r_out[sl].min() - g * (1.0 / c1 + 1.0 / c2) * rise)
    eps = float(st.h_min[sl].min())
    holds = margin > 0
    return ConditionReport("theorem", holds, margin if holds else None, margin, rise, c1, c2, eps,
                           float(st.h_max[sl].max()), (t_lo, t_hi),
                           (t_lo + length / c0, t_hi) if holds else None,
                           eps * margin / 2.0 if holds else None)


def _corollary_report(st: LevelStats, sl: slice, rise: float, length: float, g: float) -> ConditionReport:
    c1 = float(st.l1_min[sl].min())
    t_lo, t_hi = float(st.times[sl.start]), float(st.times[sl.stop - 1])
    if not c1 > 0:
        raise HypothesisError(f"lambda1 is not bounded below by a positive constant (c1={c1:.4g})")
    h_max = float(st.h_max[sl].max())
    eps = float(st.h_min[sl].min())
    margin = float(st.r_in[sl].min() - 2.0 * math.sqrt(g * h_max) - g / c1 * rise)
    holds = margin > 0
    cert, notes = None, ""
    if holds:
        if t_lo + length / c1 < t_hi:
            cert = (t_lo + length / c1, t_hi)
        else:
            notes = "window shorter than L/c1: no certified interval"
    return ConditionReport("corollary", holds, margin if holds else None, margin, rise, c1, None, eps,
                           h_max, (t_lo, t_hi), cert, eps * margin if cert else None, notes)


def check_theorem_condition(hist, bed: BathymetryField, length: float, window=None,
                            g: float = GRAVITY) -> ConditionReport:
    """Subcritical sufficient condition using inlet and outlet data.

    ``hist`` is a FlowHistory or precomputed ``LevelStats``. The infimum over
    all stored pairs (s, tau) separates into an inlet and an outlet minimum.
    Raises ``HypothesisError`` if strong subcriticality fails or the window is
    not longer than L / min(c1, c2).
    """
    st = _stats(hist, bed, g)
    return _theorem_report(st, st.span(window), bed_rise_sum(bed), length, g)


def check_corollary_condition(hist, bed: BathymetryField, length: float, window=None,
                              g: float = GRAVITY) -> ConditionReport:
    """Inlet-only sufficient condition; needs only ``lambda1 >= c1 > 0``."""
    st = _stats(hist, bed, g)
    return _corollary_report(st, st.span(window), bed_rise_sum(bed), length, g)


def _first_start(st: LevelStats, ok) -> int | None:
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else None


def _suffix(a, op):
    return op.accumulate(a[::-1])[::-1]


def find_theorem_shift(hist, bed: BathymetryField, length: float, g: float = GRAVITY,
                       t_end: float | None = None) -> ConditionReport | None:
    """Earliest stored level from which the subcritical condition holds up to ``t_end``."""
    st = _stats(hist, bed, g)
    sl = st.span(None if t_end is None else (st.times[0], t_end))
    t = st.times[sl]
    c1 = _suffix(st.l1_min[sl], np.minimum)
    c2 = -_suffix(st.l2_max[sl], np.maximum)
    rise = bed_rise_sum(bed)
    with np.errstate(divide="ignore", invalid="ignore"):
        margin = (_suffix(st.r_in[sl], np.minimum) + _suffix(st.r_out[sl], np.minimum)
                  - g * (1.0 / c1 + 1.0 / c2) * rise)
        ok = (c1 > 0) & (c2 > 0) & (t[-1] - t > length / np.minimum(c1, c2)) & (margin > 0)
    i = _first_start(st, ok)
    return None if i is None else _theorem_report(st, slice(sl.start + i, sl.stop), rise, length, g)


def find_corollary_shift(hist, bed: BathymetryField, length: float, g: float = GRAVITY,
                         t_end: float | None = None) -> ConditionReport | None:
    """Earliest stored level from which the corollary holds with a non-empty certified interval."""
    st = _stats(hist, bed, g)
    sl = st.span(None if t_end is None else (st.times[0], t_end))
    t = st.times[sl]
    c1 = _suffix(st.l1_min[sl], np.minimum)
    h_max = _suffix(st.h_max[sl], np.maximum)
    rise = bed_rise_sum(bed)
    with np.errstate(divide="ignore", invalid="ignore"):
        margin = _suffix(st.r_in[sl], np.minimum) - 2.0 * np.sqrt(g * h_max) - g / c1 * rise
        ok = (c1 > 0) & (margin > 0) & (t + length / c1 < t[-1])
    i = _first_start(st, ok)
    return None if i is None else _corollary_report(st, slice(sl.start + i, sl.stop), rise, length, g)


def evaluate_conditions(hist: FlowHistory, bed: BathymetryField, length: float, window=None,
                        g: float = GRAVITY) -> dict:
    """Regime bounds and both sufficient conditions, as JSON-ready dicts.

    With an explicit window the checkers run on it as given. Without one they
    run on the whole history and, where that fails, on the earliest shifted
    window that works.
    """
    st = LevelStats.from_history(hist, bed, g)
    out = {"window": None if window is None else list(window)}
    out["regime"] = estimate_wave_bounds(hist, bed, window, g).to_dict()
    for name, check, shift in (("theorem", check_theorem_condition, find_theorem_shift),
                               ("corollary", check_corollary_condition, find_corollary_shift)):
        try:
            rep = check(st, bed, length, window, g).to_dict()
        except HypothesisError as exc:
            rep = {"condition": name, "holds": False, "error": str(exc)}
        if window is None and not (rep["holds"] and rep.get("certified_interval")):
            found = shift(st, bed, length, g)
            rep = {**rep, "shifted": None if found is None else found.to_dict()}
        out[name] = rep
    return out


def condition_holds(entry: dict) -> bool:
    """True if a report from ``evaluate_conditions`` holds directly or after a shift."""
    if entry.get("holds"):
        return True
    shifted = entry.get("shifted")
    return bool(shifted and shifted["holds"])


# --------------------------------------------------------------------------- #
# Stability constants                                                         #
# --------------------------------------------------------------------------- #


@dataclass
class StabilityBudget:
    C1: float
    C2: float
    C3: float
    C4: float
    C12: float
    E: float
    beta: float
    bound: float
    observed: float
    terms: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.observed <= self.bound

    def to_dict(self):
        return asdict(self) | {"holds": self.holds}


def expm1_over(x: float, scale: float) -> float:
    """``(e^x - 1) * scale / x`` with a 4-term series below ``x = 1e-6``."""
    if x < 1e-6:
        return scale * (1.0 + x / 2.0 + x * x / 6.0 + x ** 3 / 24.0)
    return scale * math.expm1(x) / x


def stability_budget(exact: SurfaceSnapshot, perturbed: SurfaceSnapshot, beta: float | None = None,
                     grid: Grid | None = None, g: float = GRAVITY,
                     smoother: SmootherSpec | None = None) -> StabilityBudget:
    """Both sides of the L1 Lipschitz estimate for a pair of measurement sets.

    Each snapshot is reconstructed (through ``smoother`` if given) and the
    constants are evaluated on the results. ``beta`` defaults to the smaller
    of the two discharge minima; the channel length comes from ``grid`` or,
    without one, from the snapshot spacing.
    """
    if beta is not None and not beta > 0:
        raise ValueError("beta must be positive")
    rec = reconstruct(exact, g, smoother=smoother)
    rec_pert = reconstruct(perturbed, g, smoother=smoother)
    dx = exact.dx if grid is None else grid.dx
    length = exact.x.size * dx if grid is None else grid.length
    return budget_from_results(rec, rec_pert, exact.b_a1, perturbed.b_a1, dx, length, beta, g)


def budget_from_results(exact: ReconstructionResult, perturbed: ReconstructionResult, b_a1: float,
                        b_a1_pert: float, dx: float, length: float, beta: float | None = None,
                        g: float = GRAVITY) -> StabilityBudget:
    """Stability budget for two finished reconstructions (depth ``q^2 / phi``)."""
    if beta is None:
        beta = min(float(exact.q_rec.min()), float(perturbed.q_rec.min()))
    if not beta > 0:
        raise ValueError("beta must be positive")

    def l1(v):
        return float(np.sum(np.abs(v)) * dx)

    def linf(v):
        return float(np.max(np.abs(v)))

    z, zt = exact.zeta_used, perturbed.zeta_used
    q, qt = exact.q_rec, perturbed.q_rec
    h = q ** 2 / exact.phi
    ht = qt ** 2 / perturbed.phi
    zx = dx_spatial(z, dx)
    zxt = dx_spatial(zt, dx)
    b2 = beta * beta
    c1 = g * linf(zx)
    c2 = g / b2 * linf(zx) * linf(h * ht)
    c3 = g / b2 * linf(ht) * linf(zxt * (q + qt))
    c4 = g / b2 * linf(ht) * linf(q ** 2)
    c12 = expm1_over(c2 * length, length * linf(h * ht) / b2)
    e_a1 = float(q[0] ** 2 / (h[0] * ht[0]) * (abs(b_a1 - b_a1_pert) + abs(z[0] - zt[0]))
                 + (q[0] + qt[0]) / ht[0] * abs(q[0] - qt[0]))
    e = e_a1 + c3 * l1(q - qt) + c4 * l1(zx - zxt) + l1(exact.dq_dt_rec - perturbed.dq_dt_rec)
    tail = linf(ht * (q + qt)) / b2 * l1(q - qt) + l1(z - zt)
    bound = float(c12 * e + tail)
    observed = l1(exact.b_rec - perturbed.b_rec)
    return StabilityBudget(c1, c2, c3, c4, c12, e, beta, bound, observed,
                           {"E_upstream": e_a1, "tail": tail})


# --------------------------------------------------------------------------- #
# Error norms                                                                 #
# --------------------------------------------------------------------------- #


def error_norms(b_rec, b_true, dx: float = 1.0):
    """Relative ``(L_inf, L_2)`` errors of a reconstructed bed."""
    b_rec = np.asarray(b_rec, dtype=float)
    b_true = np.asarray(b_true, dtype=float)
    ref_inf = np.max(np.abs(b_true))
    ref_2 = math.sqrt(np.sum(b_true ** 2) * dx)
    if ref_inf == 0 or ref_2 == 0:
        raise ValueError("reference bed has zero norm")
    e = b_rec - b_true
    return float(np.max(np.abs(e)) / ref_inf), float(math.sqrt(np.sum(e ** 2) * dx) / ref_2)
