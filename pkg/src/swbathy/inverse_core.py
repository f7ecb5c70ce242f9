"""Direct bed reconstruction from single-instant surface measurements.

The march runs left to right. The discharge and its time derivative start
from the inlet values at a1, half a cell before the first center; phi and the
bed are anchored at the first center, whose bed value is ``b_a1``:

1. discharge from continuity, ``dq/dx = -dzeta/dt`` (trapezoidal march),
2. its time derivative from ``d(dq/dt)/dx = -d2zeta/dt2``,
3. ``phi = q^2 / h`` from ``dphi/dx = -g zeta_x q^2 / phi - dq/dt`` (Heun),
4. ``b = zeta - q^2 / phi``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_model import GRAVITY
from .surface_lab import SmootherSpec, SurfaceSnapshot, dx_spatial, smooth_spline


class DegenerateFlowError(ArithmeticError):
    """The phi march hit phi <= phi_min: the flow is degenerate at ``cell``."""

    def __init__(self, message, cell):
        super().__init__(message)
        self.cell = cell


class SteadyInversionError(ValueError):
    pass


class NondegeneracyWarning(UserWarning):
    pass


def _trapezoid_march(start, integrand, dx, from_boundary=False):
    """Trapezoidal march of ``dy/dx = -integrand`` from ``start``.

    With ``from_boundary`` the start value sits at the channel end half a cell
    upstream of the first center; the integrand is extrapolated linearly there.
    """
    integrand = np.asarray(integrand, dtype=float)
    if from_boundary:
        edge = 1.5 * integrand[0] - 0.5 * integrand[1]
        start = start - 0.25 * dx * (edge + integrand[0])
    out = np.empty(integrand.size)
    out[0] = start
    out[1:] = start - np.cumsum(0.5 * dx * (integrand[:-1] + integrand[1:]))
    return out


def reconstruct_discharge(snapshot: SurfaceSnapshot, dx: float | None = None) -> np.ndarray:
    """``q_{j+1} = q_j - dx/2 (zeta_t[j] + zeta_t[j+1])``, seeded by ``q(a1)`` at the inlet."""
    return _trapezoid_march(snapshot.q_in, snapshot.dzeta_dt, snapshot.dx if dx is None else dx, True)


def reconstruct_dq_dt(snapshot: SurfaceSnapshot, dx: float | None = None) -> np.ndarray:
    return _trapezoid_march(snapshot.dq_in_dt, snapshot.d2zeta_dt2, snapshot.dx if dx is None else dx, True)


def solve_phi(zeta, q, dq_dt, dx, phi_a1, g=GRAVITY, zeta_x=None, phi_min=None):
    """Heun march for ``phi``.

    ``zeta_x`` defaults to the stencil derivative of ``zeta``. Raises
    ``DegenerateFlowError`` if the predictor or the update drops to
    ``phi_min`` (default ``1e-12 * max(phi_a1, 1)``).
    """
    zeta = np.asarray(zeta, dtype=float)
    q = np.asarray(q, dtype=float)
    dq_dt = np.asarray(dq_dt, dtype=float)
    zx = dx_spatial(zeta, dx) if zeta_x is None else np.asarray(zeta_x, dtype=float)
    if phi_min is None:
        phi_min = 1e-12 * max(phi_a1, 1.0)
    if not phi_a1 > phi_min:
        raise DegenerateFlowError(f"upstream phi={phi_a1:.3e} is not positive", 0)
    force = -g * zx * q * q
    phi = np.empty_like(zeta)
    phi[0] = phi_a1
    for j in range(zeta.size - 1):
        k1 = force[j] / phi[j] - dq_dt[j]
        pred = phi[j] + dx * k1
        if not pred > phi_min:
            raise DegenerateFlowError(f"predictor phi={pred:.3e} at cell {j + 1}", j + 1)
        k2 = force[j + 1] / pred - dq_dt[j + 1]
        phi[j + 1] = phi[j] + 0.5 * dx * (k1 + k2)
        if not phi[j + 1] > phi_min:
            raise DegenerateFlowError(f"phi={phi[j + 1]:.3e} at cell {j + 1}", j + 1)
    return phi


def assemble_bed(zeta, q, phi):
    return np.asarray(zeta) - np.asarray(q) ** 2 / np.asarray(phi)


@dataclass(eq=False)
class ReconstructionResult:
    x: np.ndarray
    q_rec: np.ndarray
    dq_dt_rec: np.ndarray
    phi: np.ndarray
    b_rec: np.ndarray
    zeta_used: np.ndarray
    t_star: float
    min_q: float
    nondegenerate: bool
    b_true: np.ndarray | None = None
    errors: dict = field(default_factory=dict)

    def attach_truth(self, b_true, dx) -> "ReconstructionResult":
        from .flow_diagnostics import error_norms

        self.b_true = np.asarray(b_true, dtype=float)
        linf, l2 = error_norms(self.b_rec, self.b_true, dx)
        self.errors = {"linf_rel": linf, "l2_rel": l2}
        return self

    def save(self, csv_path) -> None:
        """CSV columns plus a JSON sidecar with norms and the degeneracy flag."""
        csv_path = Path(csv_path)
        cols = [self.x, self.q_rec, self.dq_dt_rec, self.phi, self.b_rec]
        names = ["x", "q_rec", "dq_dt_rec", "phi", "b_rec"]
        if self.b_true is not None:
            cols += [self.b_true, np.abs(self.b_rec - self.b_true)]
            names += ["b_true", "abs_err"]
        np.savetxt(csv_path, np.column_stack(cols), delimiter=",", header=",".join(names),
                   comments="", fmt="%.17g")
        head = {"t_star": self.t_star, "min_q": self.min_q, "nondegenerate": self.nondegenerate,
                "degenerate": False, **self.errors}
        csv_path.with_suffix(".json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")


def reconstruct(snapshot: SurfaceSnapshot, g: float = GRAVITY, beta: float = 0.0,
                smoother: SmootherSpec | None = None, mean_depth: float | None = None,
                ) -> ReconstructionResult:
    """Full pipeline from a snapshot to the bed.

    With ``smoother`` the surface is spline-smoothed before both the spatial
    derivative and the bed assembly. ``beta`` is the nondegeneracy threshold;
    falling below it only warns.
    """
    dx = snapshot.dx
    zeta = snapshot.zeta
    if smoother is not None:
        if mean_depth is None:
            mean_depth = float(np.mean(zeta)) - snapshot.b_a1
        budget = smoother.resolve_budget(zeta.size, mean_depth)
        zeta = smooth_spline(snapshot.x, zeta, smoother, budget=budget)
    q = reconstruct_discharge(snapshot)
    dq = reconstruct_dq_dt(snapshot)
    q_min = float(np.min(q))
    ok = q_min >= beta and q_min > 0
    if not ok:
        warnings.warn(f"nondegeneracy violated: min q = {q_min:.4g} (beta = {beta:.4g})",
                      NondegeneracyWarning, stacklevel=2)
    h_a1 = zeta[0] - snapshot.b_a1
    if not h_a1 > 0:
        raise DegenerateFlowError(f"upstream depth {h_a1:.3e} is not positive", 0)
    phi = solve_phi(zeta, q, dq, dx, q[0] ** 2 / h_a1, g)
    b = assemble_bed(zeta, q, phi)
    return ReconstructionResult(snapshot.x, q, dq, phi, b, zeta, snapshot.t_star, q_min, ok)


# --------------------------------------------------------------------------- #
# Steady closed forms                                                         #
# --------------------------------------------------------------------------- #


def steady_analytic(zeta, q_in, h_a1, g=GRAVITY):
    """Depth and bed from ``1/h^2 = 1/h(a1)^2 - (2g/q^2)(zeta - zeta(a1))``."""
    zeta = np.asarray(zeta, dtype=float)
    if q_in == 0:
        raise SteadyInversionError("steady inversion needs a nonzero discharge")
    rad = 1.0 / h_a1 ** 2 - 2.0 * g / q_in ** 2 * (zeta - zeta[0])
    if np.any(rad <= 0):
        j = int(np.flatnonzero(rad <= 0)[0])
        raise SteadyInversionError(f"non-positive radicand at cell {j}: no steady flow fits these data")
    h = 1.0 / np.sqrt(rad)
    return h, zeta - h


def discharge_from_second_point(zeta_a1, zeta_ref, h_a1, h_ref, g=GRAVITY):
    """Squared discharge implied by a known depth at a second point."""
    if zeta_ref == zeta_a1:
        raise SteadyInversionError("reference point must have a different surface level")
    if h_ref == h_a1:
        raise SteadyInversionError("reference depth equals the upstream depth")
    q2 = -2.0 * g * (zeta_ref - zeta_a1) * h_a1 ** 2 * h_ref ** 2 / (h_a1 ** 2 - h_ref ** 2)
    if not q2 > 0:
        raise SteadyInversionError(f"inconsistent data: q^2 = {q2:.4g}")
    return q2


def steady_discharge_free(zeta, h_a1, x, x_ref, h_ref, g=GRAVITY):
    """Steady inversion with the inlet discharge replaced by a known depth at ``x_ref``.

    Returns ``(h, b, q)``.
    """
    zeta = np.asarray(zeta, dtype=float)
    x = np.asarray(x, dtype=float)
    j = int(np.argmin(np.abs(x - x_ref)))
    q2 = discharge_from_second_point(zeta[0], zeta[j], h_a1, h_ref, g)
    q = math.sqrt(q2)
    h, b = steady_analytic(zeta, q, h_a1, g)
    return h, b, q
