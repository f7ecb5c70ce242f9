"""Command-line front end and benchmark harness.

Subcommands mirror the pipeline stages (forward, snapshot, reconstruct,
steady, check) so that every benchmark row can be rebuilt by chaining them;
``bench`` runs the whole pipeline for the shipped scenarios and tabulates
errors against the tolerance bands in ``scenarios/tolerances.json``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_model import ConfigError, FlowHistory, ScenarioConfig
from .flow_diagnostics import (
    HypothesisError,
    budget_from_results,
    condition_holds,
    error_norms,
    evaluate_conditions,
    froude_field,
    max_lambda2_series,
    nondegeneracy,
)
from .forward_solver import ForwardError, run_forward
from .inverse_core import (
    DegenerateFlowError,
    NondegeneracyWarning,
    SteadyInversionError,
    reconstruct,
    steady_analytic,
    steady_discharge_free,
)
from .surface_lab import (
    MeasurementError,
    NoiseSpec,
    SmootherSpec,
    SurfaceSnapshot,
    add_noise,
    extract_snapshot,
)

log = logging.getLogger("swbathy")

SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"
TEST_IDS = tuple(f"test-{i}" for i in range(1, 6))
OUT_DIR_ENV = "SWBATHY_OUT_DIR"
DEFAULT_OUT_DIR = "swbathy-out"
DEFAULT_HISTORY_LEVELS = 400
TAIL_LEVELS = 8

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ArtifactError(OSError):
    """Missing or malformed artifact."""


class DegenerateReconstruction(ArithmeticError):
    pass


# --------------------------------------------------------------------------- #
# Scenarios, tolerances, artifacts                                            #
# --------------------------------------------------------------------------- #


def scenario_path(ident: str) -> Path:
    """Path of a shipped scenario (``test-3``, ``3``) or of a user JSON file."""
    p = Path(ident)
    if p.suffix == ".json" and p.exists():
        return p
    name = f"test-{ident}" if ident.isdigit() else ident
    p = SCENARIO_DIR / f"{name}.json"
    if name not in TEST_IDS or not p.exists():
        raise UsageError(f"unknown scenario {ident!r}; expected one of {', '.join(TEST_IDS)} or a JSON path")
    return p


def load_scenario(ident: str, nx: int | None = None) -> ScenarioConfig:
    path = scenario_path(ident)
    try:
        cfg = ScenarioConfig.load(path)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    if not cfg.name:
        cfg = ScenarioConfig.from_dict(cfg.to_dict() | {"name": path.stem})
    return cfg if nx is None else cfg.with_overrides(n_cells=nx)


def load_tolerances(path: Path | None = None) -> dict:
    return json.loads((path or SCENARIO_DIR / "tolerances.json").read_text())


def parse_tests(spec: str) -> list[str]:
    """``"1..5"``, ``"1,3"``, ``"test-2"`` -> scenario ids."""
    out = []
    try:
        for part in spec.split(","):
            part = part.strip().removeprefix("test-")
            if ".." in part:
                lo, hi = part.split("..")
                out += [f"test-{i}" for i in range(int(lo), int(hi) + 1)]
            elif part:
                out.append(f"test-{int(part)}")
    except ValueError as exc:
        raise UsageError(f"bad --tests value {spec!r}") from exc
    bad = [t for t in out if t not in TEST_IDS]
    if bad or not out:
        raise UsageError(f"bad --tests value {spec!r}")
    return out


def parse_ints(spec: str) -> list[int]:
    try:
        vals = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {spec!r}") from exc
    if not vals:
        raise UsageError("empty integer list")
    return vals


def parse_window(spec: str | None):
    if spec is None:
        return None
    try:
        lo, hi = (float(v) for v in spec.split(","))
    except ValueError as exc:
        raise UsageError(f"--window expects 'a,b', got {spec!r}") from exc
    if not hi > lo:
        raise UsageError("--window needs a < b")
    return lo, hi


def run_dir_name(cfg: ScenarioConfig, native_nx: int | None) -> str:
    nx = cfg.grid.n_cells
    return cfg.name if native_nx in (None, nx) else f"{cfg.name}-nx{nx}"


def thin_levels(n_levels: int, max_levels: int) -> np.ndarray:
    """Level indices kept in a history CSV: an even stride plus the full tail.

    The tail keeps the time stencils at the last level exact after a reload.
    """
    if max_levels <= 0 or n_levels <= max_levels:
        return np.arange(n_levels)
    head = np.unique(np.linspace(0, n_levels - 1 - TAIL_LEVELS, max_levels - TAIL_LEVELS).round().astype(int))
    return np.union1d(head, np.arange(n_levels - TAIL_LEVELS, n_levels))


def write_history_csv(path: Path, hist: FlowHistory, x, b_center, max_levels: int = 0) -> Path:
    """Tidy CSV ``t,x,zeta,q,h``, level-major; ``max_levels`` thins via ``thin_levels``."""
    keep = thin_levels(len(hist), max_levels)
    n = hist.zeta.shape[1]
    if np.size(x) != n or np.size(b_center) != n:
        raise ArtifactError("grid does not match the history")
    cols = [np.repeat(hist.times[keep], n), np.tile(np.asarray(x, dtype=float), keep.size),
            hist.zeta[keep].ravel(), hist.q[keep].ravel(), (hist.zeta[keep] - b_center).ravel()]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header="t,x,zeta,q,h", comments="", fmt="%.17g")
    return Path(path)


def read_history_csv(path: Path) -> FlowHistory:
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read history {path}: {exc}") from exc
    if data.size == 0 or data.shape[1] != 5:
        raise ArtifactError(f"{path}: expected columns t,x,zeta,q,h")
    t = data[:, 0]
    n = int(np.count_nonzero(t == t[0]))
    if data.shape[0] % n:
        raise ArtifactError(f"{path}: ragged history")
    shape = (data.shape[0] // n, n)
    try:
        return FlowHistory(t[::n].copy(), data[:, 2].reshape(shape), data[:, 3].reshape(shape))
    except ConfigError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _clean(obj):
    """Replace non-finite floats so that the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _config_near(path: Path, explicit: str | None) -> ScenarioConfig:
    if explicit:
        return load_scenario(explicit)
    cand = Path(path).parent / "config.json"
    if not cand.exists():
        raise UsageError(f"no config.json next to {path}; pass --config")
    return load_scenario(str(cand))


# --------------------------------------------------------------------------- #
# Records and tables                                                          #
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class RunRecord:
    scenario: str
    nx: int
    config_hash: str
    forward: dict = field(default_factory=dict)
    conditions: dict = field(default_factory=dict)
    reconstruction: dict = field(default_factory=dict)
    steady: dict | None = None
    noise: dict | None = None
    stability: dict | None = None
    artifacts: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict, repr=False)

    @property
    def errors(self) -> dict | None:
        return self.reconstruction.get("errors")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("scenario", "nx", "config_hash", "forward", "conditions",
                                               "reconstruction", "steady", "noise", "stability",
                                               "artifacts", "timing")}


@dataclass
class BenchRow:
    test: str
    method: str
    nx: int
    linf: float | None
    l2: float | None
    reported_linf: float | None
    reported_l2: float | None
    band_linf: list | None
    band_l2: list | None
    passed: bool | None

    @staticmethod
    def within(v, band) -> bool:
        return v is not None and math.isfinite(v) and band[0] <= v <= band[1]


class BenchmarkTable:
    """Error rows with pass/fail taken strictly from the declared bands."""

    columns = ("test", "method", "nx", "linf", "l2", "reported_linf", "reported_l2", "passed")

    def __init__(self, rows=None):
        self.rows: list[BenchRow] = list(rows or [])

    @classmethod
    def from_records(cls, records, tolerances: dict) -> "BenchmarkTable":
        bands = {(r["test"], r["method"], r["nx"]): r for r in tolerances["rows"]}
        rows = []
        for rec in records:
            for method, errs in _methods_of(rec):
                tol = bands.get((rec.scenario, method, rec.nx), {})
                reported = tol.get("reported") or {}
                b_inf, b_2 = tol.get("linf"), tol.get("l2")
                linf = None if errs is None else errs.get("linf_rel")
                l2 = None if errs is None else errs.get("l2_rel")
                passed = None
                if b_inf is not None and b_2 is not None:
                    passed = BenchRow.within(linf, b_inf) and BenchRow.within(l2, b_2)
                rows.append(BenchRow(rec.scenario, method, rec.nx, linf, l2, reported.get("linf"),
                                     reported.get("l2"), b_inf, b_2, passed))
        return cls(rows)

    def row(self, test, method, nx) -> BenchRow:
        for r in self.rows:
            if (r.test, r.method, r.nx) == (test, method, nx):
                return r
        raise KeyError((test, method, nx))

    def to_csv(self, path: Path) -> Path:
        lines = [",".join(self.columns)]
        for r in self.rows:
            nums = (r.linf, r.l2, r.reported_linf, r.reported_l2)
            vals = [r.test, r.method, str(r.nx)] + [_fmt(v) for v in nums]
            vals.append("n/a" if r.passed is None else ("pass" if r.passed else "fail"))
            lines.append(",".join(vals))
        path.write_text("\n".join(lines) + "\n")
        return path

    def to_json(self, path: Path) -> Path:
        return write_json(path, [r.__dict__ for r in self.rows])

    def format_text(self) -> str:
        head = f"{'test':8} {'method':15} {'N_x':>5} {'Linf_r':>9} {'L2_r':>9} {'reported':>15}  result"
        out = [head, "-" * len(head)]
        for r in self.rows:
            reported = "" if r.reported_linf is None else f"{100 * r.reported_linf:.2f}/{100 * r.reported_l2:.2f}%"
            res = "n/a" if r.passed is None else ("PASS" if r.passed else "FAIL")
            out.append(f"{r.test:8} {r.method:15} {r.nx:5d} {_pct(r.linf):>9} {_pct(r.l2):>9} {reported:>15}  {res}")
        return "\n".join(out)


def _fmt(v):
    return "" if v is None else repr(float(v))


def _pct(v):
    if v is None:
        return "-"
    return "inf" if not math.isfinite(v) else f"{100 * v:.3f}%"


def _methods_of(rec: RunRecord):
    if rec.steady is not None:
        yield "steady", rec.steady.get("errors")
    yield "inverse", rec.errors
    if rec.noise is not None:
        yield "noisy-smoothed", rec.noise["smoothed"]["mean"]
        yield "noisy-raw", rec.noise["raw"]["mean"]


# --------------------------------------------------------------------------- #
# Pipeline                                                                    #
# --------------------------------------------------------------------------- #


def reconstruct_checked(snapshot: SurfaceSnapshot, g: float, beta: float = 0.0, smoother=None,
                        mean_depth=None):
    """``reconstruct`` that turns a nondegeneracy failure into an exception."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NondegeneracyWarning)
        res = reconstruct(snapshot, g, beta=beta, smoother=smoother, mean_depth=mean_depth)
    if not res.nondegenerate:
        _, qmin, j = nondegeneracy(res.q_rec, beta)
        raise DegenerateReconstruction(
            f"degenerate reconstruction: q = {qmin:.4g} <= beta = {beta:.4g} at cell {j} (x = {res.x[j]:.4g})")
    return res


def noise_trials(snapshot: SurfaceSnapshot, b_true, dx: float, g: float, level: float, seeds,
                 smooth: bool, mean_depth: float) -> dict:
    """Per-seed error norms of the reconstruction from a noise-corrupted surface."""
    depth = snapshot.zeta - b_true
    smoother = SmootherSpec(noise_level=level) if smooth else None
    per_seed = []
    for seed in seeds:
        noisy = snapshot.with_zeta(add_noise(snapshot.zeta, NoiseSpec(level, int(seed)), depth))
        try:
            res = reconstruct_checked(noisy, g, smoother=smoother, mean_depth=mean_depth)
            linf, l2 = error_norms(res.b_rec, b_true, dx)
            per_seed.append({"seed": int(seed), "linf_rel": linf, "l2_rel": l2, "degenerate": False})
        except (DegenerateFlowError, DegenerateReconstruction) as exc:
            per_seed.append({"seed": int(seed), "linf_rel": math.inf, "l2_rel": math.inf,
                             "degenerate": True, "reason": str(exc)})
    mean = {k: float(np.mean([s[k] for s in per_seed])) for k in ("linf_rel", "l2_rel")}
    return {"level": level, "smoothed": smooth, "per_seed": per_seed, "mean": mean}


def run_scenario(ident: str, overrides: dict | None = None, out_dir: Path | None = None, seed: int = 0,
                 history_levels: int = DEFAULT_HISTORY_LEVELS) -> RunRecord:
    """forward -> snapshot -> conditions -> reconstruct -> norms, plus the scenario extras.

    ``overrides`` accepts ``nx`` and ``n_seeds``. With ``out_dir`` the stage
    artifacts are written to ``out_dir/<scenario>[-nx<N>]``.
    """
    overrides = dict(overrides or {})
    native = load_scenario(ident)
    cfg = load_scenario(ident, overrides.get("nx"))
    tol = load_tolerances()["checks"].get(cfg.name, {})
    g, dx = cfg.gravity, cfg.grid.dx
    t0 = time.perf_counter()
    fwd = run_forward(cfg)
    t_forward = time.perf_counter() - t0
    bed, hist = fwd.bed, fwd.history
    snap = extract_snapshot(hist, cfg.t_star, bed, cfg.boundary, cfg.grid)
    conditions = evaluate_conditions(hist, bed, cfg.grid.length, None, g)
    res = reconstruct_checked(snap, g).attach_truth(bed.b_center, dx)
    final = hist.level(hist.index_of(snap.t_star))
    rec = RunRecord(cfg.name, cfg.grid.n_cells, cfg.config_hash(), fwd.summary(), conditions)
    rec.reconstruction = {"errors": res.errors, "min_q": res.min_q, "nondegenerate": res.nondegenerate,
                          "t_star": snap.t_star}
    t_s, lam2 = max_lambda2_series(hist, bed, g)
    rec.series = {"x": snap.x, "b_true": bed.b_center, "b_rec": res.b_rec, "zeta": snap.zeta,
                  "q_forward": final.q, "q_rec": res.q_rec, "fr": froude_field(final, bed, g),
                  "t": t_s, "max_lambda2": lam2}
    if cfg.name == "test-1":
        t1 = time.perf_counter()
        _, b_st = steady_analytic(snap.zeta, snap.q_in, snap.h_a1, g)
        linf, l2 = error_norms(b_st, bed.b_center, dx)
        rec.steady = {"errors": {"linf_rel": linf, "l2_rel": l2}}
        rec.series["b_steady"] = b_st
        rec.timing["steady_pipeline_s"] = t_forward + time.perf_counter() - t1
    if cfg.name == "test-5":
        level = float(cfg.extras.get("noise", {}).get("relative_amplitude", tol.get("noise_level", 0.02)))
        n_seeds = int(overrides.get("n_seeds") or tol.get("noise_seeds", 5))
        seeds = range(seed, seed + n_seeds)
        mean_depth = float(np.mean(snap.zeta - bed.b_center))
        raw = noise_trials(snap, bed.b_center, dx, g, level, seeds, False, mean_depth)
        smoothed = noise_trials(snap, bed.b_center, dx, g, level, seeds, True, mean_depth)
        rec.noise = {"level": level, "seeds": list(seeds), "raw": raw, "smoothed": smoothed}
        rec.stability = _noise_stability(snap, res, bed.b_center, cfg, level, seed, mean_depth)
    rec.timing |= {"forward_s": t_forward, "total_s": time.perf_counter() - t0}
    if out_dir is not None:
        _write_run_artifacts(Path(out_dir), rec, cfg, native, hist, bed, snap, res, history_levels)
    return rec


def _noise_stability(snap, res, b_true, cfg, level, seed, mean_depth):
    """Stability budget for the clean snapshot against its noisy, smoothed copy."""
    from .surface_lab import smooth_spline

    noisy = add_noise(snap.zeta, NoiseSpec(level, seed), snap.zeta - b_true)
    spec = SmootherSpec(noise_level=level)
    pert = snap.with_zeta(smooth_spline(snap.x, noisy, spec, budget=spec.resolve_budget(noisy.size, mean_depth)))
    try:
        res_p = reconstruct_checked(pert, cfg.gravity)
    except (DegenerateFlowError, DegenerateReconstruction) as exc:
        return {"seed": seed, "error": str(exc)}
    budget = budget_from_results(res, res_p, snap.b_a1, pert.b_a1, cfg.grid.dx, cfg.grid.length,
                                 g=cfg.gravity)
    return {"seed": seed} | budget.to_dict()


def _write_run_artifacts(root, rec, cfg, native, hist, bed, snap, res, history_levels):
    d = root / run_dir_name(cfg, native.grid.n_cells)
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.json")
    arts = {"config": "config.json"}
    arts["history"] = write_history_csv(d / "history.csv", hist, cfg.grid.centers, bed.b_center, history_levels).name
    snap.save(d / "snapshot.json")
    arts["snapshot"] = "snapshot.json"
    res.save(d / "reconstruction.csv")
    arts["reconstruction"] = "reconstruction.csv"
    write_json(d / "conditions.json", rec.conditions)
    arts["conditions"] = "conditions.json"
    if rec.steady is not None:
        _write_steady_csv(d / "steady.csv", snap.x, rec.series["b_steady"], bed.b_center)
        arts["steady"] = "steady.csv"
    if rec.noise is not None:
        write_json(d / "noise.json", rec.noise)
        arts["noise"] = "noise.json"
    rec.artifacts = arts
    for p in emit_plotdata(rec, d):
        arts[p.stem] = p.name
    # wall-clock timings live apart so every other artifact is byte-reproducible
    arts["timing"] = "timing.json"
    write_json(d / "timing.json", rec.timing)
    write_json(d / "record.json", {k: v for k, v in rec.to_dict().items() if k != "timing"})


def _write_steady_csv(path, x, b, b_true=None, h=None):
    cols, names = [x, b], ["x", "b_steady"]
    if h is not None:
        cols.insert(1, h)
        names.insert(1, "h")
    if b_true is not None:
        cols += [b_true, np.abs(b - b_true)]
        names += ["b_true", "abs_err"]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def emit_plotdata(record: RunRecord, out_dir: Path) -> list[Path]:
    """Tidy CSV series for external plotting tools."""
    s = record.series
    need = ("x", "b_true", "b_rec", "zeta", "q_forward", "q_rec", "fr", "t", "max_lambda2")
    if not s or any(k not in s for k in need):
        raise ArtifactError(f"record {record.scenario or '<empty>'} carries no plottable series")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = {
        "plot_bed": (("x", "b_true", "b_rec", "zeta"),),
        "plot_discharge": (("x", "q_forward", "q_rec"),),
        "plot_froude": (("x", "fr"),),
        "plot_lambda2": (("t", "max_lambda2"),),
    }
    paths = []
    for name, (cols,) in spec.items():
        p = out_dir / f"{name}.csv"
        np.savetxt(p, np.column_stack([s[c] for c in cols]), delimiter=",", header=",".join(cols),
                   comments="", fmt="%.17g")
        paths.append(p)
    return paths


def _run_one(args):
    ident, nx, out_dir, seed, n_seeds, levels = args
    return run_scenario(ident, {"nx": nx, "n_seeds": n_seeds}, out_dir, seed, levels)


def run_bench(tests, nxs, out_dir: Path | None, seed: int = 0, jobs: int = 1, n_seeds: int | None = None,
              history_levels: int = DEFAULT_HISTORY_LEVELS):
    tasks = [(t, nx, out_dir, seed, n_seeds, history_levels) for t in tests for nx in nxs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_run_one, tasks))
    else:
        records = [_run_one(t) for t in tasks]
    table = BenchmarkTable.from_records(records, load_tolerances())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "table.csv")
        table.to_json(out_dir / "table.json")
    return records, table


# --------------------------------------------------------------------------- #
# CLI                                                                         #
# --------------------------------------------------------------------------- #


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # repeated on every subcommand; SUPPRESS there keeps a value given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--out-dir", default=d(None),
                            help=f"output root (default: ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
        parser.add_argument("--seed", type=int, default=d(0), help="base seed for noise draws")
        parser.add_argument("--quiet", action="store_true", default=d(False), help="only print errors")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)
    p = _Parser(prog="swbathy", description=__doc__.split("\n\n")[0])
    global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("forward", parents=[common], help="run the forward solver, write history.csv")
    f.add_argument("config", help="scenario id (test-1..test-5) or JSON path")
    f.add_argument("--nx", type=int, default=None)
    f.add_argument("--max-levels", type=int, default=0, help="thin the stored history (0 keeps all levels)")

    s = sub.add_parser("snapshot", parents=[common], help="extract the measurement set from a history")
    s.add_argument("history")
    s.add_argument("--t-star", default="last")
    s.add_argument("--config", default=None, help="scenario config (default: config.json beside the history)")

    r = sub.add_parser("reconstruct", parents=[common], help="invert a snapshot for the bed")
    r.add_argument("snapshot")
    r.add_argument("--config", default=None, help="scenario config for error norms")
    r.add_argument("--beta", type=float, default=0.0, help="nondegeneracy threshold")
    r.add_argument("--smooth", action="store_true", help="spline-smooth the surface first")
    r.add_argument("--level", type=float, default=0.02, help="noise level used by the default smoothing budget")

    st = sub.add_parser("steady", parents=[common], help="closed-form steady inversion")
    st.add_argument("snapshot")
    st.add_argument("--discharge-free", action="store_true", help="replace q(a1) by a depth at --x-ref")
    st.add_argument("--x-ref", type=float, default=None)
    st.add_argument("--h-ref", type=float, default=None, help="depth at --x-ref (default: from --config truth)")
    st.add_argument("--config", default=None)

    c = sub.add_parser("check", parents=[common], help="regime bounds and sufficient conditions")
    c.add_argument("history")
    c.add_argument("--window", default=None, help="a,b in seconds")
    c.add_argument("--config", default=None)

    b = sub.add_parser("bench", parents=[common], help="run scenarios and tabulate errors")
    b.add_argument("--tests", default="1..5")
    b.add_argument("--nx", default="100")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--n-seeds", type=int, default=None, help="noise seeds for test-5 (default from tolerances)")
    b.add_argument("--history-levels", type=int, default=DEFAULT_HISTORY_LEVELS,
                   help="levels kept in history.csv (0 keeps all)")

    n = sub.add_parser("noise-study", parents=[common], help="noisy-surface reconstruction")
    n.add_argument("config")
    n.add_argument("--level", type=float, default=0.02)
    n.add_argument("--smooth", action="store_true")
    n.add_argument("--n-seeds", type=int, default=1)
    n.add_argument("--nx", type=int, default=None)
    return p


def _out_root(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _target_dir(args, input_path: Path, name: str) -> Path:
    d = (_out_root(args) / name) if args.out_dir else Path(input_path).parent
    d.mkdir(parents=True, exist_ok=True)
    return d


def _say(args, msg):
    if not args.quiet:
        print(msg)


def cmd_forward(args) -> int:
    cfg = load_scenario(args.config, args.nx)
    fwd = run_forward(cfg)
    d = _out_root(args) / cfg.name
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.json")
    write_history_csv(d / "history.csv", fwd.history, cfg.grid.centers, fwd.bed.b_center, args.max_levels)
    write_json(d / "forward.json", fwd.summary())
    _say(args, f"{cfg.name}: {fwd.steps} steps to t = {fwd.history.times[-1]:g} s, "
               f"min depth {fwd.min_depth:.4g} m -> {d / 'history.csv'}")
    return EXIT_OK


def cmd_snapshot(args) -> int:
    cfg = _config_near(args.history, args.config)
    hist = read_history_csv(args.history)
    if hist.zeta.shape[1] != cfg.grid.n_cells:
        raise UsageError("history and config disagree on the number of cells")
    t_star = args.t_star if args.t_star == "last" else float(args.t_star)
    try:
        snap = extract_snapshot(hist, t_star, cfg.sample_bed(), cfg.boundary, cfg.grid)
    except MeasurementError as exc:
        raise UsageError(str(exc)) from exc
    d = _target_dir(args, Path(args.history), cfg.name)
    if args.out_dir:
        cfg.dump(d / "config.json")
    snap.save(d / "snapshot.json")
    _say(args, f"snapshot at t* = {snap.t_star:g} s -> {d / 'snapshot.json'}")
    return EXIT_OK


def _truth(path, explicit):
    try:
        return _config_near(path, explicit)
    except UsageError:
        return None


def cmd_reconstruct(args) -> int:
    snap = SurfaceSnapshot.load(args.snapshot)
    cfg = _truth(args.snapshot, args.config)
    g = cfg.gravity if cfg else 9.812
    smoother = SmootherSpec(noise_level=args.level) if args.smooth else None
    res = reconstruct_checked(snap, g, beta=args.beta, smoother=smoother)
    if cfg is not None:
        res.attach_truth(cfg.sample_bed().b_center, snap.dx)
    d = _target_dir(args, Path(args.snapshot), cfg.name if cfg else "reconstruction")
    res.save(d / "reconstruction.csv")
    msg = f"min q = {res.min_q:.4g}"
    if res.errors:
        msg += f", Linf_r = {_pct(res.errors['linf_rel'])}, L2_r = {_pct(res.errors['l2_rel'])}"
    _say(args, f"{msg} -> {d / 'reconstruction.csv'}")
    return EXIT_OK


def cmd_steady(args) -> int:
    snap = SurfaceSnapshot.load(args.snapshot)
    cfg = _truth(args.snapshot, args.config)
    g = cfg.gravity if cfg else 9.812
    b_true = cfg.sample_bed().b_center if cfg else None
    if args.discharge_free:
        if args.x_ref is None:
            raise UsageError("--discharge-free needs --x-ref")
        h_ref = args.h_ref
        if h_ref is None:
            if b_true is None:
                raise UsageError("--discharge-free needs --h-ref or a config for the reference depth")
            j = int(np.argmin(np.abs(snap.x - args.x_ref)))
            h_ref = float(snap.zeta[j] - b_true[j])
        h, b, q = steady_discharge_free(snap.zeta, snap.h_a1, snap.x, args.x_ref, h_ref, g)
        note = f"discharge from depth at x = {args.x_ref:g}: q = {q:.5g}"
    else:
        h, b = steady_analytic(snap.zeta, snap.q_in, snap.h_a1, g)
        note = f"q = {snap.q_in:.5g}"
    d = _target_dir(args, Path(args.snapshot), cfg.name if cfg else "steady")
    _write_steady_csv(d / "steady.csv", snap.x, b, b_true, h)
    if b_true is not None:
        linf, l2 = error_norms(b, b_true, snap.dx)
        note += f", Linf_r = {_pct(linf)}, L2_r = {_pct(l2)}"
    _say(args, f"{note} -> {d / 'steady.csv'}")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _config_near(args.history, args.config)
    hist = read_history_csv(args.history)
    out = evaluate_conditions(hist, cfg.sample_bed(), cfg.grid.length, parse_window(args.window), cfg.gravity)
    d = _target_dir(args, Path(args.history), cfg.name)
    write_json(d / "conditions.json", out)
    reg = out["regime"]
    _say(args, f"c1 = {reg['c1']:.4g}, c2 = {reg['c2']:.4g}, strongly subcritical: {reg['strong_subcritical']}")
    for name in ("theorem", "corollary"):
        _say(args, f"{name}: {_describe(out[name])}")
    return EXIT_OK


def _describe(rep: dict) -> str:
    if rep.get("holds"):
        return f"holds, rho = {rep['rho']:.4g}, certified {rep.get('certified_interval')}"
    shifted = rep.get("shifted")
    base = rep.get("error") or f"fails (margin {rep.get('margin_inf', float('nan')):.4g})"
    if shifted:
        return (f"{base}; holds from t_s = {shifted['window'][0]:.4g} s, rho = {shifted['rho']:.4g}, "
                f"certified {shifted['certified_interval']}")
    return base


def cmd_bench(args) -> int:
    tests = parse_tests(args.tests)
    nxs = parse_ints(args.nx)
    root = _out_root(args)
    records, table = run_bench(tests, nxs, root, args.seed, max(1, args.jobs), args.n_seeds, args.history_levels)
    _say(args, table.format_text())
    for rec in records:
        cond = rec.conditions
        _say(args, f"{rec.scenario} N_x={rec.nx}: theorem {'holds' if condition_holds(cond['theorem']) else 'fails'}, "
                   f"corollary {'holds' if condition_holds(cond['corollary']) else 'fails'}")
    _say(args, f"artifacts in {root}")
    return EXIT_OK


def cmd_noise_study(args) -> int:
    cfg = load_scenario(args.config, args.nx)
    fwd = run_forward(cfg)
    snap = extract_snapshot(fwd.history, cfg.t_star, fwd.bed, cfg.boundary, cfg.grid)
    b_true = fwd.bed.b_center
    seeds = range(args.seed, args.seed + max(1, args.n_seeds))
    out = noise_trials(snap, b_true, cfg.grid.dx, cfg.gravity, args.level, seeds, args.smooth,
                       float(np.mean(snap.zeta - b_true)))
    d = _out_root(args) / cfg.name
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / f"noise-study{'-smoothed' if args.smooth else ''}.json", out)
    for s in out["per_seed"]:
        _say(args, f"seed {s['seed']}: Linf_r = {_pct(s['linf_rel'])}, L2_r = {_pct(s['l2_rel'])}")
    _say(args, f"mean: Linf_r = {_pct(out['mean']['linf_rel'])}, L2_r = {_pct(out['mean']['l2_rel'])}")
    return EXIT_OK


COMMANDS = {"forward": cmd_forward, "snapshot": cmd_snapshot, "reconstruct": cmd_reconstruct,
            "steady": cmd_steady, "check": cmd_check, "bench": cmd_bench, "noise-study": cmd_noise_study}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ForwardError, DegenerateFlowError, DegenerateReconstruction, SteadyInversionError,
            HypothesisError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, MeasurementError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
